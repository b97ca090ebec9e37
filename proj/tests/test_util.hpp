#pragma once

#include <slotkit/rng.hpp>
#include <slotkit/tensor.hpp>

#include <vector>

namespace slotkit::testutil {

template <typename S>
Tensor<S> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<S> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t.array()[i] = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

template <typename S>
Tensor<S> random_normal(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor<S> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t.array()[i] = static_cast<S>(stddev * rng.normal());
  return t;
}

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  return (a.array() - b.array()).abs().maxCoeff();
}

inline std::vector<int> random_permutation(int n, Rng& rng) {
  std::vector<int> p(n);
  for (int i = 0; i < n; ++i) p[i] = i;
  for (int i = n - 1; i > 0; --i) {
    int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
    std::swap(p[i], p[j]);
  }
  return p;
}

/// Row-permuted copy: out.row(i) = in.row(perm[i]).
template <typename S>
Tensor<S> permute_rows(const Tensor<S>& t, const std::vector<int>& perm) {
  Tensor<S> out(t.shape());
  const Index cols = t.size() / t.shape()[0];
  for (Index i = 0; i < t.shape()[0]; ++i)
    out.array().segment(i * cols, cols) =
        t.array().segment(static_cast<Index>(perm[static_cast<size_t>(i)]) * cols, cols);
  return out;
}

}  // namespace slotkit::testutil
