#pragma once

#include <functional>
#include <vector>

#include "tlid/tensor.hpp"

namespace tlid {

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Compares the tape gradient of a scalar function with central differences.
/// Returns max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
double grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5);

/// Same check over several leaf tensors that f closes over. Every tensor in
/// `leaves` is perturbed in place and restored. When max_coords_per_leaf > 0,
/// only that many evenly spaced coordinates of each leaf are probed.
double grad_check_leaves(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                         double eps = 1e-5, std::size_t max_coords_per_leaf = 0);

}  // namespace tlid
