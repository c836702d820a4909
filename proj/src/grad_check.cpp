#include "tlid/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "tlid/error.hpp"

namespace tlid {

namespace {

double scalar_value(const Tensor& y) {
  if (y.size() != 1) throw ContractError("grad_check: function output is not scalar: " + shape_str(y.shape()));
  return y.item();
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

}  // namespace

double grad_check(const ScalarFn& f, const Tensor& x, double eps) {
  if (eps <= 0.0) throw ContractError("grad_check: eps must be positive");
  Tensor leaf = x.detach();
  leaf.set_requires_grad(true);
  return grad_check_leaves([&] { return f(leaf); }, {leaf}, eps);
}

double grad_check_leaves(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double eps,
                         std::size_t max_coords_per_leaf) {
  if (eps <= 0.0) throw ContractError("grad_check: eps must be positive");
  for (auto& l : leaves) {
    l.zero_grad();
    l.set_requires_grad(true);
  }
  Tensor y = f();
  scalar_value(y);
  y.backward();

  double worst = 0.0;
  for (auto& leaf : leaves) {
    std::vector<double> analytic(leaf.size(), 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

    std::vector<std::size_t> coords;
    const std::size_t n = leaf.size();
    if (max_coords_per_leaf == 0 || n <= max_coords_per_leaf) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (std::size_t j = 0; j < max_coords_per_leaf; ++j) coords.push_back(j * n / max_coords_per_leaf);
    }

    NoGradGuard no_grad;
    auto data = leaf.mutable_data();
    for (auto i : coords) {
      const double orig = data[i];
      data[i] = orig + eps;
      const double fp = scalar_value(f());
      data[i] = orig - eps;
      const double fm = scalar_value(f());
      data[i] = orig;
      worst = std::max(worst, relative_error(analytic[i], (fp - fm) / (2.0 * eps)));
    }
  }
  return worst;
}

}  // namespace tlid
