#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tlid {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into parents' grads.
  std::function<void(Node& self)> backward;

  std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Dense row-major array of doubles with optional participation in the
/// reverse-mode tape. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const;
  std::size_t dim(std::size_t i) const;
  std::size_t rank() const;
  std::size_t size() const;

  std::span<const double> data() const;
  /// In-place access for optimizers and initializers; bypasses the tape.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Runs reverse-mode accumulation from this scalar. The tape is consumed:
  /// only leaves (and this tensor) keep their gradients afterwards.
  void backward() const;

  /// Deep copy detached from any tape.
  Tensor clone() const;
  Tensor detach() const;
  Tensor reshape(Shape shape) const;

  bool defined() const { return node_ != nullptr; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// True unless a NoGradGuard is active on the calling thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

/// Builds an op result; records the backward closure only if some parent
/// participates in the tape and gradients are enabled.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward);

}  // namespace detail
}  // namespace tlid
