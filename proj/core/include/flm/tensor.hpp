#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "flm/rng.hpp"

namespace flm {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape) noexcept;
std::string to_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;
};

std::span<double> grad_buffer(Node& node);

}  // namespace detail

// Row-major float64 array with an optional gradient.
//
// Tensor is a handle: copies share storage, like a framework tensor. Ops
// that see an input with requires_grad() record a backward closure on
// their output, which builds the tape that backward() later replays.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double value);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const;

  std::span<double> data();
  std::span<const double> data() const;
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  // Empty span when no gradient has been accumulated yet.
  std::span<const double> grad() const;
  // Allocates a zero gradient on first use.
  std::span<double> mutable_grad();
  void zero_grad();

  // Fresh leaf holding a copy of the values; no tape, no gradient.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor make_op_result(Shape, std::vector<double>, std::vector<Tensor>,
                               std::function<void(detail::Node&)>);

  std::shared_ptr<detail::Node> node_;
};

// Creates an op output. The backward closure is kept only when at least one
// input requires a gradient.
Tensor make_op_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                      std::function<void(detail::Node&)> backward_fn);

// While alive, ops on this thread record no tape (evaluation mode).
class NoGradGuard {
 public:
  NoGradGuard() noexcept;
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

// Reverse-mode sweep from a scalar. Gradients accumulate into every tensor
// on the tape that requires them.
void backward(const Tensor& scalar_loss);

// Gaussian samples rejection-resampled into [mean - 2 std, mean + 2 std].
Tensor trunc_normal(const Shape& shape, double mean, double std, Rng& rng);

}  // namespace flm
