#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "symape/rng.hpp"

namespace symape {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Boolean element mask (1 = keep). Shape must match the tensor it is
// applied to; callers expand broadcastable masks before use.
struct Mask {
  Shape shape;
  std::vector<uint8_t> keep;

  static Mask ones(const Shape& shape);
  int64_t size() const { return static_cast<int64_t>(keep.size()); }
};

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backward_fn;  // accumulates into parents' grad
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

// Dense float64 tensor; a value-semantics handle onto a node of the
// dynamically built reverse-mode graph. Tensors without requires_grad
// anywhere in their ancestry never record backward closures.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor from_vector(const Shape& shape, std::vector<double> data,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t size() const { return static_cast<int64_t>(node_->value.size()); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }

  std::vector<double>& values() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad();

  // Copy of the values with no graph attachment.
  Tensor detach() const;

  std::shared_ptr<TensorNode> node() const { return node_; }
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<TensorNode> node_;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);              // same shape
Tensor add_bias(const Tensor& a, const Tensor& bias);      // bias over last dim
Tensor add_scalar_param(const Tensor& a, const Tensor& s); // s is a 1-element tensor
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);              // same shape
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // a: [..., k], b: [k, n]
Tensor bmm(const Tensor& a, const Tensor& b);     // [N,m,k] x [N,k,n]
Tensor transpose_last2(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor permute(const Tensor& a, const std::vector<int>& perm);

// ---- normalization / attention ----
// Rows are the trailing dimension. Masked positions get probability
// exactly 0 and do not enter the normalization; a fully masked row is an
// error. mask may be null.
Tensor softmax_lastdim(const Tensor& a, const Mask* mask = nullptr);
Tensor log_softmax_lastdim(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-6);

// ---- lookup / selection ----
Tensor embedding(const Tensor& table, const std::vector<int64_t>& ids,
                 const Shape& ids_shape);
Tensor gather_lastdim(const Tensor& a, const std::vector<int64_t>& ids);

// Inverted dropout: scales kept activations by 1/(1-p_drop) at train
// time so evaluation is the identity.
Tensor dropout(const Tensor& a, double p_drop, bool training, Rng* rng);

// ---- reductions ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_lastdim(const Tensor& a);

// Reverse-mode sweep from a scalar loss. Gradients accumulate; call
// zero_grad on the leaves between steps.
void backward(const Tensor& loss);

// Test hook: perturbs matmul's input gradient by (1 + fault) so gradient
// checking can prove it catches a corrupted backward. 0 disables.
void set_backward_fault_for_tests(double fault);

}  // namespace symape
