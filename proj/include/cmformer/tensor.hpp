#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cmformer/errors.hpp"

namespace cmf {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // allocated on first accumulation
  bool grad_valid = false;
  std::int64_t node = -1;  // index into the active tape, -1 when not recorded
};

// Dense row-major f64 tensor. Value-semantic handle over a shared buffer;
// the buffer is treated as immutable once an op has consumed it.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl != nullptr; }
  const Shape& shape() const { return impl->shape; }
  std::size_t rank() const { return impl->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl->shape[i]; }
  std::size_t numel() const { return impl->data.size(); }

  std::vector<double>& data() { return impl->data; }
  const std::vector<double>& data() const { return impl->data; }

  // Scalar readout; throws unless numel() == 1.
  double value() const;
  double at2(std::size_t i, std::size_t j) const;  // rank-2 convenience

  bool requires_grad() const { return impl->requires_grad; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return impl && impl->grad_valid; }
  const std::vector<double>& grad() const;
  void zero_grad();

  std::shared_ptr<TensorImpl> impl;
};

struct TapeNode {
  const char* op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::shared_ptr<TensorImpl> output;
  std::function<void(TapeNode&)> backward;
};

// Ordered record of executed differentiable ops. Execution order is the
// topological order; rebuilt from scratch on every forward pass.
class Tape {
 public:
  static Tape& active();  // thread-local

  std::size_t size() const { return nodes_.size(); }
  void clear();
  void record(const char* op, std::vector<Tensor> inputs, Tensor& output,
              std::function<void(TapeNode&)> backward);

  // Reverse sweep from a scalar loss; each node visited exactly once.
  // Leaf .grad accumulates additively; the tape is cleared afterward.
  void backward(const Tensor& loss);

 private:
  std::vector<TapeNode> nodes_;
};

// RAII switch that disables tape recording (inference paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// Accumulate into impl->grad, allocating a zero buffer on first touch.
void accumulate_grad(TensorImpl& impl, const double* values, std::size_t n);

// --- differentiable op set -------------------------------------------------
// Reductions and matmul accumulate in ascending inner-index order; tests rely
// on that order being fixed.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_lastdim(const Tensor& a, const Tensor& b);
Tensor select_row(const Tensor& a, std::size_t row);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor softplus(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_lastdim(const Tensor& x);

Tensor softmax_lastdim(const Tensor& x);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 double eps = 1e-5);
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor avgpool2x2(const Tensor& f);
Tensor upsample_nearest2x(const Tensor& f);
Tensor im2col(const Tensor& x, std::size_t ksize, std::size_t stride,
              std::size_t pad);

// Weighted cross entropy over rows: sum_i w_i * CE(logits[i], target[i]) / N.
Tensor cross_entropy_rows(const Tensor& logits,
                          const std::vector<std::size_t>& targets,
                          const std::vector<double>& weights);

}  // namespace cmf
