#include "cmformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <utility>

namespace cmf {

namespace {

thread_local bool g_grad_enabled = true;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_no_nan(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (std::isnan(v)) {
      throw tensor_error(std::string(op) + ": NaN in output");
    }
  }
}

bool want_grad(const Tensor& t) { return g_grad_enabled && t.requires_grad(); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw shape_error(std::string(op) + ": shape mismatch " +
                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t;
  t.impl = std::make_shared<TensorImpl>();
  t.impl->shape = std::move(shape);
  t.impl->data.assign(shape_numel(t.impl->shape), 0.0);
  t.impl->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl->data.begin(), t.impl->data.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw shape_error("from_data: " + shape_str(shape) + " needs " +
                      std::to_string(shape_numel(shape)) + " values, got " +
                      std::to_string(data.size()));
  }
  Tensor t;
  t.impl = std::make_shared<TensorImpl>();
  t.impl->shape = std::move(shape);
  t.impl->data = std::move(data);
  t.impl->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

double Tensor::value() const {
  if (numel() != 1) {
    throw tensor_error("value: tensor " + shape_str(shape()) +
                       " is not a scalar");
  }
  return impl->data[0];
}

double Tensor::at2(std::size_t i, std::size_t j) const {
  return impl->data[i * impl->shape[1] + j];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl->requires_grad = on;
  return *this;
}

const std::vector<double>& Tensor::grad() const {
  if (!impl->grad_valid) {
    throw tensor_error("grad: no gradient has been accumulated");
  }
  return impl->grad;
}

void Tensor::zero_grad() {
  impl->grad.clear();
  impl->grad_valid = false;
}

Tape& Tape::active() {
  thread_local Tape tape;
  return tape;
}

void Tape::clear() {
  for (TapeNode& node : nodes_) node.output->node = -1;
  nodes_.clear();
}

void Tape::record(const char* op, std::vector<Tensor> inputs, Tensor& output,
                  std::function<void(TapeNode&)> backward) {
  TapeNode node;
  node.op = op;
  node.inputs.reserve(inputs.size());
  for (Tensor& t : inputs) node.inputs.push_back(t.impl);
  node.output = output.impl;
  node.backward = std::move(backward);
  output.impl->node = static_cast<std::int64_t>(nodes_.size());
  output.impl->requires_grad = true;
  nodes_.push_back(std::move(node));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw tensor_error("backward: loss must be a scalar, got " +
                       (loss.defined() ? shape_str(loss.shape())
                                       : std::string("<undefined>")));
  }
  const std::int64_t start = loss.impl->node;
  if (start < 0 || static_cast<std::size_t>(start) >= nodes_.size() ||
      nodes_[static_cast<std::size_t>(start)].output != loss.impl) {
    throw tensor_error("backward: loss is detached from the active tape");
  }
  const double one = 1.0;
  accumulate_grad(*loss.impl, &one, 1);
  for (std::int64_t i = start; i >= 0; --i) {
    TapeNode& node = nodes_[static_cast<std::size_t>(i)];
    if (!node.output->grad_valid) continue;  // not an ancestor of the loss
    node.backward(node);
  }
  clear();
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

void accumulate_grad(TensorImpl& impl, const double* values, std::size_t n) {
  if (!impl.grad_valid) {
    impl.grad.assign(impl.data.size(), 0.0);
    impl.grad_valid = true;
  }
  for (std::size_t i = 0; i < n; ++i) impl.grad[i] += values[i];
}

namespace {

// Shared pattern: elementwise binary op over equal shapes.
template <typename Fwd, typename Bwd>
Tensor binary_elementwise(const char* name, const Tensor& a, const Tensor& b,
                          Fwd fwd, Bwd bwd) {
  require_same_shape(a, b, name);
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = fwd(av[i], bv[i]);
  check_no_nan(out, name);
  if (want_grad(a) || want_grad(b)) {
    Tape::active().record(name, {a, b}, out, [bwd](TapeNode& node) {
      TensorImpl& pa = *node.inputs[0];
      TensorImpl& pb = *node.inputs[1];
      const auto& g = node.output->grad;
      const std::size_t m = g.size();
      const bool ga = pa.requires_grad;
      const bool gb = pb.requires_grad;
      std::vector<double> da(ga ? m : 0), db(gb ? m : 0);
      for (std::size_t i = 0; i < m; ++i) {
        auto [dda, ddb] = bwd(pa.data[i], pb.data[i], g[i]);
        if (ga) da[i] = dda;
        if (gb) db[i] = ddb;
      }
      if (ga) accumulate_grad(pa, da.data(), m);
      if (gb) accumulate_grad(pb, db.data(), m);
    });
  }
  return out;
}

template <typename Fwd, typename Bwd>
Tensor unary_elementwise(const char* name, const Tensor& x, Fwd fwd, Bwd bwd) {
  Tensor out = Tensor::zeros(x.shape());
  const std::size_t n = out.numel();
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = fwd(xv[i]);
  check_no_nan(out, name);
  if (want_grad(x)) {
    Tape::active().record(name, {x}, out, [bwd](TapeNode& node) {
      TensorImpl& px = *node.inputs[0];
      if (!px.requires_grad) return;
      const auto& g = node.output->grad;
      const auto& y = node.output->data;
      const std::size_t m = g.size();
      std::vector<double> dx(m);
      for (std::size_t i = 0; i < m; ++i) dx[i] = bwd(px.data[i], y[i], g[i]);
      accumulate_grad(px, dx.data(), m);
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return std::pair{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return std::pair{g, -g}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g) { return std::pair{g * y, g * x}; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double g) {
        return std::pair{g / y, -g * x / (y * y)};
      });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_elementwise(
      "add_scalar", a, [c](double x) { return x + c; },
      [](double, double, double g) { return g; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary_elementwise(
      "mul_scalar", a, [c](double x) { return x * c; },
      [c](double, double, double g) { return g * c; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_elementwise(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y, double g) { return g * y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary_elementwise(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double, double g) { return v > 0.0 ? g : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary_elementwise(
      "exp", x, [](double v) { return std::exp(v); },
      [](double, double y, double g) { return g * y; });
}

Tensor log(const Tensor& x) {
  return unary_elementwise(
      "log", x, [](double v) { return std::log(v); },
      [](double v, double, double g) { return g / v; });
}

Tensor softplus(const Tensor& x) {
  return unary_elementwise(
      "softplus", x,
      [](double v) {
        return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
      },
      [](double v, double, double g) {
        const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                  : std::exp(v) / (1.0 + std::exp(v));
        return g * s;
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw shape_error("matmul: shape mismatch " + shape_str(a.shape()) +
                      " vs " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  const double* av = a.data().data();
  const double* bv = b.data().data();
  double* ov = out.data().data();
  // i-k-j loop: the sum over the inner dimension runs in ascending order.
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t t = 0; t < k; ++t) {
      const double s = av[i * k + t];
      const double* brow = bv + t * n;
      double* orow = ov + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += s * brow[j];
    }
  }
  check_no_nan(out, "matmul");
  if (want_grad(a) || want_grad(b)) {
    Tape::active().record("matmul", {a, b}, out, [m, k, n](TapeNode& node) {
      TensorImpl& pa = *node.inputs[0];
      TensorImpl& pb = *node.inputs[1];
      const double* g = node.output->grad.data();
      if (pa.requires_grad) {
        std::vector<double> da(m * k, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t t = 0; t < k; ++t) {
            const double* brow = pb.data.data() + t * n;
            const double* grow = g + i * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            da[i * k + t] = s;
          }
        }
        accumulate_grad(pa, da.data(), da.size());
      }
      if (pb.requires_grad) {
        std::vector<double> db(k * n, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t t = 0; t < k; ++t) {
            const double s = pa.data[i * k + t];
            const double* grow = g + i * n;
            double* drow = db.data() + t * n;
            for (std::size_t j = 0; j < n; ++j) drow[j] += s * grow[j];
          }
        }
        accumulate_grad(pb, db.data(), db.size());
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) {
    throw shape_error("transpose: expected rank 2, got " +
                      shape_str(a.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.data()[j * m + i] = a.data()[i * n + j];
  if (want_grad(a)) {
    Tape::active().record("transpose", {a}, out, [m, n](TapeNode& node) {
      TensorImpl& pa = *node.inputs[0];
      if (!pa.requires_grad) return;
      const auto& g = node.output->grad;
      std::vector<double> da(m * n);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da[i * n + j] = g[j * m + i];
      accumulate_grad(pa, da.data(), da.size());
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw shape_error("reshape: cannot view " + shape_str(a.shape()) + " as " +
                      shape_str(shape));
  }
  Tensor out = Tensor::from_data(std::move(shape), a.data());
  if (want_grad(a)) {
    Tape::active().record("reshape", {a}, out, [](TapeNode& node) {
      TensorImpl& pa = *node.inputs[0];
      if (!pa.requires_grad) return;
      accumulate_grad(pa, node.output->grad.data(), node.output->grad.size());
    });
  }
  return out;
}

Tensor concat_lastdim(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() == 0) {
    throw shape_error("concat_lastdim: rank mismatch " + shape_str(a.shape()) +
                      " vs " + shape_str(b.shape()));
  }
  for (std::size_t i = 0; i + 1 < a.rank(); ++i) {
    if (a.dim(i) != b.dim(i)) {
      throw shape_error("concat_lastdim: leading shape mismatch " +
                        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
  }
  const std::size_t da = a.dim(a.rank() - 1), db = b.dim(b.rank() - 1);
  const std::size_t rows = a.numel() / da;
  Shape out_shape = a.shape();
  out_shape.back() = da + db;
  Tensor out = Tensor::zeros(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < da; ++i)
      out.data()[r * (da + db) + i] = a.data()[r * da + i];
    for (std::size_t i = 0; i < db; ++i)
      out.data()[r * (da + db) + da + i] = b.data()[r * db + i];
  }
  if (want_grad(a) || want_grad(b)) {
    Tape::active().record(
        "concat_lastdim", {a, b}, out, [rows, da, db](TapeNode& node) {
          TensorImpl& pa = *node.inputs[0];
          TensorImpl& pb = *node.inputs[1];
          const auto& g = node.output->grad;
          if (pa.requires_grad) {
            std::vector<double> ga(rows * da);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t i = 0; i < da; ++i)
                ga[r * da + i] = g[r * (da + db) + i];
            accumulate_grad(pa, ga.data(), ga.size());
          }
          if (pb.requires_grad) {
            std::vector<double> gb(rows * db);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t i = 0; i < db; ++i)
                gb[r * db + i] = g[r * (da + db) + da + i];
            accumulate_grad(pb, gb.data(), gb.size());
          }
        });
  }
  return out;
}

Tensor select_row(const Tensor& a, std::size_t row) {
  if (a.rank() != 2 || row >= a.dim(0)) {
    throw shape_error("select_row: row " + std::to_string(row) +
                      " out of range for " + shape_str(a.shape()));
  }
  const std::size_t n = a.dim(1);
  std::vector<double> values(a.data().begin() + row * n,
                             a.data().begin() + (row + 1) * n);
  Tensor out = Tensor::from_data({n}, std::move(values));
  if (want_grad(a)) {
    Tape::active().record("select_row", {a}, out, [row, n](TapeNode& node) {
      TensorImpl& pa = *node.inputs[0];
      if (!pa.requires_grad) return;
      std::vector<double> da(pa.data.size(), 0.0);
      for (std::size_t i = 0; i < n; ++i)
        da[row * n + i] = node.output->grad[i];
      accumulate_grad(pa, da.data(), da.size());
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  check_no_nan(out, "sum");
  if (want_grad(x)) {
    Tape::active().record("sum", {x}, out, [](TapeNode& node) {
      TensorImpl& px = *node.inputs[0];
      if (!px.requires_grad) return;
      const double g = node.output->grad[0];
      std::vector<double> dx(px.data.size(), g);
      accumulate_grad(px, dx.data(), dx.size());
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  const std::size_t n = x.numel();
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s / static_cast<double>(n));
  check_no_nan(out, "mean");
  if (want_grad(x)) {
    Tape::active().record("mean", {x}, out, [n](TapeNode& node) {
      TensorImpl& px = *node.inputs[0];
      if (!px.requires_grad) return;
      const double g = node.output->grad[0] / static_cast<double>(n);
      std::vector<double> dx(px.data.size(), g);
      accumulate_grad(px, dx.data(), dx.size());
    });
  }
  return out;
}

Tensor sum_lastdim(const Tensor& x) {
  if (x.rank() < 1) throw shape_error("sum_lastdim: rank 0 input");
  const std::size_t n = x.dim(x.rank() - 1);
  const std::size_t rows = x.numel() / n;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tensor out = Tensor::zeros(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x.data()[r * n + i];
    out.data()[r] = s;
  }
  check_no_nan(out, "sum_lastdim");
  if (want_grad(x)) {
    Tape::active().record("sum_lastdim", {x}, out, [rows, n](TapeNode& node) {
      TensorImpl& px = *node.inputs[0];
      if (!px.requires_grad) return;
      std::vector<double> dx(rows * n);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < n; ++i)
          dx[r * n + i] = node.output->grad[r];
      accumulate_grad(px, dx.data(), dx.size());
    });
  }
  return out;
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() < 1 || x.dim(x.rank() - 1) < 1) {
    throw shape_error("softmax_lastdim: needs a non-empty last dim, got " +
                      shape_str(x.shape()));
  }
  const std::size_t n = x.dim(x.rank() - 1);
  const std::size_t rows = x.numel() / n;
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data().data() + r * n;
    double* orow = out.data().data() + r * n;
    double mx = kNegInf;
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, row[i]);
    if (mx == kNegInf) {
      throw tensor_error("softmax_lastdim: degenerate softmax row " +
                         std::to_string(r));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      orow[i] = std::exp(row[i] - mx);  // exp(-inf) == 0 exactly
      s += orow[i];
    }
    for (std::size_t i = 0; i < n; ++i) orow[i] /= s;
  }
  check_no_nan(out, "softmax_lastdim");
  if (want_grad(x)) {
    Tape::active().record(
        "softmax_lastdim", {x}, out, [rows, n](TapeNode& node) {
          TensorImpl& px = *node.inputs[0];
          if (!px.requires_grad) return;
          const auto& y = node.output->data;
          const auto& g = node.output->grad;
          std::vector<double> dx(rows * n);
          for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t i = 0; i < n; ++i)
              dot += g[r * n + i] * y[r * n + i];
            for (std::size_t i = 0; i < n; ++i)
              dx[r * n + i] = y[r * n + i] * (g[r * n + i] - dot);
          }
          accumulate_grad(px, dx.data(), dx.size());
        });
  }
  return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 double eps) {
  if (x.rank() < 1) throw shape_error("layernorm: rank 0 input");
  const std::size_t d = x.dim(x.rank() - 1);
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 ||
      bias.dim(0) != d) {
    throw shape_error("layernorm: params " + shape_str(gain.shape()) + "/" +
                      shape_str(bias.shape()) + " do not match last dim of " +
                      shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> inv_std(rows), means(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    means[r] = mu;
    inv_std[r] = is;
    double* orow = out.data().data() + r * d;
    for (std::size_t i = 0; i < d; ++i)
      orow[i] = (row[i] - mu) * is * gain.data()[i] + bias.data()[i];
  }
  check_no_nan(out, "layernorm");
  if (want_grad(x) || want_grad(gain) || want_grad(bias)) {
    Tape::active().record(
        "layernorm", {x, gain, bias}, out,
        [rows, d, means, inv_std](TapeNode& node) {
          TensorImpl& px = *node.inputs[0];
          TensorImpl& pg = *node.inputs[1];
          TensorImpl& pb = *node.inputs[2];
          const auto& g = node.output->grad;
          std::vector<double> dx(px.requires_grad ? rows * d : 0);
          std::vector<double> dg(d, 0.0), db(d, 0.0);
          for (std::size_t r = 0; r < rows; ++r) {
            const double* row = px.data.data() + r * d;
            const double* grow = g.data() + r * d;
            const double is = inv_std[r];
            const double mu = means[r];
            double sum_gy = 0.0, sum_gyx = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
              const double xhat = (row[i] - mu) * is;
              const double gy = grow[i] * pg.data[i];
              sum_gy += gy;
              sum_gyx += gy * xhat;
              dg[i] += grow[i] * xhat;
              db[i] += grow[i];
            }
            if (px.requires_grad) {
              const double inv_d = 1.0 / static_cast<double>(d);
              for (std::size_t i = 0; i < d; ++i) {
                const double xhat = (row[i] - mu) * is;
                const double gy = grow[i] * pg.data[i];
                dx[r * d + i] =
                    is * (gy - inv_d * sum_gy - xhat * inv_d * sum_gyx);
              }
            }
          }
          if (px.requires_grad) accumulate_grad(px, dx.data(), dx.size());
          if (pg.requires_grad) accumulate_grad(pg, dg.data(), dg.size());
          if (pb.requires_grad) accumulate_grad(pb, db.data(), db.size());
        });
  }
  return out;
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0) ||
      b.rank() != 1 || b.dim(0) != w.dim(1)) {
    throw shape_error("affine: shape mismatch x=" + shape_str(x.shape()) +
                      " w=" + shape_str(w.shape()) +
                      " b=" + shape_str(b.shape()));
  }
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  Tensor out = Tensor::zeros({m, n});
  const double* xv = x.data().data();
  const double* wv = w.data().data();
  double* ov = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = ov + i * n;
    for (std::size_t j = 0; j < n; ++j) orow[j] = b.data()[j];
    for (std::size_t t = 0; t < k; ++t) {
      const double s = xv[i * k + t];
      const double* wrow = wv + t * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += s * wrow[j];
    }
  }
  check_no_nan(out, "affine");
  if (want_grad(x) || want_grad(w) || want_grad(b)) {
    Tape::active().record("affine", {x, w, b}, out, [m, k, n](TapeNode& node) {
      TensorImpl& px = *node.inputs[0];
      TensorImpl& pw = *node.inputs[1];
      TensorImpl& pb = *node.inputs[2];
      const double* g = node.output->grad.data();
      if (px.requires_grad) {
        std::vector<double> dx(m * k, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t t = 0; t < k; ++t) {
            const double* wrow = pw.data.data() + t * n;
            const double* grow = g + i * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += grow[j] * wrow[j];
            dx[i * k + t] = s;
          }
        }
        accumulate_grad(px, dx.data(), dx.size());
      }
      if (pw.requires_grad) {
        std::vector<double> dw(k * n, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t t = 0; t < k; ++t) {
            const double s = px.data[i * k + t];
            const double* grow = g + i * n;
            double* drow = dw.data() + t * n;
            for (std::size_t j = 0; j < n; ++j) drow[j] += s * grow[j];
          }
        }
        accumulate_grad(pw, dw.data(), dw.size());
      }
      if (pb.requires_grad) {
        std::vector<double> db(n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) db[j] += g[i * n + j];
        accumulate_grad(pb, db.data(), db.size());
      }
    });
  }
  return out;
}

Tensor avgpool2x2(const Tensor& f) {
  if (f.rank() != 3) {
    throw shape_error("avgpool2x2: expected [H x W x C], got " +
                      shape_str(f.shape()));
  }
  const std::size_t h = f.dim(0), w = f.dim(1), c = f.dim(2);
  if (h % 2 != 0 || w % 2 != 0) {
    throw shape_error("avgpool2x2: odd spatial dims in " +
                      shape_str(f.shape()));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out = Tensor::zeros({oh, ow, c});
  const double* fv = f.data().data();
  double* ov = out.data().data();
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double s = fv[((2 * y) * w + 2 * x) * c + ch] +
                         fv[((2 * y) * w + 2 * x + 1) * c + ch] +
                         fv[((2 * y + 1) * w + 2 * x) * c + ch] +
                         fv[((2 * y + 1) * w + 2 * x + 1) * c + ch];
        ov[(y * ow + x) * c + ch] = 0.25 * s;
      }
    }
  }
  check_no_nan(out, "avgpool2x2");
  if (want_grad(f)) {
    Tape::active().record("avgpool2x2", {f}, out, [h, w, c](TapeNode& node) {
      TensorImpl& pf = *node.inputs[0];
      if (!pf.requires_grad) return;
      const std::size_t oh = h / 2, ow = w / 2;
      const auto& g = node.output->grad;
      std::vector<double> df(h * w * c, 0.0);
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double gv = 0.25 * g[(y * ow + x) * c + ch];
            df[((2 * y) * w + 2 * x) * c + ch] += gv;
            df[((2 * y) * w + 2 * x + 1) * c + ch] += gv;
            df[((2 * y + 1) * w + 2 * x) * c + ch] += gv;
            df[((2 * y + 1) * w + 2 * x + 1) * c + ch] += gv;
          }
        }
      }
      accumulate_grad(pf, df.data(), df.size());
    });
  }
  return out;
}

Tensor upsample_nearest2x(const Tensor& f) {
  if (f.rank() != 3) {
    throw shape_error("upsample_nearest2x: expected [H x W x C], got " +
                      shape_str(f.shape()));
  }
  const std::size_t h = f.dim(0), w = f.dim(1), c = f.dim(2);
  Tensor out = Tensor::zeros({2 * h, 2 * w, c});
  for (std::size_t y = 0; y < 2 * h; ++y) {
    for (std::size_t x = 0; x < 2 * w; ++x) {
      const double* src = f.data().data() + ((y / 2) * w + x / 2) * c;
      double* dst = out.data().data() + (y * 2 * w + x) * c;
      for (std::size_t ch = 0; ch < c; ++ch) dst[ch] = src[ch];
    }
  }
  if (want_grad(f)) {
    Tape::active().record(
        "upsample_nearest2x", {f}, out, [h, w, c](TapeNode& node) {
          TensorImpl& pf = *node.inputs[0];
          if (!pf.requires_grad) return;
          const auto& g = node.output->grad;
          std::vector<double> df(h * w * c, 0.0);
          for (std::size_t y = 0; y < 2 * h; ++y)
            for (std::size_t x = 0; x < 2 * w; ++x)
              for (std::size_t ch = 0; ch < c; ++ch)
                df[((y / 2) * w + x / 2) * c + ch] +=
                    g[(y * 2 * w + x) * c + ch];
          accumulate_grad(pf, df.data(), df.size());
        });
  }
  return out;
}

Tensor im2col(const Tensor& x, std::size_t ksize, std::size_t stride,
              std::size_t pad) {
  if (x.rank() != 3) {
    throw shape_error("im2col: expected [H x W x C], got " +
                      shape_str(x.shape()));
  }
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const std::size_t oh = (h + 2 * pad - ksize) / stride + 1;
  const std::size_t ow = (w + 2 * pad - ksize) / stride + 1;
  const std::size_t patch = ksize * ksize * c;
  Tensor out = Tensor::zeros({oh * ow, patch});
  double* ov = out.data().data();
  const double* xv = x.data().data();
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double* row = ov + (oy * ow + ox) * patch;
      std::size_t idx = 0;
      for (std::size_t ky = 0; ky < ksize; ++ky) {
        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                  static_cast<std::ptrdiff_t>(pad);
        for (std::size_t kx = 0; kx < ksize; ++kx) {
          const std::ptrdiff_t sx =
              static_cast<std::ptrdiff_t>(ox * stride + kx) -
              static_cast<std::ptrdiff_t>(pad);
          if (sy >= 0 && sy < static_cast<std::ptrdiff_t>(h) && sx >= 0 &&
              sx < static_cast<std::ptrdiff_t>(w)) {
            const double* src = xv + (sy * w + sx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) row[idx++] = src[ch];
          } else {
            for (std::size_t ch = 0; ch < c; ++ch) row[idx++] = 0.0;
          }
        }
      }
    }
  }
  if (want_grad(x)) {
    Tape::active().record(
        "im2col", {x}, out, [h, w, c, ksize, stride, pad](TapeNode& node) {
          TensorImpl& px = *node.inputs[0];
          if (!px.requires_grad) return;
          const std::size_t oh = (h + 2 * pad - ksize) / stride + 1;
          const std::size_t ow = (w + 2 * pad - ksize) / stride + 1;
          const std::size_t patch = ksize * ksize * c;
          const auto& g = node.output->grad;
          std::vector<double> dx(h * w * c, 0.0);
          for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const double* row = g.data() + (oy * ow + ox) * patch;
              std::size_t idx = 0;
              for (std::size_t ky = 0; ky < ksize; ++ky) {
                const std::ptrdiff_t sy =
                    static_cast<std::ptrdiff_t>(oy * stride + ky) -
                    static_cast<std::ptrdiff_t>(pad);
                for (std::size_t kx = 0; kx < ksize; ++kx) {
                  const std::ptrdiff_t sx =
                      static_cast<std::ptrdiff_t>(ox * stride + kx) -
                      static_cast<std::ptrdiff_t>(pad);
                  if (sy >= 0 && sy < static_cast<std::ptrdiff_t>(h) &&
                      sx >= 0 && sx < static_cast<std::ptrdiff_t>(w)) {
                    double* dst = dx.data() + (sy * w + sx) * c;
                    for (std::size_t ch = 0; ch < c; ++ch)
                      dst[ch] += row[idx++];
                  } else {
                    idx += c;
                  }
                }
              }
            }
          }
          accumulate_grad(px, dx.data(), dx.size());
        });
  }
  return out;
}

Tensor cross_entropy_rows(const Tensor& logits,
                          const std::vector<std::size_t>& targets,
                          const std::vector<double>& weights) {
  if (logits.rank() != 2) {
    throw shape_error("cross_entropy_rows: expected [N x C], got " +
                      shape_str(logits.shape()));
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (targets.size() != n || weights.size() != n) {
    throw shape_error("cross_entropy_rows: " + std::to_string(targets.size()) +
                      " targets / " + std::to_string(weights.size()) +
                      " weights for " + std::to_string(n) + " rows");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= c) {
      throw shape_error("cross_entropy_rows: target " +
                        std::to_string(targets[i]) + " out of range");
    }
    const double* row = logits.data().data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    total += weights[i] * (lse - row[targets[i]]);
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n));
  check_no_nan(out, "cross_entropy_rows");
  if (want_grad(logits)) {
    Tape::active().record(
        "cross_entropy_rows", {logits}, out,
        [n, c, targets, weights](TapeNode& node) {
          TensorImpl& pl = *node.inputs[0];
          if (!pl.requires_grad) return;
          const double g = node.output->grad[0] / static_cast<double>(n);
          std::vector<double> dl(n * c);
          for (std::size_t i = 0; i < n; ++i) {
            const double* row = pl.data.data() + i * c;
            double mx = row[0];
            for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
            for (std::size_t j = 0; j < c; ++j) {
              const double p = std::exp(row[j] - mx) / s;
              dl[i * c + j] =
                  g * weights[i] * (p - (j == targets[i] ? 1.0 : 0.0));
            }
          }
          accumulate_grad(pl, dl.data(), dl.size());
        });
  }
  return out;
}

}  // namespace cmf
