#include "symape/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace symape {

namespace {

double g_backward_fault = 0.0;

std::shared_ptr<TensorNode> make_node(Shape shape, const char* op) {
  auto node = std::make_shared<TensorNode>();
  node->value.assign(static_cast<size_t>(numel(shape)), 0.0);
  node->shape = std::move(shape);
  node->op = op;
  return node;
}

// Result node wired to its parents; requires_grad propagates.
Tensor make_op(Shape shape, std::vector<Tensor> parents, const char* op) {
  auto node = make_node(std::move(shape), op);
  for (const Tensor& p : parents) {
    node->requires_grad = node->requires_grad || p.node()->requires_grad;
    node->parents.push_back(p.node());
  }
  return Tensor(std::move(node));
}

void check(bool cond, const char* op, const std::string& msg) {
  if (!cond) throw std::invalid_argument(std::string(op) + ": " + msg);
}

int64_t last_dim(const Tensor& t) { return t.shape().back(); }

}  // namespace

void set_backward_fault_for_tests(double fault) { g_backward_fault = fault; }

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

Mask Mask::ones(const Shape& shape) {
  Mask m;
  m.shape = shape;
  m.keep.assign(static_cast<size_t>(numel(shape)), 1);
  return m;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  auto node = make_node(shape, "leaf");
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  Tensor t = zeros(shape, requires_grad);
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

Tensor Tensor::from_vector(const Shape& shape, std::vector<double> data,
                           bool requires_grad) {
  if (numel(shape) != static_cast<int64_t>(data.size()))
    throw std::invalid_argument("from_vector: shape " + shape_to_string(shape) +
                                " does not match data length " +
                                std::to_string(data.size()));
  auto node = std::make_shared<TensorNode>();
  node->shape = shape;
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_vector({}, {value}, requires_grad);
}

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item: tensor is not a scalar");
  return node_->value[0];
}

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty())
    throw std::runtime_error("grad: no gradient recorded for this tensor");
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

Tensor Tensor::detach() const {
  return from_vector(node_->shape, node_->value, false);
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "add",
        "shape mismatch " + shape_to_string(a.shape()) + " vs " +
            shape_to_string(b.shape()));
  Tensor out = make_op(a.shape(), {a, b}, "add");
  const size_t n = a.values().size();
  for (size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] + b.values()[i];
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node(), on = out.node();
    out.node()->backward_fn = [an, bn, on] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
      }
    };
  }
  return out;
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  check(bias.rank() == 1, "add_bias", "bias must be rank 1");
  check(last_dim(a) == bias.size(), "add_bias",
        "bias length " + std::to_string(bias.size()) + " vs last dim " +
            std::to_string(last_dim(a)));
  Tensor out = make_op(a.shape(), {a, bias}, "add_bias");
  const int64_t n = last_dim(a);
  const int64_t rows = a.size() / n;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < n; ++j)
      out.values()[r * n + j] = a.values()[r * n + j] + bias.values()[j];
  if (out.requires_grad()) {
    auto an = a.node(), bn = bias.node(), on = out.node();
    out.node()->backward_fn = [an, bn, on, rows, n] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < n; ++j) bn->grad[j] += on->grad[r * n + j];
      }
    };
  }
  return out;
}

Tensor add_scalar_param(const Tensor& a, const Tensor& s) {
  check(s.size() == 1, "add_scalar_param", "s must have exactly one element");
  Tensor out = make_op(a.shape(), {a, s}, "add_scalar_param");
  const double sv = s.values()[0];
  for (size_t i = 0; i < a.values().size(); ++i)
    out.values()[i] = a.values()[i] + sv;
  if (out.requires_grad()) {
    auto an = a.node(), sn = s.node(), on = out.node();
    out.node()->backward_fn = [an, sn, on] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (sn->requires_grad) {
        sn->ensure_grad();
        double g = 0.0;
        for (double v : on->grad) g += v;
        sn->grad[0] += g;
      }
    };
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "sub", "shape mismatch");
  Tensor out = make_op(a.shape(), {a, b}, "sub");
  for (size_t i = 0; i < a.values().size(); ++i)
    out.values()[i] = a.values()[i] - b.values()[i];
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node(), on = out.node();
    out.node()->backward_fn = [an, bn, on] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
      }
    };
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "mul",
        "shape mismatch " + shape_to_string(a.shape()) + " vs " +
            shape_to_string(b.shape()));
  Tensor out = make_op(a.shape(), {a, b}, "mul");
  for (size_t i = 0; i < a.values().size(); ++i)
    out.values()[i] = a.values()[i] * b.values()[i];
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node(), on = out.node();
    out.node()->backward_fn = [an, bn, on] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += on->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i)
          bn->grad[i] += on->grad[i] * an->value[i];
      }
    };
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = make_op(a.shape(), {a}, "scale");
  for (size_t i = 0; i < a.values().size(); ++i) out.values()[i] = a.values()[i] * c;
  if (out.requires_grad()) {
    auto an = a.node(), on = out.node();
    out.node()->backward_fn = [an, on, c] {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
    };
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double c) {
  Tensor out = make_op(a.shape(), {a}, "add_scalar");
  for (size_t i = 0; i < a.values().size(); ++i) out.values()[i] = a.values()[i] + c;
  if (out.requires_grad()) {
    auto an = a.node(), on = out.node();
    out.node()->backward_fn = [an, on] {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    };
  }
  return out;
}

Tensor sigmoid(const Tensor& a) {
  Tensor out = make_op(a.shape(), {a}, "sigmoid");
  for (size_t i = 0; i < a.values().size(); ++i) {
    const double x = a.values()[i];
    out.values()[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                               : std::exp(x) / (1.0 + std::exp(x));
  }
  if (out.requires_grad()) {
    auto an = a.node(), on = out.node();
    out.node()->backward_fn = [an, on] {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) {
        const double y = on->value[i];
        an->grad[i] += on->grad[i] * y * (1.0 - y);
      }
    };
  }
  return out;
}

Tensor relu(const Tensor& a) {
  Tensor out = make_op(a.shape(), {a}, "relu");
  for (size_t i = 0; i < a.values().size(); ++i)
    out.values()[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
  if (out.requires_grad()) {
    auto an = a.node(), on = out.node();
    out.node()->backward_fn = [an, on] {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i)
        if (an->value[i] > 0.0) an->grad[i] += on->grad[i];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.rank() >= 2, "matmul", "lhs rank must be >= 2");
  check(b.rank() == 2, "matmul", "rhs rank must be 2");
  const int64_t k = last_dim(a);
  check(b.dim(0) == k, "matmul",
        "inner dimensions disagree: " + shape_to_string(a.shape()) + " x " +
            shape_to_string(b.shape()));
  const int64_t n = b.dim(1);
  const int64_t rows = a.size() / k;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  Tensor out = make_op(std::move(out_shape), {a, b}, "matmul");

  const double* av = a.values().data();
  const double* bv = b.values().data();
  double* ov = out.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    double* orow = ov + r * n;
    const double* arow = av + r * k;
    for (int64_t l = 0; l < k; ++l) {
      const double al = arow[l];
      if (al == 0.0) continue;
      const double* brow = bv + l * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += al * brow[j];
    }
  }

  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node(), on = out.node();
    out.node()->backward_fn = [an, bn, on, rows, k, n] {
      const double fault = 1.0 + g_backward_fault;
      if (an->requires_grad) {
        an->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          const double* grow = on->grad.data() + r * n;
          double* arow = an->grad.data() + r * k;
          for (int64_t l = 0; l < k; ++l) {
            const double* brow = bn->value.data() + l * n;
            double acc = 0.0;
            for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            arow[l] += acc * fault;
          }
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          const double* arow = an->value.data() + r * k;
          const double* grow = on->grad.data() + r * n;
          for (int64_t l = 0; l < k; ++l) {
            const double al = arow[l];
            if (al == 0.0) continue;
            double* brow = bn->grad.data() + l * n;
            for (int64_t j = 0; j < n; ++j) brow[j] += al * grow[j];
          }
        }
      }
    };
  }
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  check(a.rank() == 3 && b.rank() == 3, "bmm", "inputs must be rank 3");
  check(a.dim(0) == b.dim(0), "bmm", "batch dimensions disagree");
  check(a.dim(2) == b.dim(1), "bmm",
        "inner dimensions disagree: " + shape_to_string(a.shape()) + " x " +
            shape_to_string(b.shape()));
  const int64_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor out = make_op({nb, m, n}, {a, b}, "bmm");

  for (int64_t s = 0; s < nb; ++s) {
    const double* as = a.values().data() + s * m * k;
    const double* bs = b.values().data() + s * k * n;
    double* os = out.values().data() + s * m * n;
    for (int64_t r = 0; r < m; ++r)
      for (int64_t l = 0; l < k; ++l) {
        const double al = as[r * k + l];
        if (al == 0.0) continue;
        const double* brow = bs + l * n;
        double* orow = os + r * n;
        for (int64_t j = 0; j < n; ++j) orow[j] += al * brow[j];
      }
  }

  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node(), on = out.node();
    out.node()->backward_fn = [an, bn, on, nb, m, k, n] {
      if (an->requires_grad) an->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (int64_t s = 0; s < nb; ++s) {
        const double* as = an->value.data() + s * m * k;
        const double* bs = bn->value.data() + s * k * n;
        const double* gs = on->grad.data() + s * m * n;
        if (an->requires_grad) {
          double* gas = an->grad.data() + s * m * k;
          for (int64_t r = 0; r < m; ++r)
            for (int64_t l = 0; l < k; ++l) {
              const double* brow = bs + l * n;
              const double* grow = gs + r * n;
              double acc = 0.0;
              for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              gas[r * k + l] += acc;
            }
        }
        if (bn->requires_grad) {
          double* gbs = bn->grad.data() + s * k * n;
          for (int64_t r = 0; r < m; ++r)
            for (int64_t l = 0; l < k; ++l) {
              const double al = as[r * k + l];
              if (al == 0.0) continue;
              const double* grow = gs + r * n;
              double* gbrow = gbs + l * n;
              for (int64_t j = 0; j < n; ++j) gbrow[j] += al * grow[j];
            }
        }
      }
    };
  }
  return out;
}

namespace {

std::vector<int64_t> strides_of(const Shape& shape) {
  std::vector<int64_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
    s[i] = s[i + 1] * shape[i + 1];
  return s;
}

// out[i0,..] = in[perm applied]; fills `map` with out-index -> in-index.
std::vector<int64_t> permute_index_map(const Shape& in_shape,
                                       const std::vector<int>& perm) {
  const int r = static_cast<int>(in_shape.size());
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = in_shape[perm[i]];
  const auto in_strides = strides_of(in_shape);
  const int64_t total = numel(in_shape);
  std::vector<int64_t> map(static_cast<size_t>(total));
  std::vector<int64_t> idx(r, 0);
  for (int64_t o = 0; o < total; ++o) {
    int64_t in_off = 0;
    for (int i = 0; i < r; ++i) in_off += idx[i] * in_strides[perm[i]];
    map[o] = in_off;
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  check(static_cast<int>(perm.size()) == a.rank(), "permute",
        "perm length must equal rank");
  std::vector<int> seen(perm.size(), 0);
  for (int p : perm) {
    check(p >= 0 && p < a.rank() && !seen[p], "permute", "invalid permutation");
    seen[p] = 1;
  }
  Shape out_shape(a.rank());
  for (int i = 0; i < a.rank(); ++i) out_shape[i] = a.dim(perm[i]);
  Tensor out = make_op(std::move(out_shape), {a}, "permute");
  auto map = permute_index_map(a.shape(), perm);
  for (size_t o = 0; o < map.size(); ++o) out.values()[o] = a.values()[map[o]];
  if (out.requires_grad()) {
    auto an = a.node(), on = out.node();
    auto shared_map = std::make_shared<std::vector<int64_t>>(std::move(map));
    out.node()->backward_fn = [an, on, shared_map] {
      an->ensure_grad();
      for (size_t o = 0; o < shared_map->size(); ++o)
        an->grad[(*shared_map)[o]] += on->grad[o];
    };
  }
  return out;
}

Tensor transpose_last2(const Tensor& a) {
  check(a.rank() >= 2, "transpose_last2", "rank must be >= 2");
  std::vector<int> perm(a.rank());
  for (int i = 0; i < a.rank(); ++i) perm[i] = i;
  std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
  return permute(a, perm);
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  check(numel(shape) == a.size(), "reshape",
        "element count mismatch: " + shape_to_string(a.shape()) + " -> " +
            shape_to_string(shape));
  Tensor out = make_op(shape, {a}, "reshape");
  out.values() = a.values();
  if (out.requires_grad()) {
    auto an = a.node(), on = out.node();
    out.node()->backward_fn = [an, on] {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

Tensor softmax_lastdim(const Tensor& a, const Mask* mask) {
  const int64_t n = last_dim(a);
  const int64_t rows = a.size() / n;
  if (mask) {
    check(mask->shape == a.shape(), "softmax",
          "mask shape must match input shape");
  }
  Tensor out = make_op(a.shape(), {a}, "softmax");
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = a.values().data() + r * n;
    const uint8_t* keep = mask ? mask->keep.data() + r * n : nullptr;
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < n; ++j)
      if (!keep || keep[j]) mx = std::max(mx, x[j]);
    if (mx == -std::numeric_limits<double>::infinity())
      throw std::domain_error("softmax: fully masked row " + std::to_string(r));
    double z = 0.0;
    double* y = out.values().data() + r * n;
    for (int64_t j = 0; j < n; ++j) {
      if (!keep || keep[j]) {
        y[j] = std::exp(x[j] - mx);
        z += y[j];
      } else {
        y[j] = 0.0;
      }
    }
    for (int64_t j = 0; j < n; ++j) y[j] /= z;
  }
  if (out.requires_grad()) {
    auto an = a.node(), on = out.node();
    out.node()->backward_fn = [an, on, rows, n] {
      an->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const double* p = on->value.data() + r * n;
        const double* g = on->grad.data() + r * n;
        double dot = 0.0;
        for (int64_t j = 0; j < n; ++j) dot += g[j] * p[j];
        double* ga = an->grad.data() + r * n;
        for (int64_t j = 0; j < n; ++j) ga[j] += p[j] * (g[j] - dot);
      }
    };
  }
  return out;
}

Tensor log_softmax_lastdim(const Tensor& a) {
  const int64_t n = last_dim(a);
  const int64_t rows = a.size() / n;
  Tensor out = make_op(a.shape(), {a}, "log_softmax");
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = a.values().data() + r * n;
    double* y = out.values().data() + r * n;
    double mx = x[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int64_t j = 0; j < n; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (int64_t j = 0; j < n; ++j) y[j] = x[j] - lse;
  }
  if (out.requires_grad()) {
    auto an = a.node(), on = out.node();
    out.node()->backward_fn = [an, on, rows, n] {
      an->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const double* y = on->value.data() + r * n;
        const double* g = on->grad.data() + r * n;
        double gsum = 0.0;
        for (int64_t j = 0; j < n; ++j) gsum += g[j];
        double* ga = an->grad.data() + r * n;
        for (int64_t j = 0; j < n; ++j) ga[j] += g[j] - std::exp(y[j]) * gsum;
      }
    };
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  const int64_t n = last_dim(x);
  check(gain.rank() == 1 && gain.size() == n, "layer_norm", "gain size mismatch");
  check(bias.rank() == 1 && bias.size() == n, "layer_norm", "bias size mismatch");
  const int64_t rows = x.size() / n;
  Tensor out = make_op(x.shape(), {x, gain, bias}, "layer_norm");
  auto xhat = std::make_shared<std::vector<double>>(x.values().size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* xi = x.values().data() + r * n;
    double mean = 0.0;
    for (int64_t j = 0; j < n; ++j) mean += xi[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    double* y = out.values().data() + r * n;
    for (int64_t j = 0; j < n; ++j) {
      const double xh = (xi[j] - mean) * inv;
      (*xhat)[r * n + j] = xh;
      y[j] = gain.values()[j] * xh + bias.values()[j];
    }
  }
  if (out.requires_grad()) {
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    out.node()->backward_fn = [xn, gn, bn, on, xhat, inv_std, rows, n] {
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const double* g = on->grad.data() + r * n;
        const double* xh = xhat->data() + r * n;
        if (gn->requires_grad || bn->requires_grad) {
          for (int64_t j = 0; j < n; ++j) {
            if (gn->requires_grad) gn->grad[j] += g[j] * xh[j];
            if (bn->requires_grad) bn->grad[j] += g[j];
          }
        }
        if (xn->requires_grad) {
          double m1 = 0.0, m2 = 0.0;
          for (int64_t j = 0; j < n; ++j) {
            const double dxh = g[j] * gn->value[j];
            m1 += dxh;
            m2 += dxh * xh[j];
          }
          m1 /= static_cast<double>(n);
          m2 /= static_cast<double>(n);
          double* gx = xn->grad.data() + r * n;
          const double inv = (*inv_std)[r];
          for (int64_t j = 0; j < n; ++j) {
            const double dxh = g[j] * gn->value[j];
            gx[j] += inv * (dxh - m1 - xh[j] * m2);
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// lookup / dropout / reductions
// ---------------------------------------------------------------------------

Tensor embedding(const Tensor& table, const std::vector<int64_t>& ids,
                 const Shape& ids_shape) {
  check(table.rank() == 2, "embedding", "table must be rank 2");
  check(numel(ids_shape) == static_cast<int64_t>(ids.size()), "embedding",
        "ids shape mismatch");
  const int64_t vocab = table.dim(0), d = table.dim(1);
  for (int64_t id : ids)
    if (id < 0 || id >= vocab)
      throw std::out_of_range("embedding: id " + std::to_string(id) +
                              " outside vocabulary of size " +
                              std::to_string(vocab));
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  Tensor out = make_op(std::move(out_shape), {table}, "embedding");
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.values().data() + ids[i] * d, d,
                out.values().data() + static_cast<int64_t>(i) * d);
  if (out.requires_grad()) {
    auto tn = table.node(), on = out.node();
    auto ids_copy = std::make_shared<std::vector<int64_t>>(ids);
    out.node()->backward_fn = [tn, on, ids_copy, d] {
      tn->ensure_grad();
      for (size_t i = 0; i < ids_copy->size(); ++i) {
        const double* g = on->grad.data() + static_cast<int64_t>(i) * d;
        double* t = tn->grad.data() + (*ids_copy)[i] * d;
        for (int64_t j = 0; j < d; ++j) t[j] += g[j];
      }
    };
  }
  return out;
}

Tensor gather_lastdim(const Tensor& a, const std::vector<int64_t>& ids) {
  const int64_t n = last_dim(a);
  const int64_t rows = a.size() / n;
  check(static_cast<int64_t>(ids.size()) == rows, "gather_lastdim",
        "one index per row required");
  for (int64_t id : ids)
    if (id < 0 || id >= n)
      throw std::out_of_range("gather_lastdim: index out of range");
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  Tensor out = make_op(std::move(out_shape), {a}, "gather_lastdim");
  for (int64_t r = 0; r < rows; ++r)
    out.values()[r] = a.values()[r * n + ids[r]];
  if (out.requires_grad()) {
    auto an = a.node(), on = out.node();
    auto ids_copy = std::make_shared<std::vector<int64_t>>(ids);
    out.node()->backward_fn = [an, on, ids_copy, n] {
      an->ensure_grad();
      for (size_t r = 0; r < ids_copy->size(); ++r)
        an->grad[static_cast<int64_t>(r) * n + (*ids_copy)[r]] += on->grad[r];
    };
  }
  return out;
}

Tensor dropout(const Tensor& a, double p_drop, bool training, Rng* rng) {
  check(p_drop >= 0.0 && p_drop < 1.0, "dropout", "p_drop must be in [0, 1)");
  if (!training || p_drop == 0.0) return a;
  check(rng != nullptr, "dropout", "rng required in training mode");
  Tensor out = make_op(a.shape(), {a}, "dropout");
  auto mult = std::make_shared<std::vector<double>>(a.values().size());
  const double keep_scale = 1.0 / (1.0 - p_drop);
  for (size_t i = 0; i < a.values().size(); ++i) {
    (*mult)[i] = rng->uniform() >= p_drop ? keep_scale : 0.0;
    out.values()[i] = a.values()[i] * (*mult)[i];
  }
  if (out.requires_grad()) {
    auto an = a.node(), on = out.node();
    out.node()->backward_fn = [an, on, mult] {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i)
        an->grad[i] += on->grad[i] * (*mult)[i];
    };
  }
  return out;
}

Tensor sum_all(const Tensor& a) {
  Tensor out = make_op({}, {a}, "sum_all");
  double s = 0.0;
  for (double v : a.values()) s += v;
  out.values()[0] = s;
  if (out.requires_grad()) {
    auto an = a.node(), on = out.node();
    out.node()->backward_fn = [an, on] {
      an->ensure_grad();
      const double g = on->grad[0];
      for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
    };
  }
  return out;
}

Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

Tensor sum_lastdim(const Tensor& a) {
  const int64_t n = last_dim(a);
  const int64_t rows = a.size() / n;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  Tensor out = make_op(std::move(out_shape), {a}, "sum_lastdim");
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) s += a.values()[r * n + j];
    out.values()[r] = s;
  }
  if (out.requires_grad()) {
    auto an = a.node(), on = out.node();
    out.node()->backward_fn = [an, on, rows, n] {
      an->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const double g = on->grad[r];
        double* ga = an->grad.data() + r * n;
        for (int64_t j = 0; j < n; ++j) ga[j] += g;
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward sweep
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw std::invalid_argument("backward: loss must be a defined scalar");

  // Iterative post-order DFS over parent edges; reversed, it yields every
  // consumer before its producers.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next_parent] = stack.back();
    if (!node->requires_grad) {
      order.push_back(node);
      stack.pop_back();
      continue;
    }
    if (next_parent < node->parents.size()) {
      TensorNode* parent = node->parents[next_parent].get();
      ++next_parent;
      if (parent->requires_grad && visited.insert(parent).second)
        stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn();
}

}  // namespace symape
