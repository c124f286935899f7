#include "otface/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

namespace otface {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " elements");
  }
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::filled(Shape shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), v);
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ContractError("item() on non-scalar tensor " + shape_str(shape_));
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot of lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

Tensor l2_normalize(const Tensor& v) {
  const double n = l2_norm(v.data());
  if (!(n > kNormFloor)) {
    throw DegenerateInputError("cannot normalize vector with norm " + std::to_string(n));
  }
  Tensor out = v;
  for (double& x : out.data()) x /= n;
  return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (!(na > kNormFloor) || !(nb > kNormFloor)) {
    throw DegenerateInputError("cosine similarity of a near-zero vector");
  }
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

double cosine_distance(std::span<const double> a, std::span<const double> b) {
  return 1.0 - cosine_similarity(a, b);
}

// ---------------------------------------------------------------------------
// Tape plumbing

Var Tape::push(Tensor value, bool requires_grad, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::leaf(Tensor value) { return push(std::move(value), true, nullptr); }
Var Tape::constant(Tensor value) { return push(std::move(value), false, nullptr); }

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) throw ContractError("invalid tape variable");
  return nodes_[v.id];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.size() == 0) return Tensor(n.value.shape());
  return n.grad;
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var root) {
  const Node& r = node(root);
  if (!r.value.is_scalar()) {
    throw ContractError("backward root must be scalar, got " + shape_str(r.value.shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor();
  grad_buffer(root.id)[0] = 1.0;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && n.grad.size() != 0) n.backward(*this, i);
  }
}

void Tape::require_same_shape(Var a, Var b, const char* op) const {
  if (value(a).shape() != value(b).shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(value(a).shape()) +
                         " and " + shape_str(value(b).shape()) + " differ");
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Var Tape::add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out = value(a);
  const auto& bv = value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.nodes_[self].grad;
    for (Var p : {a, b}) {
      if (!t.needs(p)) continue;
      Tensor& gp = t.grad_buffer(p.id);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    }
  });
}

Var Tape::sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor out = value(a);
  const auto& bv = value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.nodes_[self].grad;
    if (t.needs(a)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs(b)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var Tape::mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor out = value(a);
  const auto& bv = value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.nodes_[self].grad;
    const Tensor& av = t.nodes_[a.id].value;
    const Tensor& bv = t.nodes_[b.id].value;
    if (t.needs(a)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs(b)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var Tape::div(Var a, Var b) {
  require_same_shape(a, b, "div");
  Tensor out = value(a);
  const auto& bv = value(b);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (bv[i] == 0.0) throw NonFiniteError("div: division by zero at element " + std::to_string(i));
    out[i] /= bv[i];
  }
  return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.nodes_[self].grad;
    const Tensor& y = t.nodes_[self].value;
    const Tensor& bv = t.nodes_[b.id].value;
    if (t.needs(a)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (t.needs(b)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * y[i] / bv[i];
    }
  });
}

Var Tape::scale(Var a, double c) {
  Tensor out = value(a);
  for (double& x : out.data()) x *= c;
  return push(std::move(out), needs(a), [a, c](Tape& t, std::size_t self) {
    const Tensor& g = t.nodes_[self].grad;
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

Var Tape::add_scalar(Var a, double c) {
  Tensor out = value(a);
  for (double& x : out.data()) x += c;
  return push(std::move(out), needs(a), [a](Tape& t, std::size_t self) {
    const Tensor& g = t.nodes_[self].grad;
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var Tape::relu(Var a) {
  Tensor out = value(a);
  for (double& x : out.data()) x = x > 0.0 ? x : 0.0;
  return push(std::move(out), needs(a), [a](Tape& t, std::size_t self) {
    const Tensor& g = t.nodes_[self].grad;
    const Tensor& av = t.nodes_[a.id].value;
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] > 0.0) ga[i] += g[i];
    }
  });
}

Var Tape::exp(Var a) {
  Tensor out = value(a);
  for (double& x : out.data()) x = std::exp(x);
  if (!out.all_finite()) throw NonFiniteError("exp overflow");
  return push(std::move(out), needs(a), [a](Tape& t, std::size_t self) {
    const Tensor& g = t.nodes_[self].grad;
    const Tensor& y = t.nodes_[self].value;
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

Var Tape::log(Var a) {
  Tensor out = value(a);
  for (double& x : out.data()) {
    if (!(x > 0.0)) throw NonFiniteError("log of nonpositive value");
    x = std::log(x);
  }
  return push(std::move(out), needs(a), [a](Tape& t, std::size_t self) {
    const Tensor& g = t.nodes_[self].grad;
    const Tensor& av = t.nodes_[a.id].value;
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / av[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape

Var Tape::sum(Var a) {
  const auto& av = value(a);
  double s = 0.0;
  for (double x : av.data()) s += x;
  return push(Tensor::scalar(s), needs(a), [a](Tape& t, std::size_t self) {
    const double g = t.nodes_[self].grad[0];
    Tensor& ga = t.grad_buffer(a.id);
    for (double& x : ga.data()) x += g;
  });
}

Var Tape::mean(Var a) {
  const std::size_t n = value(a).size();
  if (n == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var Tape::reshape(Var a, Shape shape) {
  if (shape_numel(shape) != value(a).size()) {
    throw DimensionError("reshape " + shape_str(value(a).shape()) + " to " + shape_str(shape));
  }
  return push(value(a).reshaped(std::move(shape)), needs(a), [a](Tape& t, std::size_t self) {
    const Tensor& g = t.nodes_[self].grad;
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var Tape::transpose(Var a) {
  const auto& av = value(a);
  if (av.rank() != 2) throw DimensionError("transpose expects 2-D, got " + shape_str(av.shape()));
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return push(std::move(out), needs(a), [a, r, c](Tape& t, std::size_t self) {
    const Tensor& g = t.nodes_[self].grad;
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

Var Tape::gather(Var a, std::vector<std::size_t> indices) {
  const auto& av = value(a);
  Tensor out({indices.size()});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= av.size()) {
      throw DimensionError("gather index " + std::to_string(indices[i]) + " out of range for " +
                           shape_str(av.shape()));
    }
    out[i] = av[indices[i]];
  }
  return push(std::move(out), needs(a),
              [a, idx = std::move(indices)](Tape& t, std::size_t self) {
                const Tensor& g = t.nodes_[self].grad;
                Tensor& ga = t.grad_buffer(a.id);
                for (std::size_t i = 0; i < idx.size(); ++i) ga[idx[i]] += g[i];
              });
}

Var Tape::stack(const std::vector<Var>& rows) {
  if (rows.empty()) throw DimensionError("stack of zero tensors");
  const Shape inner = value(rows[0]).shape();
  const std::size_t m = value(rows[0]).size();
  Shape shape{rows.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor out(shape);
  bool rg = false;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto& rv = value(rows[k]);
    if (rv.shape() != inner) {
      throw DimensionError("stack: shape " + shape_str(rv.shape()) + " differs from " +
                           shape_str(inner));
    }
    std::copy(rv.data().begin(), rv.data().end(), out.data().begin() + k * m);
    rg = rg || needs(rows[k]);
  }
  return push(std::move(out), rg, [rows, m](Tape& t, std::size_t self) {
    const Tensor& g = t.nodes_[self].grad;
    for (std::size_t k = 0; k < rows.size(); ++k) {
      if (!t.needs(rows[k])) continue;
      Tensor& gr = t.grad_buffer(rows[k].id);
      for (std::size_t i = 0; i < m; ++i) gr[i] += g[k * m + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace {

// out[m,n] += a[m,k] * b[k,n], with optional transposition flags on a and b
// interpreted against their stored layouts.
void gemm_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
              std::size_t n, bool ta, bool tb) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ta ? a[p * m + i] : a[i * k + p];
      if (av == 0.0) continue;
      if (!tb) {
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * b[j * k + p];
      }
    }
  }
}

}  // namespace

Var Tape::matmul(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: shapes " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()) + " are incompatible");
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  gemm_acc(av.data().data(), bv.data().data(), out.data().data(), m, k, n, false, false);
  return push(std::move(out), needs(a) || needs(b), [a, b, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.nodes_[self].grad;
    if (t.needs(a)) {
      // dA = G * B^T
      gemm_acc(g.data().data(), t.nodes_[b.id].value.data().data(),
               t.grad_buffer(a.id).data().data(), m, n, k, false, true);
    }
    if (t.needs(b)) {
      // dB = A^T * G
      gemm_acc(t.nodes_[a.id].value.data().data(), g.data().data(),
               t.grad_buffer(b.id).data().data(), k, m, n, true, false);
    }
  });
}

Var Tape::conv2d(Var input, Var kernels, Var bias, std::size_t stride, std::size_t padding) {
  const auto& x = value(input);
  const auto& w = value(kernels);
  if (x.rank() != 3 || w.rank() != 4 || w.dim(1) != x.dim(0)) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " and kernels " +
                         shape_str(w.shape()) + " are incompatible");
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t ph = h + 2 * padding, pw = wd + 2 * padding;
  if (kh > ph || kw > pw) {
    throw ConfigError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                      " exceeds padded input " + std::to_string(ph) + "x" + std::to_string(pw));
  }
  if ((ph - kh) % stride != 0 || (pw - kw) % stride != 0) {
    throw ConfigError("conv2d: non-integral output extent for input " + shape_str(x.shape()) +
                      " with kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                      ", stride " + std::to_string(stride) + ", padding " +
                      std::to_string(padding));
  }
  if (bias.valid() && value(bias).shape() != Shape{cout}) {
    throw DimensionError("conv2d: bias " + shape_str(value(bias).shape()) + " for " +
                         std::to_string(cout) + " output channels");
  }
  const std::size_t oh = (ph - kh) / stride + 1, ow = (pw - kw) / stride + 1;
  Tensor out({cout, oh, ow});
  const double* xp = x.data().data();
  const double* wp = w.data().data();
  double* op = out.data().data();
  const auto pad = static_cast<std::ptrdiff_t>(padding);
  for (std::size_t co = 0; co < cout; ++co) {
    const double b0 = bias.valid() ? value(bias)[co] : 0.0;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = b0;
        const auto iy0 = static_cast<std::ptrdiff_t>(oy * stride) - pad;
        const auto ix0 = static_cast<std::ptrdiff_t>(ox * stride) - pad;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const auto iy = iy0 + static_cast<std::ptrdiff_t>(ky);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            const double* xrow = xp + (ci * h + static_cast<std::size_t>(iy)) * wd;
            const double* wrow = wp + ((co * cin + ci) * kh + ky) * kw;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const auto ix = ix0 + static_cast<std::ptrdiff_t>(kx);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
              acc += wrow[kx] * xrow[ix];
            }
          }
        }
        op[(co * oh + oy) * ow + ox] = acc;
      }
    }
  }
  const bool rg = needs(input) || needs(kernels) || (bias.valid() && needs(bias));
  return push(std::move(out), rg,
              [=](Tape& t, std::size_t self) {
                const double* g = t.nodes_[self].grad.data().data();
                const double* xv = t.nodes_[input.id].value.data().data();
                const double* wv = t.nodes_[kernels.id].value.data().data();
                double* gx = t.needs(input) ? t.grad_buffer(input.id).data().data() : nullptr;
                double* gw = t.needs(kernels) ? t.grad_buffer(kernels.id).data().data() : nullptr;
                double* gb = bias.valid() && t.needs(bias) ? t.grad_buffer(bias.id).data().data()
                                                           : nullptr;
                for (std::size_t co = 0; co < cout; ++co) {
                  for (std::size_t oy = 0; oy < oh; ++oy) {
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                      const double go = g[(co * oh + oy) * ow + ox];
                      if (go == 0.0) continue;
                      if (gb) gb[co] += go;
                      const auto iy0 = static_cast<std::ptrdiff_t>(oy * stride) - pad;
                      const auto ix0 = static_cast<std::ptrdiff_t>(ox * stride) - pad;
                      for (std::size_t ci = 0; ci < cin; ++ci) {
                        for (std::size_t ky = 0; ky < kh; ++ky) {
                          const auto iy = iy0 + static_cast<std::ptrdiff_t>(ky);
                          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                          const std::size_t xoff = (ci * h + static_cast<std::size_t>(iy)) * wd;
                          const std::size_t woff = ((co * cin + ci) * kh + ky) * kw;
                          for (std::size_t kx = 0; kx < kw; ++kx) {
                            const auto ix = ix0 + static_cast<std::ptrdiff_t>(kx);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                            if (gw) gw[woff + kx] += go * xv[xoff + static_cast<std::size_t>(ix)];
                            if (gx) gx[xoff + static_cast<std::size_t>(ix)] += go * wv[woff + kx];
                          }
                        }
                      }
                    }
                  }
                }
              });
}

Var Tape::normalize(Var a, int axis) {
  const auto& av = value(a);
  std::size_t groups = 1, len = av.size(), gstride = len, estride = 1;
  if (av.rank() == 2) {
    const std::size_t r = av.dim(0), c = av.dim(1);
    if (axis == 1) {
      groups = r, len = c, gstride = c, estride = 1;
    } else if (axis == 0) {
      groups = c, len = r, gstride = 1, estride = c;
    } else {
      throw DimensionError("normalize: axis must be 0 or 1");
    }
  } else if (av.rank() != 1) {
    throw DimensionError("normalize expects 1-D or 2-D, got " + shape_str(av.shape()));
  }
  Tensor out = av;
  std::vector<double> norms(groups);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    double s = 0.0;
    for (std::size_t e = 0; e < len; ++e) {
      const double v = av[gi * gstride + e * estride];
      s += v * v;
    }
    const double n = std::sqrt(s);
    if (!std::isfinite(n)) {
      throw NonFiniteError("normalize: slice " + std::to_string(gi) + " is not finite");
    }
    if (!(n > kNormFloor)) {
      throw DegenerateInputError("normalize: slice " + std::to_string(gi) + " has norm " +
                                 std::to_string(n) + " below floor");
    }
    norms[gi] = n;
    for (std::size_t e = 0; e < len; ++e) out[gi * gstride + e * estride] /= n;
  }
  return push(std::move(out), needs(a),
              [=, norms = std::move(norms)](Tape& t, std::size_t self) {
                const Tensor& g = t.nodes_[self].grad;
                const Tensor& y = t.nodes_[self].value;
                Tensor& ga = t.grad_buffer(a.id);
                for (std::size_t gi = 0; gi < groups; ++gi) {
                  double yg = 0.0;
                  for (std::size_t e = 0; e < len; ++e) {
                    const std::size_t i = gi * gstride + e * estride;
                    yg += y[i] * g[i];
                  }
                  for (std::size_t e = 0; e < len; ++e) {
                    const std::size_t i = gi * gstride + e * estride;
                    ga[i] += (g[i] - y[i] * yg) / norms[gi];
                  }
                }
              });
}

// ---------------------------------------------------------------------------
// Fused loss primitives

namespace {
// Lower bound on sin(theta) in the arccos derivative; caps d/dcos cos(theta+m).
constexpr double kSinFloor = 1e-6;
}  // namespace

Var Tape::margin_logits(Var cos, std::vector<std::size_t> labels, MarginVariant variant,
                        double s, double m) {
  const auto& cv = value(cos);
  if (cv.rank() != 2 || cv.dim(0) != labels.size()) {
    throw DimensionError("margin_logits: cosines " + shape_str(cv.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = cv.dim(0), c = cv.dim(1);
  Tensor out({n, c});
  // d target_logit / d cos for each row.
  std::vector<double> dtarget(n, s);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) {
      throw ContractError("margin_logits: label " + std::to_string(labels[i]) + " outside " +
                          std::to_string(c) + " classes");
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = s * std::clamp(cv[i * c + j], -1.0, 1.0);
    const double ct = std::clamp(cv[i * c + labels[i]], -1.0, 1.0);
    switch (variant) {
      case MarginVariant::kPlain:
        break;
      case MarginVariant::kAdditiveCosine:
        out[i * c + labels[i]] = s * (ct - m);
        break;
      case MarginVariant::kAdditiveAngular: {
        const double theta = std::acos(ct);
        out[i * c + labels[i]] = s * std::cos(theta + m);
        dtarget[i] = s * std::sin(theta + m) / std::max(std::sin(theta), kSinFloor);
        break;
      }
    }
  }
  return push(std::move(out), needs(cos),
              [cos, n, c, s, labels = std::move(labels), dtarget = std::move(dtarget)](
                  Tape& t, std::size_t self) {
                const Tensor& g = t.nodes_[self].grad;
                Tensor& gc = t.grad_buffer(cos.id);
                for (std::size_t i = 0; i < n; ++i) {
                  for (std::size_t j = 0; j < c; ++j) {
                    gc[i * c + j] += g[i * c + j] * (j == labels[i] ? dtarget[i] : s);
                  }
                }
              });
}

Var Tape::cross_entropy_rows(Var logits, std::vector<std::size_t> labels) {
  const auto& lv = value(logits);
  if (lv.rank() != 2 || lv.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy_rows: logits " + shape_str(lv.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = lv.dim(0), c = lv.dim(1);
  Tensor out({n});
  Tensor probs({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) throw ContractError("cross_entropy_rows: label out of range");
    const double* row = lv.data().data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - lse);
    out[i] = lse - row[labels[i]];
  }
  return push(std::move(out), needs(logits),
              [logits, n, c, labels = std::move(labels), probs = std::move(probs)](
                  Tape& t, std::size_t self) {
                const Tensor& g = t.nodes_[self].grad;
                Tensor& gl = t.grad_buffer(logits.id);
                for (std::size_t i = 0; i < n; ++i) {
                  for (std::size_t j = 0; j < c; ++j) {
                    gl[i * c + j] += g[i] * (probs[i * c + j] - (j == labels[i] ? 1.0 : 0.0));
                  }
                }
              });
}

Var Tape::focal(Var losses, double gamma) {
  const auto& lv = value(losses);
  Tensor out(lv.shape());
  Tensor deriv(lv.shape());
  for (std::size_t i = 0; i < lv.size(); ++i) {
    const double l = lv[i];
    if (l < 0.0) throw ContractError("focal: negative loss");
    const double q = -std::expm1(-l);  // 1 - p_t
    const double w = std::pow(q, gamma);
    out[i] = w * l;
    if (l == 0.0) {
      deriv[i] = gamma == 0.0 ? 1.0 : 0.0;
    } else {
      deriv[i] = w + l * gamma * std::pow(q, gamma - 1.0) * std::exp(-l);
    }
  }
  return push(std::move(out), needs(losses),
              [losses, deriv = std::move(deriv)](Tape& t, std::size_t self) {
                const Tensor& g = t.nodes_[self].grad;
                Tensor& gl = t.grad_buffer(losses.id);
                for (std::size_t i = 0; i < g.size(); ++i) gl[i] += g[i] * deriv[i];
              });
}

namespace {

struct SinkhornTrace {
  std::size_t n = 0;
  // us[t] for t = 0..T (us[0] = ones); vs, as, bs for t = 1..T at index t-1.
  std::vector<std::vector<double>> us, vs, as, bs;
};

}  // namespace

Var Tape::sinkhorn_plan(Var kernel, std::size_t iterations) {
  const auto& kv = value(kernel);
  if (kv.rank() != 2 || kv.dim(0) != kv.dim(1)) {
    throw DimensionError("sinkhorn_plan expects a square kernel, got " + shape_str(kv.shape()));
  }
  if (iterations == 0) throw ConfigError("sinkhorn_plan: iteration budget must be positive");
  const std::size_t n = kv.dim(0);
  const double r = 1.0 / static_cast<double>(n);
  const double* K = kv.data().data();
  auto tr = std::make_shared<SinkhornTrace>();
  tr->n = n;
  tr->us.push_back(std::vector<double>(n, 1.0));
  for (std::size_t it = 0; it < iterations; ++it) {
    const auto& u = tr->us.back();
    std::vector<double> a(n, 0.0), v(n), b(n, 0.0), un(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) a[j] += K[i * n + j] * u[i];
    for (std::size_t j = 0; j < n; ++j) {
      if (!(a[j] > 0.0) || !std::isfinite(a[j])) {
        throw NumericalRegimeError("sinkhorn_plan: column scaling degenerated at iteration " +
                                   std::to_string(it + 1) + "; increase epsilon");
      }
      v[j] = r / a[j];
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) b[i] += K[i * n + j] * v[j];
    for (std::size_t i = 0; i < n; ++i) {
      if (!(b[i] > 0.0) || !std::isfinite(b[i])) {
        throw NumericalRegimeError("sinkhorn_plan: row scaling degenerated at iteration " +
                                   std::to_string(it + 1) + "; increase epsilon");
      }
      un[i] = r / b[i];
    }
    tr->as.push_back(std::move(a));
    tr->vs.push_back(std::move(v));
    tr->bs.push_back(std::move(b));
    tr->us.push_back(std::move(un));
  }
  Tensor plan({n, n});
  const auto& u = tr->us.back();
  const auto& v = tr->vs.back();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) plan[i * n + j] = u[i] * K[i * n + j] * v[j];
  return push(std::move(plan), needs(kernel), [kernel, tr](Tape& t, std::size_t self) {
    const std::size_t n = tr->n;
    const double* G = t.nodes_[self].grad.data().data();
    const double* K = t.nodes_[kernel.id].value.data().data();
    double* gK = t.grad_buffer(kernel.id).data().data();
    const std::size_t T = tr->vs.size();
    std::vector<double> gu(n, 0.0), gv(n, 0.0), gb(n), ga(n);
    {
      const auto& u = tr->us[T];
      const auto& v = tr->vs[T - 1];
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = G[i * n + j];
          gK[i * n + j] += gij * u[i] * v[j];
          gu[i] += gij * K[i * n + j] * v[j];
          gv[j] += gij * u[i] * K[i * n + j];
        }
      }
    }
    for (std::size_t t1 = T; t1-- > 0;) {
      const auto& u_new = tr->us[t1 + 1];
      const auto& u_old = tr->us[t1];
      const auto& v = tr->vs[t1];
      const auto& a = tr->as[t1];
      const auto& b = tr->bs[t1];
      // u_new = r / b
      for (std::size_t i = 0; i < n; ++i) gb[i] = -gu[i] * u_new[i] / b[i];
      // b = K v
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          gK[i * n + j] += gb[i] * v[j];
          gv[j] += K[i * n + j] * gb[i];
        }
      }
      // v = r / a
      for (std::size_t j = 0; j < n; ++j) ga[j] = -gv[j] * v[j] / a[j];
      // a = K^T u_old
      std::fill(gu.begin(), gu.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          gK[i * n + j] += u_old[i] * ga[j];
          gu[i] += K[i * n + j] * ga[j];
        }
      }
      std::fill(gv.begin(), gv.end(), 0.0);
    }
  });
}

Var Tape::xlogx_sum(Var p) {
  const auto& pv = value(p);
  double s = 0.0;
  for (double x : pv.data()) {
    if (x < 0.0) throw ContractError("xlogx_sum: negative entry");
    if (x > 0.0) s += x * std::log(x);
  }
  return push(Tensor::scalar(s), needs(p), [p](Tape& t, std::size_t self) {
    const double g = t.nodes_[self].grad[0];
    const Tensor& pv = t.nodes_[p.id].value;
    Tensor& gp = t.grad_buffer(p.id);
    for (std::size_t i = 0; i < pv.size(); ++i) {
      if (pv[i] > 0.0) gp[i] += g * (std::log(pv[i]) + 1.0);
    }
  });
}

}  // namespace otface
