#include "diffris/autodiff.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>

#include "diffris/errors.hpp"

namespace diffris::ad {

namespace debug {

namespace {
std::string g_fault_op;
double g_fault_factor = 1.0;
}  // namespace

void inject_gradient_fault(std::string op, double factor) {
  g_fault_op = std::move(op);
  g_fault_factor = factor;
}

double fault_factor(std::string_view op) { return !g_fault_op.empty() && op == g_fault_op ? g_fault_factor : 1.0; }

}  // namespace debug

namespace {

const Matrix kEmpty;

void require_same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw UsageError("autodiff: operands live on different tapes");
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

void require_scalar(const Matrix& s, const char* op) {
  if (s.rows() != 1 || s.cols() != 1) throw ShapeError(std::string(op) + ": expected a 1x1 node");
}

// Interpolation taps for one axis of a half-pixel-center bilinear resize.
struct Taps {
  int lo;
  int hi;
  double w_hi;
};

std::vector<Taps> bilinear_taps(int in, int factor) {
  std::vector<Taps> taps(static_cast<std::size_t>(in) * factor);
  for (int o = 0; o < in * factor; ++o) {
    double src = (o + 0.5) / factor - 0.5;
    if (src < 0.0) src = 0.0;
    int lo = std::min(static_cast<int>(src), in - 1);
    int hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, src - lo};
  }
  return taps;
}

}  // namespace

// ---- Var / Tape ------------------------------------------------------------

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Matrix value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant_ref(const Matrix& value) {
  Node n;
  n.ref = &value;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::variable(Matrix value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(const Matrix& value, Matrix* grad_sink) {
  Node n;
  n.ref = &value;
  n.requires_grad = grad_sink != nullptr;
  n.sink = grad_sink;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Matrix value, std::span<const int> inputs, BackwardFn backward) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](int id) { return nodes_[id].requires_grad; });
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Tape::value(int id) const { return node_value(nodes_[id]); }

const Matrix& Tape::grad(int id) const {
  const Node& n = nodes_[id];
  return n.grad.size() == 0 ? kEmpty : n.grad;
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw UsageError("backward: root belongs to another tape");
  require_scalar(value(root.id()), "backward");
  Node& r = nodes_[root.id()];
  if (!r.requires_grad) return;
  r.grad = Matrix::Ones(1, 1);
  for (int id = root.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, id);
  }
  for (Node& n : nodes_) {
    if (n.sink == nullptr || n.grad.size() == 0) continue;
    if (n.sink->size() == 0) {
      *n.sink = n.grad;
    } else {
      *n.sink += n.grad;
    }
  }
}

// ---- linear algebra --------------------------------------------------------

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                     std::to_string(b.rows()) + " differ");
  }
  const int ids[] = {a.id(), b.id()};
  Matrix out = a.value() * b.value();
  return a.tape()->record(std::move(out), ids, [ia = a.id(), ib = b.id()](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const double k = debug::fault_factor("matmul");
    if (t.requires_grad(ia)) t.accumulate(ia, k * g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, k * t.value(ia).transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  require_same_tape(a, b);
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: column counts differ");
  const int ids[] = {a.id(), b.id()};
  Matrix out = a.value() * b.value().transpose();
  return a.tape()->record(std::move(out), ids, [ia = a.id(), ib = b.id()](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  });
}

Var transpose(Var a) {
  const int ids[] = {a.id()};
  Matrix out = a.value().transpose();
  return a.tape()->record(std::move(out), ids, [ia = a.id()](Tape& t, int self) {
    t.accumulate(ia, t.grad(self).transpose());
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  const int ids[] = {a.id(), b.id()};
  Matrix out = a.value() + b.value();
  return a.tape()->record(std::move(out), ids, [ia = a.id(), ib = b.id()](Tape& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  const int ids[] = {a.id(), b.id()};
  Matrix out = a.value() - b.value();
  return a.tape()->record(std::move(out), ids, [ia = a.id(), ib = b.id()](Tape& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, -t.grad(self));
  });
}

Var add_bias(Var a, Var bias) {
  require_same_tape(a, bias);
  if (bias.rows() != 1 || bias.cols() != a.cols()) throw ShapeError("add_bias: bias must be 1 x cols");
  const int ids[] = {a.id(), bias.id()};
  Matrix out = a.value().rowwise() + bias.value().row(0);
  return a.tape()->record(std::move(out), ids, [ia = a.id(), ib = bias.id()](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
  });
}

Var scale(Var a, double s) {
  const int ids[] = {a.id()};
  Matrix out = a.value() * s;
  return a.tape()->record(std::move(out), ids, [ia = a.id(), s](Tape& t, int self) {
    t.accumulate(ia, t.grad(self) * s);
  });
}

Var scale_by(Var a, Var s) {
  require_same_tape(a, s);
  require_scalar(s.value(), "scale_by");
  const int ids[] = {a.id(), s.id()};
  Matrix out = a.value() * s.value()(0, 0);
  return a.tape()->record(std::move(out), ids, [ia = a.id(), is = s.id()](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const double sv = t.value(is)(0, 0);
    t.accumulate(ia, g * sv);
    if (t.requires_grad(is)) {
      Matrix d(1, 1);
      d(0, 0) = g.cwiseProduct(t.value(ia)).sum();
      t.accumulate(is, d);
    }
  });
}

Var div_by(Var a, Var s) {
  require_same_tape(a, s);
  require_scalar(s.value(), "div_by");
  const int ids[] = {a.id(), s.id()};
  Matrix out = a.value() / s.value()(0, 0);
  return a.tape()->record(std::move(out), ids, [ia = a.id(), is = s.id()](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const double sv = t.value(is)(0, 0);
    t.accumulate(ia, g / sv);
    if (t.requires_grad(is)) {
      Matrix d(1, 1);
      d(0, 0) = -g.cwiseProduct(t.value(ia)).sum() / (sv * sv);
      t.accumulate(is, d);
    }
  });
}

Var hadamard(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "hadamard");
  const int ids[] = {a.id(), b.id()};
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape()->record(std::move(out), ids, [ia = a.id(), ib = b.id()](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

Var gate(Var h, Var l, Var alpha) {
  require_same_tape(h, l);
  require_same_tape(h, alpha);
  require_same_shape(h.value(), l.value(), "gate");
  require_scalar(alpha.value(), "gate");
  const double a = alpha.value()(0, 0);
  const int ids[] = {h.id(), l.id(), alpha.id()};
  Matrix out = a * h.value() + (1.0 - a) * l.value();
  return h.tape()->record(std::move(out), ids,
                          [ih = h.id(), il = l.id(), ia = alpha.id()](Tape& t, int self) {
                            const Matrix& g = t.grad(self);
                            const double av = t.value(ia)(0, 0);
                            t.accumulate(ih, g * av);
                            t.accumulate(il, g * (1.0 - av));
                            if (t.requires_grad(ia)) {
                              Matrix d(1, 1);
                              d(0, 0) = g.cwiseProduct(t.value(ih) - t.value(il)).sum();
                              t.accumulate(ia, d);
                            }
                          });
}

// ---- elementwise -----------------------------------------------------------

Var relu(Var a) {
  const int ids[] = {a.id()};
  Matrix out = a.value().cwiseMax(0.0);
  return a.tape()->record(std::move(out), ids, [ia = a.id()](Tape& t, int self) {
    const Matrix& x = t.value(ia);
    t.accumulate(ia, t.grad(self).cwiseProduct((x.array() > 0.0).cast<double>().matrix()));
  });
}

Var tanh(Var a) {
  const int ids[] = {a.id()};
  Matrix out = a.value().array().tanh().matrix();
  return a.tape()->record(std::move(out), ids, [ia = a.id()](Tape& t, int self) {
    const Matrix& y = t.value(self);
    t.accumulate(ia, t.grad(self).cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

Var exp(Var a) {
  const int ids[] = {a.id()};
  Matrix out = a.value().array().exp().matrix();
  return a.tape()->record(std::move(out), ids, [ia = a.id()](Tape& t, int self) {
    t.accumulate(ia, t.grad(self).cwiseProduct(t.value(self)));
  });
}

// ---- normalization ---------------------------------------------------------

Var softmax_rows(Var a, const Mask* col_mask) {
  const Matrix& x = a.value();
  if (col_mask != nullptr && static_cast<Eigen::Index>(col_mask->size()) != x.cols()) {
    throw ShapeError("softmax_rows: mask length differs from column count");
  }
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (col_mask && !(*col_mask)[c]) continue;
      mx = std::max(mx, x(r, c));
    }
    if (mx == -std::numeric_limits<double>::infinity()) continue;
    double total = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (col_mask && !(*col_mask)[c]) continue;
      out(r, c) = std::exp(x(r, c) - mx);
      total += out(r, c);
    }
    out.row(r) /= total;
  }
  const int ids[] = {a.id()};
  return a.tape()->record(std::move(out), ids, [ia = a.id()](Tape& t, int self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    Matrix d = y.cwiseProduct(g - dot.replicate(1, g.cols()));
    t.accumulate(ia, d * debug::fault_factor("softmax_rows"));
  });
}

Var layer_norm_rows(Var a, Var gamma, Var beta, double eps) {
  require_same_tape(a, gamma);
  require_same_tape(a, beta);
  const Matrix& x = a.value();
  const Eigen::Index n = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n) {
    throw ShapeError("layer_norm_rows: gain/bias must be 1 x cols");
  }
  Eigen::VectorXd mean = x.rowwise().mean();
  Matrix centered = x.colwise() - mean;
  Eigen::VectorXd inv_std =
      ((centered.array().square().rowwise().sum() / static_cast<double>(n)) + eps).rsqrt().matrix();
  Matrix xhat = centered.array().colwise() * inv_std.array();
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
               beta.value().row(0).array();
  const int ids[] = {a.id(), gamma.id(), beta.id()};
  return a.tape()->record(
      std::move(out), ids,
      [ia = a.id(), ig = gamma.id(), ib = beta.id(), xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        if (t.requires_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
        if (t.requires_grad(ia)) {
          Matrix dxhat = g.array().rowwise() * t.value(ig).row(0).array();
          Eigen::VectorXd m1 = dxhat.rowwise().mean();
          Eigen::VectorXd m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
          Matrix dx = (dxhat.colwise() - m1) - (xhat.array().colwise() * m2.array()).matrix();
          dx = dx.array().colwise() * inv_std.array();
          t.accumulate(ia, dx * debug::fault_factor("layer_norm_rows"));
        }
      });
}

Var l2_normalize_rows(Var a, double eps) {
  const Matrix& x = a.value();
  Eigen::VectorXd norms = x.rowwise().norm();
  Eigen::VectorXd denom = norms.array() + eps;
  Matrix out = x.array().colwise() / denom.array();
  const int ids[] = {a.id()};
  return a.tape()->record(std::move(out), ids,
                          [ia = a.id(), norms = std::move(norms),
                           denom = std::move(denom)](Tape& t, int self) {
                            const Matrix& g = t.grad(self);
                            const Matrix& x = t.value(ia);
                            Matrix d(g.rows(), g.cols());
                            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                              d.row(r) = g.row(r) / denom(r);
                              if (norms(r) > 0.0) {
                                const double xg = x.row(r).dot(g.row(r));
                                d.row(r) -= x.row(r) * (xg / (denom(r) * denom(r) * norms(r)));
                              }
                            }
                            t.accumulate(ia, d * debug::fault_factor("l2_normalize_rows"));
                          });
}

// ---- structure -------------------------------------------------------------

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
  Matrix out = a.value().middleCols(start, count);
  const int ids[] = {a.id()};
  return a.tape()->record(std::move(out), ids, [ia = a.id(), start, count](Tape& t, int self) {
    const Matrix& x = t.value(ia);
    Matrix d = Matrix::Zero(x.rows(), x.cols());
    d.middleCols(start, count) = t.grad(self);
    t.accumulate(ia, d);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p);
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  Matrix out(rows, cols);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return parts[0].tape()->record(std::move(out), ids,
                                 [ids, widths](Tape& t, int self) {
                                   const Matrix& g = t.grad(self);
                                   Eigen::Index o = 0;
                                   for (std::size_t i = 0; i < ids.size(); ++i) {
                                     if (t.requires_grad(ids[i])) {
                                       t.accumulate(ids[i], g.middleCols(o, widths[i]));
                                     }
                                     o += widths[i];
                                   }
                                 });
}

Var mask_rows(Var a, const Mask& row_mask) {
  if (static_cast<Eigen::Index>(row_mask.size()) != a.rows()) {
    throw ShapeError("mask_rows: mask length differs from row count");
  }
  Matrix out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    if (!row_mask[r]) out.row(r).setZero();
  }
  const int ids[] = {a.id()};
  return a.tape()->record(std::move(out), ids, [ia = a.id(), row_mask](Tape& t, int self) {
    Matrix d = t.grad(self);
    for (Eigen::Index r = 0; r < d.rows(); ++r) {
      if (!row_mask[r]) d.row(r).setZero();
    }
    t.accumulate(ia, d);
  });
}

Var straight_through(Matrix hard, Var soft) {
  require_same_shape(hard, soft.value(), "straight_through");
  const int ids[] = {soft.id()};
  return soft.tape()->record(std::move(hard), ids, [is = soft.id()](Tape& t, int self) {
    t.accumulate(is, t.grad(self));
  });
}

// ---- spatial ---------------------------------------------------------------

Var im2col(Var x, int height, int width, int kernel, int stride, int pad) {
  const Matrix& in = x.value();
  const Eigen::Index channels = in.cols();
  if (in.rows() != static_cast<Eigen::Index>(height) * width) {
    throw ShapeError("im2col: row count differs from height * width");
  }
  if (kernel < 1 || stride < 1 || pad < 0) throw ParameterError("im2col: invalid geometry");
  const int out_h = (height + 2 * pad - kernel) / stride + 1;
  const int out_w = (width + 2 * pad - kernel) / stride + 1;
  if (out_h < 1 || out_w < 1) throw ShapeError("im2col: kernel larger than padded input");

  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(out_h) * out_w, kernel * kernel * channels);
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const Eigen::Index row = static_cast<Eigen::Index>(oy) * out_w + ox;
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= width) continue;
          out.row(row).segment((ky * kernel + kx) * channels, channels) =
              in.row(static_cast<Eigen::Index>(iy) * width + ix);
        }
      }
    }
  }
  const int ids[] = {x.id()};
  return x.tape()->record(
      std::move(out), ids,
      [ix_id = x.id(), height, width, kernel, stride, pad, out_h, out_w, channels](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        Matrix d = Matrix::Zero(static_cast<Eigen::Index>(height) * width, channels);
        for (int oy = 0; oy < out_h; ++oy) {
          for (int ox = 0; ox < out_w; ++ox) {
            const Eigen::Index row = static_cast<Eigen::Index>(oy) * out_w + ox;
            for (int ky = 0; ky < kernel; ++ky) {
              const int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= height) continue;
              for (int kx = 0; kx < kernel; ++kx) {
                const int ixx = ox * stride + kx - pad;
                if (ixx < 0 || ixx >= width) continue;
                d.row(static_cast<Eigen::Index>(iy) * width + ixx) +=
                    g.row(row).segment((ky * kernel + kx) * channels, channels);
              }
            }
          }
        }
        t.accumulate(ix_id, d);
      });
}

Var upsample_nearest2(Var x, int height, int width) {
  const Matrix& in = x.value();
  if (in.rows() != static_cast<Eigen::Index>(height) * width) {
    throw ShapeError("upsample_nearest2: row count differs from height * width");
  }
  const int out_w = 2 * width;
  Matrix out(static_cast<Eigen::Index>(4) * height * width, in.cols());
  for (int y = 0; y < 2 * height; ++y) {
    for (int xx = 0; xx < out_w; ++xx) {
      out.row(static_cast<Eigen::Index>(y) * out_w + xx) =
          in.row(static_cast<Eigen::Index>(y / 2) * width + xx / 2);
    }
  }
  const int ids[] = {x.id()};
  return x.tape()->record(std::move(out), ids, [ix = x.id(), height, width](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const int out_w = 2 * width;
    Matrix d = Matrix::Zero(static_cast<Eigen::Index>(height) * width, g.cols());
    for (int y = 0; y < 2 * height; ++y) {
      for (int xx = 0; xx < out_w; ++xx) {
        d.row(static_cast<Eigen::Index>(y / 2) * width + xx / 2) +=
            g.row(static_cast<Eigen::Index>(y) * out_w + xx);
      }
    }
    t.accumulate(ix, d);
  });
}

namespace {

// Row r of the coarse map and column group k = 2 * dy + dx map to fine row
// (2y + dy) * 2w + (2x + dx). Both shuffles are this permutation.
template <typename F>
void for_each_subpixel(int height, int width, F&& f) {
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      for (int k = 0; k < 4; ++k) {
        const Eigen::Index coarse = static_cast<Eigen::Index>(y) * width + x;
        const Eigen::Index fine = static_cast<Eigen::Index>(2 * y + k / 2) * (2 * width) + 2 * x + k % 2;
        f(coarse, k, fine);
      }
    }
  }
}

}  // namespace

Var depth_to_space2(Var x, int height, int width) {
  const Matrix& in = x.value();
  if (in.rows() != static_cast<Eigen::Index>(height) * width) {
    throw ShapeError("depth_to_space2: row count differs from height * width");
  }
  if (in.cols() % 4 != 0) throw ShapeError("depth_to_space2: channel count not divisible by 4");
  const Eigen::Index c = in.cols() / 4;
  Matrix out(4 * in.rows(), c);
  for_each_subpixel(height, width, [&](Eigen::Index coarse, int k, Eigen::Index fine) {
    out.row(fine) = in.row(coarse).segment(k * c, c);
  });
  const int ids[] = {x.id()};
  return x.tape()->record(std::move(out), ids, [ix = x.id(), height, width, c](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    Matrix d(static_cast<Eigen::Index>(height) * width, 4 * c);
    for_each_subpixel(height, width, [&](Eigen::Index coarse, int k, Eigen::Index fine) {
      d.row(coarse).segment(k * c, c) = g.row(fine);
    });
    t.accumulate(ix, d);
  });
}

Var space_to_depth2(Var x, int height, int width) {
  const Matrix& in = x.value();
  if (in.rows() != static_cast<Eigen::Index>(height) * width) {
    throw ShapeError("space_to_depth2: row count differs from height * width");
  }
  if (height % 2 != 0 || width % 2 != 0) throw ShapeError("space_to_depth2: odd spatial size");
  const int h = height / 2;
  const int w = width / 2;
  const Eigen::Index c = in.cols();
  Matrix out(static_cast<Eigen::Index>(h) * w, 4 * c);
  for_each_subpixel(h, w, [&](Eigen::Index coarse, int k, Eigen::Index fine) {
    out.row(coarse).segment(k * c, c) = in.row(fine);
  });
  const int ids[] = {x.id()};
  return x.tape()->record(std::move(out), ids, [ix = x.id(), h, w, c](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    Matrix d(static_cast<Eigen::Index>(4) * h * w, c);
    for_each_subpixel(h, w, [&](Eigen::Index coarse, int k, Eigen::Index fine) {
      d.row(fine) = g.row(coarse).segment(k * c, c);
    });
    t.accumulate(ix, d);
  });
}

Var upsample_bilinear(Var x, int height, int width, int factor) {
  const Matrix& in = x.value();
  if (in.rows() != static_cast<Eigen::Index>(height) * width) {
    throw ShapeError("upsample_bilinear: row count differs from height * width");
  }
  if (factor < 1) throw ParameterError("upsample_bilinear: factor must be positive");
  auto ty = bilinear_taps(height, factor);
  auto tx = bilinear_taps(width, factor);
  const int out_h = height * factor;
  const int out_w = width * factor;
  auto at = [width](int y, int xx) { return static_cast<Eigen::Index>(y) * width + xx; };

  Matrix out(static_cast<Eigen::Index>(out_h) * out_w, in.cols());
  for (int y = 0; y < out_h; ++y) {
    const Taps& a = ty[y];
    for (int xx = 0; xx < out_w; ++xx) {
      const Taps& b = tx[xx];
      out.row(static_cast<Eigen::Index>(y) * out_w + xx) =
          (1 - a.w_hi) * ((1 - b.w_hi) * in.row(at(a.lo, b.lo)) + b.w_hi * in.row(at(a.lo, b.hi))) +
          a.w_hi * ((1 - b.w_hi) * in.row(at(a.hi, b.lo)) + b.w_hi * in.row(at(a.hi, b.hi)));
    }
  }
  const int ids[] = {x.id()};
  return x.tape()->record(
      std::move(out), ids,
      [ix = x.id(), height, width, out_h, out_w, ty = std::move(ty), tx = std::move(tx), at](
          Tape& t, int self) {
        const Matrix& g = t.grad(self);
        Matrix d = Matrix::Zero(static_cast<Eigen::Index>(height) * width, g.cols());
        for (int y = 0; y < out_h; ++y) {
          const Taps& a = ty[y];
          for (int xx = 0; xx < out_w; ++xx) {
            const Taps& b = tx[xx];
            auto gr = g.row(static_cast<Eigen::Index>(y) * out_w + xx);
            d.row(at(a.lo, b.lo)) += (1 - a.w_hi) * (1 - b.w_hi) * gr;
            d.row(at(a.lo, b.hi)) += (1 - a.w_hi) * b.w_hi * gr;
            d.row(at(a.hi, b.lo)) += a.w_hi * (1 - b.w_hi) * gr;
            d.row(at(a.hi, b.hi)) += a.w_hi * b.w_hi * gr;
          }
        }
        t.accumulate(ix, d);
      });
}

// ---- reductions ------------------------------------------------------------

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const int ids[] = {a.id()};
  return a.tape()->record(std::move(out), ids, [ia = a.id()](Tape& t, int self) {
    const Matrix& x = t.value(ia);
    t.accumulate(ia, Matrix::Constant(x.rows(), x.cols(), t.grad(self)(0, 0)));
  });
}

Var weighted_sum(Var a, const Matrix& weights) {
  require_same_shape(a.value(), weights, "weighted_sum");
  Matrix out(1, 1);
  out(0, 0) = a.value().cwiseProduct(weights).sum();
  const int ids[] = {a.id()};
  return a.tape()->record(std::move(out), ids, [ia = a.id(), weights](Tape& t, int self) {
    t.accumulate(ia, weights * t.grad(self)(0, 0));
  });
}

}  // namespace ad
