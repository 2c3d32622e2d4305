#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records every operation of one forward pass. Spatial tensors are
// stored flattened as (height * width) x channels, token matrices as
// tokens x channels. Everything is float64 so finite-difference checks are
// meaningful.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace diffris {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Per-row or per-column validity flags; nonzero means valid.
using Mask = std::vector<std::uint8_t>;

namespace ad {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid as long as its tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] const Matrix& grad() const;
  [[nodiscard]] bool requires_grad() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  [[nodiscard]] int id() const { return id_; }
  [[nodiscard]] Tape* tape() const { return tape_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  // Non-owning; `value` must outlive the tape.
  Var constant_ref(const Matrix& value);
  // Leaf whose gradient is kept on the tape and readable via Var::grad().
  Var variable(Matrix value);
  // Non-owning leaf. After backward() its gradient is added into *grad_sink.
  // A null sink makes it a constant.
  Var parameter(const Matrix& value, Matrix* grad_sink);

  // Adds an interior node. The node requires a gradient iff any input does.
  Var record(Matrix value, std::span<const int> inputs, BackwardFn backward);

  // Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to every leaf.
  void backward(Var root);

  [[nodiscard]] const Matrix& value(int id) const;
  [[nodiscard]] const Matrix& grad(int id) const;
  [[nodiscard]] bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& delta) {
    Node& node = nodes_[id];
    if (!node.requires_grad) return;
    if (node.grad.size() == 0) {
      node.grad = delta;
    } else {
      node.grad += delta;
    }
  }

 private:
  struct Node {
    Matrix owned;
    const Matrix* ref = nullptr;
    Matrix grad;
    bool requires_grad = false;
    Matrix* sink = nullptr;
    BackwardFn backward;
  };
  [[nodiscard]] const Matrix& node_value(const Node& n) const { return n.ref ? *n.ref : n.owned; }

  std::vector<Node> nodes_;
};

// ---- linear algebra --------------------------------------------------------

Var matmul(Var a, Var b);
// a * b^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
// Adds a 1 x C row to every row of a.
Var add_bias(Var a, Var bias);
Var scale(Var a, double s);
// Multiplies by / divides by a 1x1 node.
Var scale_by(Var a, Var s);
Var div_by(Var a, Var s);
Var hadamard(Var a, Var b);
// alpha * h + (1 - alpha) * l with a 1x1 alpha.
Var gate(Var h, Var l, Var alpha);

// ---- elementwise -----------------------------------------------------------

Var relu(Var a);
Var tanh(Var a);
Var exp(Var a);

// ---- normalization ---------------------------------------------------------

// Row-wise softmax. Columns with col_mask[j] == 0 get exactly zero weight; a
// row with no valid column is all zero.
Var softmax_rows(Var a, const Mask* col_mask = nullptr);
Var layer_norm_rows(Var a, Var gamma, Var beta, double eps = 1e-5);
// x / (||x|| + eps) per row.
Var l2_normalize_rows(Var a, double eps = 1e-8);

// ---- structure -------------------------------------------------------------

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var concat_cols(std::span<const Var> parts);
// Zeroes rows whose mask entry is 0.
Var mask_rows(Var a, const Mask& row_mask);
// Value equals `hard`; the gradient flows unchanged into `soft`.
Var straight_through(Matrix hard, Var soft);

// ---- spatial (inputs are (height*width) x channels) ------------------------

// Patch extraction for convolution. Output rows are output pixels, columns
// are (ky, kx, channel) in that order. Zero padding.
Var im2col(Var x, int height, int width, int kernel, int stride, int pad);
Var upsample_nearest2(Var x, int height, int width);
// Pixel shuffles between a coarse (h x w, 4C) map and a fine (2h x 2w, C)
// map; channel group 2 * dy + dx holds sub-pixel (dy, dx).
Var depth_to_space2(Var x, int height, int width);
Var space_to_depth2(Var x, int height, int width);  // height, width of the fine map
// Bilinear resize by an integer factor, half-pixel centers (align_corners=false).
Var upsample_bilinear(Var x, int height, int width, int factor);

// ---- reductions ------------------------------------------------------------

Var sum(Var a);
// sum(a .* weights) for a fixed weight matrix.
Var weighted_sum(Var a, const Matrix& weights);

namespace debug {

// Test hook for the gradient checker's negative control: scales the input
// gradient produced by the backward pass of `op` (one of "matmul",
// "softmax_rows", "layer_norm_rows", "l2_normalize_rows"). An empty name
// disables it. Not thread-safe.
void inject_gradient_fault(std::string op, double factor = 1.5);
double fault_factor(std::string_view op);

}  // namespace debug

}  // namespace ad
}  // namespace diffris
