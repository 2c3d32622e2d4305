#include <doctest.h>

#include "diffris/autodiff.hpp"
#include "diffris/errors.hpp"
#include "support.hpp"

using namespace diffris;
using test::gradient_error;

namespace {

// Contracts any matrix output to a scalar with fixed random weights so every
// entry of the gradient is exercised.
ad::Var contract(ad::Var y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ad::weighted_sum(y, rng.normal_matrix(y.rows(), y.cols(), 1.0));
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(1);
  const Matrix x = rng.normal_matrix(4, 5, 1.0);
  CHECK(gradient_error(x, [](ad::Tape&, ad::Var v) { return contract(ad::tanh(v)); }) < 1e-7);
  CHECK(gradient_error(x, [](ad::Tape&, ad::Var v) { return contract(ad::exp(v)); }) < 1e-7);
  CHECK(gradient_error(x, [](ad::Tape&, ad::Var v) { return contract(ad::relu(v)); }) < 1e-7);
}

TEST_CASE("tanh forward matches std::tanh") {
  ad::Tape tape;
  Matrix x(1, 3);
  x << -2.0, 0.0, 0.5;
  ad::Var y = ad::tanh(tape.constant(x));
  for (int j = 0; j < 3; ++j) CHECK(y.value()(0, j) == doctest::Approx(std::tanh(x(0, j))).epsilon(1e-15));
}

TEST_CASE("matrix products and normalizers match finite differences") {
  Rng rng(2);
  const Matrix a = rng.normal_matrix(3, 4, 1.0);
  const Matrix b = rng.normal_matrix(4, 2, 1.0);
  CHECK(gradient_error(a, [&](ad::Tape& t, ad::Var v) { return contract(ad::matmul(v, t.constant(b))); }) < 1e-7);
  CHECK(gradient_error(b, [&](ad::Tape& t, ad::Var v) { return contract(ad::matmul(t.constant(a), v)); }) < 1e-7);
  CHECK(gradient_error(a, [](ad::Tape&, ad::Var v) { return contract(ad::softmax_rows(v)); }) < 1e-7);
  CHECK(gradient_error(a, [](ad::Tape&, ad::Var v) { return contract(ad::l2_normalize_rows(v)); }) < 1e-7);
  CHECK(gradient_error(a, [](ad::Tape& t, ad::Var v) {
          Rng r(5);
          return contract(ad::layer_norm_rows(v, t.constant(r.normal_matrix(1, 4, 1.0)),
                                              t.constant(r.normal_matrix(1, 4, 1.0))));
        }) < 1e-6);
}

TEST_CASE("masked softmax gives padded columns exactly zero") {
  ad::Tape tape;
  Rng rng(3);
  const Mask mask{1, 0, 1, 0};
  ad::Var s = ad::softmax_rows(tape.constant(rng.normal_matrix(3, 4, 3.0)), &mask);
  for (int r = 0; r < 3; ++r) {
    CHECK(s.value()(r, 1) == 0.0);
    CHECK(s.value()(r, 3) == 0.0);
    CHECK(s.value().row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
  const Mask none{0, 0, 0, 0};
  ad::Var z = ad::softmax_rows(tape.constant(Matrix::Ones(2, 4)), &none);
  CHECK(z.value().isZero(0.0));
}

TEST_CASE("depth_to_space2 and space_to_depth2 are inverse pixel shuffles") {
  Rng rng(4);
  const int h = 3;
  const int w = 2;
  const int c = 5;
  const Matrix coarse = rng.normal_matrix(h * w, 4 * c, 1.0);
  ad::Tape tape;
  ad::Var fine = ad::depth_to_space2(tape.constant(coarse), h, w);
  REQUIRE(fine.rows() == 4 * h * w);
  REQUIRE(fine.cols() == c);
  // Channel group 2 * dy + dx holds sub-pixel (dy, dx).
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int k = 0; k < 4; ++k) {
        const int fy = 2 * y + k / 2;
        const int fx = 2 * x + k % 2;
        for (int ch = 0; ch < c; ++ch) {
          CHECK(fine.value()(fy * 2 * w + fx, ch) == coarse(y * w + x, k * c + ch));
        }
      }
    }
  }
  ad::Var back = ad::space_to_depth2(fine, 2 * h, 2 * w);
  CHECK(back.value() == coarse);
}

TEST_CASE("pixel shuffles match finite differences") {
  Rng rng(5);
  const Matrix coarse = rng.normal_matrix(4, 8, 1.0);
  CHECK(gradient_error(coarse, [](ad::Tape&, ad::Var v) { return contract(ad::depth_to_space2(v, 2, 2)); }) < 1e-7);
  const Matrix fine = rng.normal_matrix(16, 3, 1.0);
  CHECK(gradient_error(fine, [](ad::Tape&, ad::Var v) { return contract(ad::space_to_depth2(v, 4, 4)); }) < 1e-7);
}

TEST_CASE("nearest upsampling repeats each pixel over a 2x2 block") {
  Rng rng(6);
  const Matrix x = rng.normal_matrix(6, 2, 1.0);  // 2 x 3 map
  ad::Tape tape;
  ad::Var up = ad::upsample_nearest2(tape.constant(x), 2, 3);
  REQUIRE(up.rows() == 24);
  for (int y = 0; y < 4; ++y) {
    for (int xx = 0; xx < 6; ++xx) CHECK(up.value().row(y * 6 + xx) == x.row((y / 2) * 3 + xx / 2));
  }
}

TEST_CASE("bilinear upsampling keeps constants and matches finite differences") {
  ad::Tape tape;
  ad::Var up = ad::upsample_bilinear(tape.constant(Matrix::Constant(4, 1, 2.5)), 2, 2, 4);
  REQUIRE(up.rows() == 64);
  CHECK((up.value().array() - 2.5).abs().maxCoeff() < 1e-14);
  Rng rng(7);
  const Matrix x = rng.normal_matrix(6, 2, 1.0);
  CHECK(gradient_error(x, [](ad::Tape&, ad::Var v) { return contract(ad::upsample_bilinear(v, 2, 3, 4)); }) < 1e-7);
}

TEST_CASE("im2col feeds a convolution whose gradient matches finite differences") {
  Rng rng(8);
  const Matrix x = rng.normal_matrix(16, 2, 1.0);
  const Matrix w = rng.normal_matrix(18, 3, 1.0);
  CHECK(gradient_error(x, [&](ad::Tape& t, ad::Var v) {
          return contract(ad::matmul(ad::im2col(v, 4, 4, 3, 1, 1), t.constant(w)));
        }) < 1e-7);
}

TEST_CASE("straight_through keeps the hard value and the soft gradient") {
  ad::Tape tape;
  Matrix soft_value(1, 2);
  soft_value << 0.3, 0.7;
  Matrix hard(1, 2);
  hard << 0.0, 1.0;
  ad::Var soft = tape.variable(soft_value);
  ad::Var st = ad::straight_through(hard, soft);
  CHECK(st.value() == hard);
  Matrix w(1, 2);
  w << 2.0, -3.0;
  tape.backward(ad::weighted_sum(st, w));
  CHECK(soft.grad() == w);
}

TEST_CASE("parameter gradients land in their sinks") {
  Matrix value = Matrix::Ones(2, 2);
  Matrix sink = Matrix::Zero(2, 2);
  {
    ad::Tape tape;
    ad::Var p = tape.parameter(value, &sink);
    tape.backward(ad::sum(ad::scale(p, 3.0)));
  }
  CHECK((sink.array() == 3.0).all());
  {
    ad::Tape tape;
    ad::Var c = tape.parameter(value, nullptr);
    CHECK_FALSE(c.requires_grad());
  }
}

TEST_CASE("injected gradient faults are detected and cleared") {
  Rng rng(9);
  const Matrix a = rng.normal_matrix(3, 3, 1.0);
  auto f = [](ad::Tape&, ad::Var v) { return contract(ad::matmul(v, v)); };
  ad::debug::inject_gradient_fault("matmul");
  const double faulty = gradient_error(a, f);
  ad::debug::inject_gradient_fault("");
  CHECK(faulty > 0.1);
  CHECK(gradient_error(a, f) < 1e-7);
}

TEST_CASE("shape mismatches throw") {
  ad::Tape tape;
  ad::Var a = tape.constant(Matrix::Ones(2, 3));
  ad::Var b = tape.constant(Matrix::Ones(2, 3));
  CHECK_THROWS_AS(ad::matmul(a, b), ShapeError);
  CHECK_THROWS_AS(ad::add(a, tape.constant(Matrix::Ones(3, 2))), ShapeError);
}
