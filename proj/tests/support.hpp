#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <string>

#include "diffris/autodiff.hpp"
#include "diffris/gradcheck.hpp"
#include "diffris/params.hpp"

namespace diffris::test {

inline Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev = 1.0) {
  return rng.normal_matrix(rows, cols, stddev);
}

// Builds a scalar from x on a fresh tape.
using ScalarFn = std::function<ad::Var(ad::Tape&, ad::Var)>;

// Central-difference gradient of f at x0.
inline Matrix numeric_gradient(const Matrix& x0, const ScalarFn& f, double h = 1e-5) {
  Matrix g(x0.rows(), x0.cols());
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    Matrix xp = x0;
    Matrix xm = x0;
    xp.data()[i] += h;
    xm.data()[i] -= h;
    ad::Tape tp;
    ad::Tape tm;
    const double fp = f(tp, tp.variable(xp)).value()(0, 0);
    const double fm = f(tm, tm.variable(xm)).value()(0, 0);
    g.data()[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline Matrix analytic_gradient(const Matrix& x0, const ScalarFn& f) {
  ad::Tape tape;
  ad::Var x = tape.variable(x0);
  tape.backward(f(tape, x));
  if (x.grad().size() == 0) return Matrix::Zero(x0.rows(), x0.cols());
  return x.grad();
}

inline double gradient_error(const Matrix& x0, const ScalarFn& f) {
  return gradcheck::relative_error(analytic_gradient(x0, f), numeric_gradient(x0, f));
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("diffris_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  [[nodiscard]] const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace diffris::test
