#pragma once

// Independent reference computations and generators for the test suites.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "ccf/ccf.hpp"

namespace oracle {

using ccf::Matrix;
using ccf::Vector;

inline Matrix random_matrix(std::size_t r, std::size_t c, ccf::SeededRng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data()) v = scale * rng.normal();
  return m;
}

inline Vector random_vector(std::size_t n, ccf::SeededRng& rng, double scale = 1.0) {
  Vector v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

inline ccf::MlpParams random_mlp(std::size_t in, std::size_t hidden, std::size_t out, ccf::SeededRng& rng) {
  ccf::MlpParams p{random_matrix(hidden, in, rng), random_vector(hidden, rng, 0.5), random_matrix(out, hidden, rng),
                   random_vector(out, rng, 0.5)};
  return p;
}

inline ccf::ConceptBank random_bank(std::size_t n, std::size_t dim, ccf::SeededRng& rng) {
  std::vector<std::string> names;
  Matrix dirs(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    names.push_back("c" + std::to_string(i));
    const Vector u = ccf::l2_normalize(random_vector(dim, rng));
    std::ranges::copy(u, dirs.row(i).begin());
  }
  return ccf::ConceptBank(names, dirs);
}

inline ccf::ClassifierHead random_head(std::size_t classes, std::size_t dim, ccf::SeededRng& rng) {
  std::vector<std::string> names = {ccf::kNoFinding};
  for (std::size_t c = 1; c < classes; ++c) names.push_back("P" + std::to_string(c));
  return ccf::ClassifierHead(random_matrix(classes, dim, rng), random_vector(classes, rng), names);
}

// Central difference of a scalar function at x, one coordinate at a time.
inline Vector fd_gradient(const std::function<double(const Vector&)>& f, Vector x, double h = 1e-6) {
  Vector g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// |a - b| relative to the larger magnitude, floored so that entries that are
// both essentially zero compare on an absolute scale.
inline double rel_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Straight-line evaluation of a one-hidden-layer ReLU MLP.
inline Vector mlp_reference(const ccf::MlpParams& p, const Vector& x) {
  Vector h(p.w1.rows());
  for (std::size_t i = 0; i < h.size(); ++i) {
    double s = p.b1[i];
    for (std::size_t j = 0; j < x.size(); ++j) s += p.w1(i, j) * x[j];
    h[i] = s > 0.0 ? s : 0.0;
  }
  Vector y(p.w2.rows());
  for (std::size_t i = 0; i < y.size(); ++i) {
    double s = p.b2[i];
    for (std::size_t j = 0; j < h.size(); ++j) s += p.w2(i, j) * h[j];
    y[i] = s;
  }
  return y;
}

// Cross entropy of softmax(logits) against `target`, computed naively in
// long double.
inline double cross_entropy(const Vector& logits, std::size_t target) {
  long double z = 0.0L;
  for (double l : logits) z += std::exp(static_cast<long double>(l));
  return static_cast<double>(std::log(z) - logits[target]);
}

// Gaussian elimination with partial pivoting.
inline Vector solve(std::vector<std::vector<long double>> a, std::vector<long double> b) {
  const std::size_t n = b.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    std::swap(b[c], b[piv]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const long double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
      b[r] -= f * b[c];
    }
  }
  Vector x(n);
  for (std::size_t i = n; i-- > 0;) {
    long double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a[i][k] * x[k];
    x[i] = static_cast<double>(s / a[i][i]);
  }
  return x;
}

// Mean squared residual of the best affine fit V ~ X B + 1 c^T, the
// closed-form floor for L_in on a dataset.
inline double least_squares_residual(const Matrix& x, const Matrix& v) {
  const std::size_t n = x.rows(), d = x.cols() + 1, k = v.cols();
  std::vector<std::vector<long double>> g(d, std::vector<long double>(d, 0.0L));
  auto xa = [&](std::size_t r, std::size_t c) -> long double { return c < x.cols() ? x(r, c) : 1.0L; };
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) g[i][j] += xa(r, i) * xa(r, j);
  Matrix coef(d, k);
  for (std::size_t col = 0; col < k; ++col) {
    std::vector<long double> rhs(d, 0.0L);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t i = 0; i < d; ++i) rhs[i] += xa(r, i) * v(r, col);
    const Vector sol = solve(g, rhs);
    for (std::size_t i = 0; i < d; ++i) coef(i, col) = sol[i];
  }
  long double total = 0.0L;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t col = 0; col < k; ++col) {
      long double pred = 0.0L;
      for (std::size_t i = 0; i < d; ++i) pred += xa(r, i) * coef(i, col);
      const long double e = pred - v(r, col);
      total += e * e;
    }
  return static_cast<double>(total / static_cast<long double>(n));
}

// Random orthogonal matrix (QR of a Gaussian matrix by Gram-Schmidt).
inline Matrix random_orthogonal(std::size_t n, ccf::SeededRng& rng) {
  Matrix q(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    Vector v = random_vector(n, rng);
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t j = 0; j < i; ++j) ccf::axpy(-ccf::dot(v, q.row(j)), q.row(j), v);
    std::ranges::copy(ccf::l2_normalize(v), q.row(i).begin());
  }
  return q;
}

// Noise-free linear world: f ~ N(0, I_d), v = A f with A orthogonal.
inline ccf::PairedEmbeddingDataset linear_world(std::size_t dim, std::size_t n, std::uint64_t seed,
                                                double noise = 0.0) {
  ccf::SeededRng rng(seed);
  const Matrix a = random_orthogonal(dim, rng);
  Matrix f = random_matrix(n, dim, rng);
  Matrix v(n, dim);
  for (std::size_t r = 0; r < n; ++r) {
    Vector y = ccf::matvec(a, f.row(r));
    for (double& e : y) e += noise * rng.normal();
    std::ranges::copy(y, v.row(r).begin());
  }
  return ccf::PairedEmbeddingDataset(std::move(f), std::move(v));
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("ccf_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::filesystem::path operator/(const std::string& s) const { return path / s; }
};

inline std::string slurp(const std::filesystem::path& p) { return ccf::read_text_file(p); }

// True iff both trees hold the same relative file names with equal bytes.
inline bool same_tree(const std::filesystem::path& a, const std::filesystem::path& b) {
  namespace fs = std::filesystem;
  auto files = [](const fs::path& root) {
    std::vector<fs::path> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
    std::ranges::sort(out);
    return out;
  };
  const auto fa = files(a), fb = files(b);
  if (fa != fb) return false;
  for (const auto& f : fa)
    if (slurp(a / f) != slurp(b / f)) return false;
  return true;
}

}  // namespace oracle
