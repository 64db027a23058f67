#pragma once

#include <array>
#include <cmath>
#include <span>
#include <string>

#include "ccf/matrix.hpp"
#include "ccf/rng.hpp"

namespace ccf {

// Two weight layers with ReLU between them and a linear output:
//   y = W2 relu(W1 x + b1) + b2
struct MlpParams {
  Matrix w1;  // hidden x in
  Vector b1;  // hidden
  Matrix w2;  // out x hidden
  Vector b2;  // out

  std::size_t input_dim() const noexcept { return w1.cols(); }
  std::size_t hidden_dim() const noexcept { return w1.rows(); }
  std::size_t output_dim() const noexcept { return w2.rows(); }

  static MlpParams zeros(std::size_t in, std::size_t hidden, std::size_t out) {
    return {Matrix(hidden, in), Vector(hidden, 0.0), Matrix(out, hidden), Vector(out, 0.0)};
  }

  // Glorot-uniform weights, zero biases.
  static MlpParams glorot(std::size_t in, std::size_t hidden, std::size_t out, SeededRng& rng) {
    MlpParams p = zeros(in, hidden, out);
    const double r1 = std::sqrt(6.0 / static_cast<double>(in + hidden));
    for (double& v : p.w1.data()) v = rng.uniform(-r1, r1);
    const double r2 = std::sqrt(6.0 / static_cast<double>(hidden + out));
    for (double& v : p.w2.data()) v = rng.uniform(-r2, r2);
    return p;
  }

  // Exact ReLU realisation of x -> m x + bias: relu(m x) - relu(-m x) == m x
  // elementwise, so the result is bit-identical to the affine map.
  static MlpParams from_affine(const Matrix& m, const Vector& bias) {
    const std::size_t out = m.rows(), in = m.cols();
    MlpParams p = zeros(in, 2 * out, out);
    for (std::size_t r = 0; r < out; ++r) {
      for (std::size_t c = 0; c < in; ++c) {
        p.w1(r, c) = m(r, c);
        p.w1(out + r, c) = -m(r, c);
      }
      p.w2(r, r) = 1.0;
      p.w2(r, out + r) = -1.0;
    }
    p.b2 = bias;
    return p;
  }

  void validate() const {
    require(b1.size() == w1.rows() && w2.cols() == w1.rows() && b2.size() == w2.rows(), ErrorKind::DimensionMismatch,
            "inconsistent MLP shapes: W1 " + std::to_string(w1.rows()) + "x" + std::to_string(w1.cols()) + ", b1 " +
                std::to_string(b1.size()) + ", W2 " + std::to_string(w2.rows()) + "x" + std::to_string(w2.cols()) +
                ", b2 " + std::to_string(b2.size()));
    require(all_finite(), ErrorKind::NonFiniteEntry, "MLP parameters contain non-finite values");
  }

  bool all_finite() const {
    auto fin = [](std::span<const double> s) {
      for (double v : s)
        if (!std::isfinite(v)) return false;
      return true;
    };
    return fin(w1.data()) && fin(b1) && fin(w2.data()) && fin(b2);
  }

  std::array<std::span<double>, 4> tensors() { return {w1.data(), std::span<double>(b1), w2.data(), std::span<double>(b2)}; }
  std::array<std::span<const double>, 4> tensors() const {
    return {w1.data(), std::span<const double>(b1), w2.data(), std::span<const double>(b2)};
  }

  std::size_t parameter_count() const { return w1.data().size() + b1.size() + w2.data().size() + b2.size(); }

  friend bool operator==(const MlpParams&, const MlpParams&) = default;
};

// Intermediate activations kept for the backward pass.
struct MlpTrace {
  Vector pre;     // W1 x + b1
  Vector hidden;  // relu(pre)
  Vector out;
};

inline MlpTrace mlp_trace(const MlpParams& p, std::span<const double> x) {
  require(x.size() == p.input_dim(), ErrorKind::DimensionMismatch,
          "MLP input dim " + std::to_string(x.size()) + " != " + std::to_string(p.input_dim()));
  MlpTrace t;
  t.pre = matvec(p.w1, x);
  for (std::size_t i = 0; i < t.pre.size(); ++i) t.pre[i] += p.b1[i];
  t.hidden.resize(t.pre.size());
  for (std::size_t i = 0; i < t.pre.size(); ++i) t.hidden[i] = t.pre[i] > 0.0 ? t.pre[i] : 0.0;
  t.out = matvec(p.w2, t.hidden);
  for (std::size_t i = 0; i < t.out.size(); ++i) t.out[i] += p.b2[i];
  return t;
}

inline Vector mlp_forward(const MlpParams& p, std::span<const double> x) { return mlp_trace(p, x).out; }

// Backpropagates grad_out (dL/dy). If grads is non-null, parameter
// gradients are accumulated into it (scaled by `scale`). Returns dL/dx.
// The ReLU derivative at exactly 0 is taken as 0.
inline Vector mlp_backward(const MlpParams& p, std::span<const double> x, const MlpTrace& t,
                           std::span<const double> grad_out, MlpParams* grads, double scale = 1.0) {
  Vector g_hidden = matvec_t(p.w2, grad_out);
  for (std::size_t i = 0; i < g_hidden.size(); ++i)
    if (!(t.pre[i] > 0.0)) g_hidden[i] = 0.0;
  if (grads) {
    add_outer(scale, grad_out, t.hidden, grads->w2);
    axpy(scale, grad_out, grads->b2);
    add_outer(scale, g_hidden, x, grads->w1);
    axpy(scale, g_hidden, grads->b1);
  }
  return matvec_t(p.w1, g_hidden);
}

}  // namespace ccf
