#pragma once

#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "ccf/matrix.hpp"
#include "ccf/mlp.hpp"

namespace ccf {

struct IdentityMap {
  std::size_t dim = 0;
  friend bool operator==(const IdentityMap&, const IdentityMap&) = default;
};

// A map between the classifier latent space and the VLM latent space:
// either a trained MLP or an exact identity (VLM+linear classifiers).
class Projector {
 public:
  Projector(IdentityMap id) : impl_(id) {}
  Projector(MlpParams mlp) : impl_(std::move(mlp)) { std::get<MlpParams>(impl_).validate(); }

  bool is_identity() const noexcept { return std::holds_alternative<IdentityMap>(impl_); }
  const MlpParams& mlp() const { return std::get<MlpParams>(impl_); }
  MlpParams& mlp() { return std::get<MlpParams>(impl_); }

  std::size_t input_dim() const {
    return is_identity() ? std::get<IdentityMap>(impl_).dim : mlp().input_dim();
  }
  std::size_t output_dim() const {
    return is_identity() ? std::get<IdentityMap>(impl_).dim : mlp().output_dim();
  }

  Vector operator()(std::span<const double> x) const {
    if (is_identity()) {
      require(x.size() == input_dim(), ErrorKind::DimensionMismatch,
              "identity projector dim " + std::to_string(input_dim()) + " got " + std::to_string(x.size()));
      return {x.begin(), x.end()};
    }
    return mlp_forward(mlp(), x);
  }

  // Forward pass plus the vector-Jacobian product with grad_out, where
  // grad_out is produced from the forward output by `seed`.
  template <typename SeedFn>
  Vector forward_vjp(std::span<const double> x, SeedFn&& seed, Vector* out = nullptr) const {
    if (is_identity()) {
      Vector y = (*this)(x);
      Vector g = seed(std::as_const(y));
      if (out) *out = std::move(y);
      return g;
    }
    MlpTrace t = mlp_trace(mlp(), x);
    const Vector g = seed(std::as_const(t.out));
    Vector gx = mlp_backward(mlp(), x, t, g, nullptr);
    if (out) *out = std::move(t.out);
    return gx;
  }

  friend bool operator==(const Projector&, const Projector&) = default;

 private:
  std::variant<IdentityMap, MlpParams> impl_;
};

// p_in: classifier space (d) -> VLM space (k); p_out: VLM space -> classifier space.
struct ProjectorPair {
  Projector in;
  Projector out;

  ProjectorPair(Projector p_in, Projector p_out) : in(std::move(p_in)), out(std::move(p_out)) {
    require(in.output_dim() == out.input_dim() && in.input_dim() == out.output_dim(), ErrorKind::DimensionMismatch,
            "projector pair dims: p_in " + std::to_string(in.input_dim()) + "->" + std::to_string(in.output_dim()) +
                ", p_out " + std::to_string(out.input_dim()) + "->" + std::to_string(out.output_dim()));
  }

  static ProjectorPair identity(std::size_t dim) { return {IdentityMap{dim}, IdentityMap{dim}}; }

  std::size_t clf_dim() const { return in.input_dim(); }
  std::size_t vlm_dim() const { return in.output_dim(); }

  friend bool operator==(const ProjectorPair&, const ProjectorPair&) = default;
};

// Row i of both matrices describes the same image.
struct PairedEmbeddingDataset {
  Matrix clf;  // n x d, classifier features f(x)
  Matrix vlm;  // n x k, VLM image embeddings v_I(x)

  PairedEmbeddingDataset(Matrix clf_features, Matrix vlm_embeddings)
      : clf(std::move(clf_features)), vlm(std::move(vlm_embeddings)) {
    require(clf.rows() == vlm.rows(), ErrorKind::SizeMismatch,
            std::to_string(clf.rows()) + " classifier rows vs " + std::to_string(vlm.rows()) + " VLM rows");
    require(clf.all_finite() && vlm.all_finite(), ErrorKind::NonFiniteEntry, "dataset has non-finite entries");
  }

  std::size_t size() const noexcept { return clf.rows(); }
};

struct ProjectorLosses {
  double in = 0.0;
  double out = 0.0;
  double cyc = 0.0;
  double total = 0.0;
};

// Which terms of the projector objective are active.
struct LossTerms {
  bool in = true;
  bool out = true;
  bool cyc = true;
};

namespace detail {

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline void check_pair_dataset(const ProjectorPair& pair, const PairedEmbeddingDataset& data) {
  require(data.clf.cols() == pair.clf_dim() && data.vlm.cols() == pair.vlm_dim(), ErrorKind::DimensionMismatch,
          "dataset dims (" + std::to_string(data.clf.cols()) + ", " + std::to_string(data.vlm.cols()) +
              ") do not match projector pair (" + std::to_string(pair.clf_dim()) + ", " +
              std::to_string(pair.vlm_dim()) + ")");
}

inline std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

}  // namespace detail

// Mean squared-distance losses over the selected rows:
//   in  = mean |p_in(f) - v|^2
//   out = mean |p_out(v) - f|^2
//   cyc = mean |p_out(p_in(f)) - f|^2
//   total = in + out + cyc
inline ProjectorLosses projector_losses(const ProjectorPair& pair, const PairedEmbeddingDataset& data,
                                        std::span<const std::size_t> rows) {
  require(!rows.empty(), ErrorKind::EmptyBatch, "projector loss over an empty batch");
  detail::check_pair_dataset(pair, data);
  ProjectorLosses l;
  for (std::size_t r : rows) {
    const auto f = data.clf.row(r);
    const auto v = data.vlm.row(r);
    const Vector u = pair.in(f);
    l.in += detail::squared_distance(u, v);
    l.out += detail::squared_distance(pair.out(v), f);
    l.cyc += detail::squared_distance(pair.out(u), f);
  }
  const double n = static_cast<double>(rows.size());
  l.in /= n;
  l.out /= n;
  l.cyc /= n;
  l.total = l.in + l.out + l.cyc;
  return l;
}

inline ProjectorLosses projector_losses(const ProjectorPair& pair, const PairedEmbeddingDataset& data) {
  const auto rows = detail::all_rows(data.size());
  return projector_losses(pair, data, rows);
}

struct ProjectorGradients {
  MlpParams in;
  MlpParams out;
};

// Analytic gradient of the selected loss terms with respect to every MLP
// parameter. The cycle term reaches p_in's parameters through p_out.
inline ProjectorGradients projector_gradients(const ProjectorPair& pair, const PairedEmbeddingDataset& data,
                                              std::span<const std::size_t> rows, LossTerms terms = {}) {
  require(!rows.empty(), ErrorKind::EmptyBatch, "projector gradient over an empty batch");
  require(!pair.in.is_identity() && !pair.out.is_identity(), ErrorKind::InvalidConfig,
          "identity projectors have no parameters");
  detail::check_pair_dataset(pair, data);
  const MlpParams& pin = pair.in.mlp();
  const MlpParams& pout = pair.out.mlp();
  ProjectorGradients g{MlpParams::zeros(pin.input_dim(), pin.hidden_dim(), pin.output_dim()),
                       MlpParams::zeros(pout.input_dim(), pout.hidden_dim(), pout.output_dim())};
  const double scale = 2.0 / static_cast<double>(rows.size());
  Vector resid;
  for (std::size_t r : rows) {
    const auto f = data.clf.row(r);
    const auto v = data.vlm.row(r);
    const bool need_in_fwd = terms.in || terms.cyc;
    MlpTrace tin;
    if (need_in_fwd) tin = mlp_trace(pin, f);
    Vector g_u(pin.output_dim(), 0.0);
    if (terms.in) {
      resid.assign(tin.out.size(), 0.0);
      for (std::size_t i = 0; i < resid.size(); ++i) resid[i] = tin.out[i] - v[i];
      axpy(1.0, resid, g_u);
    }
    if (terms.out) {
      const MlpTrace tout = mlp_trace(pout, v);
      resid.assign(f.size(), 0.0);
      for (std::size_t i = 0; i < resid.size(); ++i) resid[i] = tout.out[i] - f[i];
      mlp_backward(pout, v, tout, resid, &g.out, scale);
    }
    if (terms.cyc) {
      const MlpTrace tcyc = mlp_trace(pout, tin.out);
      resid.assign(f.size(), 0.0);
      for (std::size_t i = 0; i < resid.size(); ++i) resid[i] = tcyc.out[i] - f[i];
      const Vector g_from_cyc = mlp_backward(pout, tin.out, tcyc, resid, &g.out, scale);
      axpy(1.0, g_from_cyc, g_u);
    }
    if (need_in_fwd) mlp_backward(pin, f, tin, g_u, &g.in, scale);
  }
  return g;
}

inline ProjectorGradients projector_gradients(const ProjectorPair& pair, const PairedEmbeddingDataset& data,
                                              LossTerms terms = {}) {
  const auto rows = detail::all_rows(data.size());
  return projector_gradients(pair, data, rows, terms);
}

}  // namespace ccf
