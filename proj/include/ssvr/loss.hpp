#ifndef SSVR_LOSS_HPP
#define SSVR_LOSS_HPP

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ssvr/errors.hpp"
#include "ssvr/model.hpp"
#include "ssvr/tensor.hpp"

namespace ssvr {

// Probabilities are clamped to [kProbEps, 1-kProbEps] before any logarithm.
inline constexpr double kProbEps = 1e-12;

struct LossConfig {
  double recon_variance = 10.0;   // Sigma = recon_variance * I
  double kl_normalizer = 1.0;     // latent size D
  double recon_normalizer = 1.0;  // image pixel count n^2
  std::size_t labeled_batch = 16;
  std::size_t unlabeled_batch = 16;

  void validate() const {
    if (!(recon_variance > 0.0))
      throw DataError("loss config: recon_variance must be positive");
    if (kl_normalizer < 1.0 || recon_normalizer < 1.0)
      throw DataError("loss config: normalizers must be >= 1");
    if (labeled_batch < 1 || unlabeled_batch < 1)
      throw DataError("loss config: batch sizes must be >= 1");
  }

  static LossConfig for_arch(const Arch& arch, double recon_variance = 10.0,
                             std::size_t labeled_batch = 16,
                             std::size_t unlabeled_batch = 16) {
    LossConfig c;
    c.recon_variance = recon_variance;
    c.kl_normalizer = static_cast<double>(arch.latent_dim);
    c.recon_normalizer = static_cast<double>(arch.n * arch.n);
    c.labeled_batch = labeled_batch;
    c.unlabeled_batch = unlabeled_batch;
    c.validate();
    return c;
  }
};

// Per-batch mean of each loss term. regression is absent for unlabeled
// batches; entropy appears only in the EM baseline's unlabeled phase.
struct LossBreakdown {
  double kl = 0.0;
  std::optional<double> regression;
  double reconstruction = 0.0;
  std::optional<double> entropy;
  double total = 0.0;
};

// Fresh standard-normal vector of the requested length; one draw per image.
using NoiseSource = std::function<std::vector<double>(std::size_t)>;

// A minibatch is entirely labeled or entirely unlabeled.
struct Minibatch {
  std::vector<Tensor> images;
  std::vector<std::optional<OrdinalLabel>> labels;  // empty => unlabeled

  bool labeled() const {
    if (labels.empty()) return false;
    if (labels.size() != images.size())
      throw DataError("minibatch: " + std::to_string(labels.size()) +
                      " labels for " + std::to_string(images.size()) +
                      " images");
    bool any = false, all = true;
    for (const auto& l : labels) {
      any = any || l.has_value();
      all = all && l.has_value();
    }
    if (any && !all)
      throw DataError("minibatch: mixed labeled/unlabeled batch; the two are "
                      "processed separately");
    return any;
  }
};

namespace detail {

inline NodeId scale_node(Graph& g, NodeId a, double c) {
  return g.mul(a, g.constant(g.tensor(a).shape, c));
}

inline NodeId add_const_node(Graph& g, NodeId a, double c) {
  return g.add(a, g.constant(g.tensor(a).shape, c));
}

// Elementwise clamp to [lo, hi] built from relu: max via relu(x-lo)+lo,
// min via hi-relu(hi-x).
inline NodeId clamp_node(Graph& g, NodeId a, double lo, double hi) {
  NodeId low = add_const_node(g, g.relu(add_const_node(g, a, -lo)), lo);
  NodeId flipped = add_const_node(g, scale_node(g, low, -1.0), hi);
  return add_const_node(g, scale_node(g, g.relu(flipped), -1.0), hi);
}

}  // namespace detail

// KL(q || N(0,I)) for a diagonal Gaussian, divided by the KL normalizer:
//   1/2 sum_k (mu_k^2 + lambda_k^2 - log lambda_k^2 - 1).
// The constant is fixed so the standard normal gives exactly zero.
inline NodeId kl_node(Graph& g, const LatentNodes& q, double normalizer) {
  const std::size_t d = g.tensor(q.mu).numel();
  NodeId s_mu2 = g.sum(g.square(q.mu));
  NodeId s_var = g.sum(g.exp(q.log_var));
  NodeId s_lv = g.sum(q.log_var);
  NodeId t = g.add(s_mu2, s_var);
  t = g.add(t, detail::scale_node(g, s_lv, -1.0));
  t = detail::add_const_node(g, t, -static_cast<double>(d));
  return detail::scale_node(g, t, 0.5 / normalizer);
}

// Sum of three Bernoulli cross entropies between bit probabilities and a
// monotone ordinal label.
inline NodeId regression_node(Graph& g, NodeId probs,
                              const OrdinalLabel& label) {
  if (g.tensor(probs).shape != Shape{3})
    throw ShapeError("regression loss: expected 3 probabilities, got " +
                     shape_str(g.tensor(probs).shape));
  NodeId p = detail::clamp_node(g, probs, kProbEps, 1.0 - kProbEps);
  NodeId y = g.leaf(Tensor({3}, {static_cast<double>(label.bits[0]),
                                 static_cast<double>(label.bits[1]),
                                 static_cast<double>(label.bits[2])}));
  NodeId one_minus_y = detail::add_const_node(g, detail::scale_node(g, y, -1.0), 1.0);
  NodeId one_minus_p = detail::add_const_node(g, detail::scale_node(g, p, -1.0), 1.0);
  NodeId pos = g.mul(y, g.log(p));
  NodeId neg = g.mul(one_minus_y, g.log(one_minus_p));
  return detail::scale_node(g, g.sum(g.add(pos, neg)), -1.0);
}

// Gaussian reconstruction term with fixed diagonal covariance:
//   1/2 sum_pixels (x - x_hat)^2 / recon_variance, / recon_normalizer.
inline NodeId reconstruction_node(Graph& g, NodeId x, NodeId x_hat,
                                  const LossConfig& cfg) {
  if (g.tensor(x).shape != g.tensor(x_hat).shape)
    throw ShapeError("reconstruction loss: shape mismatch " +
                     shape_str(g.tensor(x).shape) + " vs " +
                     shape_str(g.tensor(x_hat).shape));
  NodeId r = g.add(x_hat, detail::scale_node(g, x, -1.0));
  return detail::scale_node(
      g, g.sum(g.square(r)),
      0.5 / (cfg.recon_variance * cfg.recon_normalizer));
}

// Sum of per-bit Bernoulli entropies, used by the EM baseline.
inline NodeId entropy_node(Graph& g, NodeId probs) {
  NodeId p = detail::clamp_node(g, probs, kProbEps, 1.0 - kProbEps);
  NodeId one_minus_p = detail::add_const_node(g, detail::scale_node(g, p, -1.0), 1.0);
  NodeId t = g.add(g.mul(p, g.log(p)),
                   g.mul(one_minus_p, g.log(one_minus_p)));
  return detail::scale_node(g, g.sum(t), -1.0);
}

// ---- plain scalar entry points --------------------------------------------
// These evaluate the same graph builders as training, so test values and
// training values agree exactly.

inline double kl_loss(const GaussianLatent& q, double normalizer = 1.0) {
  Graph g;
  LatentNodes ln{g.leaf(Tensor({q.dim()}, q.mu)),
                 g.leaf(Tensor({q.dim()}, q.log_var))};
  return g.value(kl_node(g, ln, normalizer));
}

inline double regression_loss(const OrdinalPrediction& pred,
                              const OrdinalLabel& label) {
  Graph g;
  NodeId p = g.leaf(Tensor({3}, {pred.probs[0], pred.probs[1], pred.probs[2]}));
  return g.value(regression_node(g, p, label));
}

inline double reconstruction_loss(const Tensor& x, const Tensor& x_hat,
                                  const LossConfig& cfg) {
  Graph g;
  return g.value(reconstruction_node(g, g.leaf(x), g.leaf(x_hat), cfg));
}

inline double bernoulli_entropy(const OrdinalPrediction& pred) {
  Graph g;
  NodeId p = g.leaf(Tensor({3}, {pred.probs[0], pred.probs[1], pred.probs[2]}));
  return g.value(entropy_node(g, p));
}

// ---- full objective over a minibatch ---------------------------------------

enum class Objective {
  VaeR,       // labeled: KL + regression + reconstruction; unlabeled: KL + reconstruction
  EmEntropy,  // unlabeled phase adds weighted prediction entropy
};

struct BatchLossNodes {
  NodeId total;
  NodeId kl;
  NodeId reconstruction;
  std::optional<NodeId> regression;
  std::optional<NodeId> entropy;
  LossBreakdown breakdown(const Graph& g) const {
    LossBreakdown b;
    b.kl = g.value(kl);
    b.reconstruction = g.value(reconstruction);
    if (regression) b.regression = g.value(*regression);
    if (entropy) b.entropy = g.value(*entropy);
    b.total = g.value(total);
    return b;
  }
};

// Builds the per-batch mean objective. One latent sample per image, drawn
// from `noise`. The graph is left alive for backward().
inline BatchLossNodes total_loss_nodes(Graph& g, const Minibatch& batch,
                                       const ParamNodes& pn, const Arch& arch,
                                       const LossConfig& cfg,
                                       const NoiseSource& noise,
                                       Objective objective = Objective::VaeR,
                                       double entropy_weight = 0.0) {
  cfg.validate();
  if (batch.images.empty()) throw DataError("total loss: empty minibatch");
  const bool labeled = batch.labeled();
  const double inv_b = 1.0 / static_cast<double>(batch.images.size());

  std::optional<NodeId> kl_sum, rec_sum, reg_sum, ent_sum;
  auto acc = [&g](std::optional<NodeId>& slot, NodeId v) {
    slot = slot ? g.add(*slot, v) : v;
  };

  for (std::size_t i = 0; i < batch.images.size(); ++i) {
    NodeId x = g.leaf(batch.images[i]);
    LatentNodes q = encode_nodes(g, x, pn, arch);
    acc(kl_sum, kl_node(g, q, cfg.kl_normalizer));
    NodeId eps = g.leaf(Tensor({arch.latent_dim}, noise(arch.latent_dim)));
    NodeId z = sample_latent_node(g, q, eps);
    NodeId x_hat = decode_nodes(g, z, pn, arch);
    NodeId x_img = g.tensor(x).shape.size() == 2
                       ? x
                       : g.reshape(x, {arch.n, arch.n});
    acc(rec_sum, reconstruction_node(g, x_img, x_hat, cfg));
    if (labeled) {
      NodeId probs = regress_nodes(g, z, pn, arch);
      acc(reg_sum, regression_node(g, probs, *batch.labels[i]));
    } else if (objective == Objective::EmEntropy) {
      NodeId probs = regress_nodes(g, z, pn, arch);
      acc(ent_sum, entropy_node(g, probs));
    }
  }

  BatchLossNodes out;
  out.kl = detail::scale_node(g, *kl_sum, inv_b);
  out.reconstruction = detail::scale_node(g, *rec_sum, inv_b);
  NodeId total = g.add(out.kl, out.reconstruction);
  if (reg_sum) {
    out.regression = detail::scale_node(g, *reg_sum, inv_b);
    total = g.add(total, *out.regression);
  }
  if (ent_sum) {
    out.entropy = detail::scale_node(g, *ent_sum, inv_b * entropy_weight);
    total = g.add(total, *out.entropy);
  }
  out.total = total;
  return out;
}

// Forward-only evaluation of the objective on a minibatch.
inline LossBreakdown total_loss(const Minibatch& batch, const ModelParams& mp,
                                const LossConfig& cfg,
                                const NoiseSource& noise,
                                Objective objective = Objective::VaeR,
                                double entropy_weight = 0.0) {
  Graph g;
  ParamNodes pn = register_params(g, mp);
  BatchLossNodes nodes = total_loss_nodes(g, batch, pn, mp.arch, cfg, noise,
                                          objective, entropy_weight);
  return nodes.breakdown(g);
}

}  // namespace ssvr

#endif  // SSVR_LOSS_HPP
