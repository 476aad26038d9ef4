#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <memory>
#include <vector>

#include "ssvr/loss.hpp"
#include "ssvr/model.hpp"
#include "ssvr/rng.hpp"
#include "ssvr/tensor.hpp"

using namespace ssvr;

namespace {

Arch tiny_arch() {
  Arch a;
  a.n = 8;
  a.latent_dim = 4;
  a.blocks = 2;
  a.base_channels = 2;
  a.reg_hidden = 8;
  a.reg_blocks = 1;
  return a;
}

Tensor random_image(Rng& rng, std::size_t n) {
  Tensor t = Tensor::zeros({n, n});
  for (auto& v : t.values) v = rng.uniform(0.0, 1.0);
  return t;
}

// Scripted noise source: replays pre-drawn vectors in call order so a loss
// value can be re-evaluated bit-for-bit.
struct ReplayNoise {
  std::vector<std::vector<double>> draws;
  std::shared_ptr<std::size_t> cursor = std::make_shared<std::size_t>(0);

  NoiseSource source() const {
    auto c = cursor;
    auto d = draws;
    return [c, d](std::size_t n) {
      REQUIRE(*c < d.size());
      REQUIRE(d[*c].size() == n);
      return d[(*c)++];
    };
  }
  void reset() const { *cursor = 0; }
};

ReplayNoise make_noise(Rng& rng, std::size_t count, std::size_t dim) {
  ReplayNoise rn;
  for (std::size_t i = 0; i < count; ++i)
    rn.draws.push_back(rng.normal_vector(dim));
  return rn;
}

OrdinalPrediction hard_prediction(int severity) {
  const OrdinalLabel label = ordinal_encode(severity);
  return OrdinalPrediction({clamp_probability(label.bits[0]),
                            clamp_probability(label.bits[1]),
                            clamp_probability(label.bits[2])});
}

}  // namespace

TEST_CASE("kl of the standard normal is exactly zero", "[loss]") {
  GaussianLatent q({0.0, 0.0, 0.0}, {0.0, 0.0, 0.0});
  REQUIRE(kl_loss(q) == 0.0);
  REQUIRE(kl_loss(q, 3.0) == 0.0);
}

TEST_CASE("kl of a unit-shifted mean is one half", "[loss]") {
  GaussianLatent q({1.0}, {0.0});
  REQUIRE(kl_loss(q, 1.0) == 0.5);
}

TEST_CASE("kl normalizer divides the unnormalized value", "[loss]") {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    std::vector<double> mu(6), lv(6);
    for (auto& v : mu) v = rng.uniform(-1.0, 1.0);
    for (auto& v : lv) v = rng.uniform(-1.0, 1.0);
    GaussianLatent q(mu, lv);
    REQUIRE(std::abs(kl_loss(q, 6.0) * 6.0 - kl_loss(q, 1.0)) < 1e-12);
  }
}

TEST_CASE("kl matches a Monte Carlo estimate of the divergence", "[loss]") {
  const std::size_t d = 16, n = 200000;
  Rng rng(41);
  std::vector<double> mu(d), lv(d);
  for (auto& v : mu) v = rng.uniform(-1.0, 1.0);
  for (auto& v : lv) v = rng.uniform(-1.0, 1.0);
  const GaussianLatent q(mu, lv);
  const double closed = kl_loss(q, 1.0);

  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<double> eps = rng.normal_vector(d);
    double t = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double z = mu[k] + std::exp(0.5 * lv[k]) * eps[k];
      t += 0.5 * (z * z - lv[k] - eps[k] * eps[k]);
    }
    sum += t;
    sum_sq += t * t;
  }
  const double mean = sum / static_cast<double>(n);
  const double var =
      (sum_sq - sum * sum / static_cast<double>(n)) / static_cast<double>(n - 1);
  const double se = std::sqrt(var / static_cast<double>(n));
  INFO("closed " << closed << " mc " << mean << " se " << se);
  REQUIRE(std::abs(closed - mean) < 3.0 * se + 1e-12);
}

TEST_CASE("kl is nonnegative and zero only at the prior", "[loss]") {
  Rng rng(6);
  for (int i = 0; i < 200; ++i) {
    const std::size_t d = 1 + static_cast<std::size_t>(rng.range(0, 7));
    std::vector<double> mu(d), lv(d);
    for (auto& v : mu) v = rng.uniform(-2.0, 2.0);
    for (auto& v : lv) v = rng.uniform(-2.0, 2.0);
    GaussianLatent q(mu, lv);
    const double v = kl_loss(q, 1.0);
    REQUIRE(v >= 0.0);
    double distance = 0.0;
    for (double x : mu) distance = std::max(distance, std::abs(x));
    for (double x : lv) distance = std::max(distance, std::abs(x));
    if (distance > 0.1) REQUIRE(v > 0.0);
  }
}

TEST_CASE("regression loss at even odds is three bits of cross entropy",
          "[loss]") {
  const OrdinalPrediction even({0.5, 0.5, 0.5});
  for (int c = 0; c <= 3; ++c) {
    REQUIRE(std::abs(regression_loss(even, ordinal_encode(c)) -
                     3.0 * std::log(2.0)) < 1e-12);
  }
}

TEST_CASE("regression loss of a graded prediction matches the closed form",
          "[loss]") {
  const double v = regression_loss(OrdinalPrediction({0.9, 0.5, 0.1}),
                                   ordinal_encode(1));
  REQUIRE(std::abs(v - 0.903868211876) < 1e-9);
  const double direct = -(std::log(0.9) + std::log(0.5) + std::log(0.9));
  REQUIRE(std::abs(v - direct) < 1e-12);
}

TEST_CASE("regression loss vanishes when the prediction equals the label",
          "[loss]") {
  for (int c = 0; c <= 3; ++c) {
    REQUIRE(regression_loss(hard_prediction(c), ordinal_encode(c)) < 1e-9);
  }
}

TEST_CASE("regression loss clamps boundary probabilities to stay finite",
          "[loss]") {
  Graph g;
  NodeId p = g.leaf(Tensor({3}, {0.0, 0.5, 1.0}));
  const double v = g.value(regression_node(g, p, ordinal_encode(2)));
  REQUIRE(std::isfinite(v));
  REQUIRE(v > 0.0);

  Graph g2;
  REQUIRE_THROWS_AS(
      regression_node(g2, g2.leaf(Tensor({2}, {0.5, 0.5})), ordinal_encode(0)),
      ShapeError);
}

TEST_CASE("reconstruction loss of a perfect reconstruction is zero",
          "[loss]") {
  Rng rng(8);
  const Tensor x = random_image(rng, 6);
  LossConfig cfg;
  REQUIRE(reconstruction_loss(x, x, cfg) == 0.0);
}

TEST_CASE("reconstruction loss weights a unit error by the fixed variance",
          "[loss]") {
  LossConfig cfg;  // recon_variance 10, normalizer 1
  const Tensor x({1, 1}, {0.0});
  const Tensor xh({1, 1}, {1.0});
  REQUIRE(std::abs(reconstruction_loss(x, xh, cfg) - 0.05) < 1e-15);
}

TEST_CASE("reconstruction loss matches a direct summation", "[loss]") {
  Rng rng(9);
  LossConfig cfg;
  cfg.recon_variance = 2.5;
  cfg.recon_normalizer = 36.0;
  for (int i = 0; i < 20; ++i) {
    const Tensor x = random_image(rng, 6);
    const Tensor xh = random_image(rng, 6);
    double naive = 0.0;
    for (std::size_t k = 0; k < x.values.size(); ++k) {
      const double d = x.values[k] - xh.values[k];
      naive += d * d;
    }
    naive *= 0.5 / (cfg.recon_variance * cfg.recon_normalizer);
    const double v = reconstruction_loss(x, xh, cfg);
    REQUIRE(std::abs(v - naive) <= 1e-12 * std::max(1.0, std::abs(naive)));
  }
}

TEST_CASE("reconstruction loss rejects mismatched shapes", "[loss]") {
  LossConfig cfg;
  REQUIRE_THROWS_AS(
      reconstruction_loss(Tensor::zeros({2, 2}), Tensor::zeros({2, 3}), cfg),
      ShapeError);
}

TEST_CASE("entropy of even odds is three bits", "[loss]") {
  REQUIRE(std::abs(bernoulli_entropy(OrdinalPrediction({0.5, 0.5, 0.5})) -
                   3.0 * std::log(2.0)) < 1e-12);
  REQUIRE(bernoulli_entropy(hard_prediction(3)) < 1e-9);
}

TEST_CASE("entropy gradient matches finite differences", "[loss][gradients]") {
  Rng rng(10);
  auto oracle = [](const std::vector<double>& p) {
    double acc = 0.0;
    for (double v : p) acc -= v * std::log(v) + (1.0 - v) * std::log(1.0 - v);
    return acc;
  };
  for (int i = 0; i < 20; ++i) {
    std::vector<double> p(3);
    for (auto& v : p) v = rng.uniform(0.05, 0.95);
    Graph g;
    NodeId probs = g.leaf(Tensor({3}, p, true));
    g.backward(entropy_node(g, probs));
    const std::vector<double>& analytic = g.grad(probs);
    const std::vector<double> fd = finite_diff_grad(oracle, p, 1e-6);
    for (std::size_t k = 0; k < 3; ++k) {
      if (std::abs(fd[k]) < 1e-3) {
        REQUIRE(std::abs(analytic[k] - fd[k]) < 1e-6);
      } else {
        const double rel = std::abs(analytic[k] - fd[k]) /
                           std::max(std::abs(analytic[k]), std::abs(fd[k]));
        REQUIRE(rel < 1e-4);
      }
    }
  }
}

TEST_CASE("loss config validation rejects degenerate values", "[loss]") {
  LossConfig cfg;
  cfg.recon_variance = 0.0;
  REQUIRE_THROWS_AS(cfg.validate(), DataError);
  cfg = LossConfig{};
  cfg.kl_normalizer = 0.5;
  REQUIRE_THROWS_AS(cfg.validate(), DataError);
  cfg = LossConfig{};
  cfg.labeled_batch = 0;
  REQUIRE_THROWS_AS(cfg.validate(), DataError);

  const Arch arch = tiny_arch();
  const LossConfig derived = LossConfig::for_arch(arch);
  REQUIRE(derived.kl_normalizer == static_cast<double>(arch.latent_dim));
  REQUIRE(derived.recon_normalizer == static_cast<double>(arch.n * arch.n));
  REQUIRE(derived.recon_variance == 10.0);
}

TEST_CASE("labeled batch objective decomposes into its three terms",
          "[loss]") {
  const Arch arch = tiny_arch();
  const ModelParams mp = init_params(arch, 21);
  const LossConfig cfg = LossConfig::for_arch(arch);
  Rng rng(22);

  Minibatch batch;
  for (int i = 0; i < 3; ++i) {
    batch.images.push_back(random_image(rng, arch.n));
    batch.labels.push_back(ordinal_encode(i));
  }
  ReplayNoise rn = make_noise(rng, 3, arch.latent_dim);
  const LossBreakdown b = total_loss(batch, mp, cfg, rn.source());
  REQUIRE(b.regression.has_value());
  REQUIRE_FALSE(b.entropy.has_value());
  REQUIRE(std::abs(b.total - (b.kl + *b.regression + b.reconstruction)) <
          1e-12);
  REQUIRE(b.kl >= 0.0);
  REQUIRE(b.reconstruction >= 0.0);
  REQUIRE(*b.regression > 0.0);
}

TEST_CASE("unlabeled batch objective has no regression term", "[loss]") {
  const Arch arch = tiny_arch();
  const ModelParams mp = init_params(arch, 23);
  const LossConfig cfg = LossConfig::for_arch(arch);
  Rng rng(24);

  Minibatch batch;
  for (int i = 0; i < 2; ++i) {
    batch.images.push_back(random_image(rng, arch.n));
    batch.labels.push_back(std::nullopt);
  }
  ReplayNoise rn = make_noise(rng, 2, arch.latent_dim);
  const LossBreakdown b = total_loss(batch, mp, cfg, rn.source());
  REQUIRE_FALSE(b.regression.has_value());
  REQUIRE_FALSE(b.entropy.has_value());
  REQUIRE(std::abs(b.total - (b.kl + b.reconstruction)) < 1e-12);
}

TEST_CASE("entropy objective adds a weighted entropy term on unlabeled data",
          "[loss]") {
  const Arch arch = tiny_arch();
  const ModelParams mp = init_params(arch, 25);
  const LossConfig cfg = LossConfig::for_arch(arch);
  Rng rng(26);

  Minibatch batch;
  batch.images.push_back(random_image(rng, arch.n));
  batch.labels.push_back(std::nullopt);
  ReplayNoise rn = make_noise(rng, 1, arch.latent_dim);

  const LossBreakdown b =
      total_loss(batch, mp, cfg, rn.source(), Objective::EmEntropy, 0.7);
  REQUIRE(b.entropy.has_value());
  REQUIRE_FALSE(b.regression.has_value());
  REQUIRE(std::abs(b.total - (b.kl + b.reconstruction + *b.entropy)) < 1e-12);

  rn.reset();
  const LossBreakdown half =
      total_loss(batch, mp, cfg, rn.source(), Objective::EmEntropy, 0.35);
  REQUIRE(std::abs(*half.entropy * 2.0 - *b.entropy) < 1e-12);
}

TEST_CASE("batch loss is the mean of per-image losses", "[loss]") {
  const Arch arch = tiny_arch();
  const ModelParams mp = init_params(arch, 27);
  const LossConfig cfg = LossConfig::for_arch(arch);
  Rng rng(28);

  const Tensor x1 = random_image(rng, arch.n);
  const Tensor x2 = random_image(rng, arch.n);
  ReplayNoise rn = make_noise(rng, 2, arch.latent_dim);

  Minibatch pair;
  pair.images = {x1, x2};
  pair.labels = {ordinal_encode(1), ordinal_encode(3)};
  const LossBreakdown both = total_loss(pair, mp, cfg, rn.source());

  Minibatch first;
  first.images = {x1};
  first.labels = {ordinal_encode(1)};
  ReplayNoise rn1;
  rn1.draws = {rn.draws[0]};
  const LossBreakdown b1 = total_loss(first, mp, cfg, rn1.source());

  Minibatch second;
  second.images = {x2};
  second.labels = {ordinal_encode(3)};
  ReplayNoise rn2;
  rn2.draws = {rn.draws[1]};
  const LossBreakdown b2 = total_loss(second, mp, cfg, rn2.source());

  REQUIRE(std::abs(both.total - 0.5 * (b1.total + b2.total)) < 1e-10);
  REQUIRE(std::abs(both.kl - 0.5 * (b1.kl + b2.kl)) < 1e-10);
  REQUIRE(std::abs(both.reconstruction -
                   0.5 * (b1.reconstruction + b2.reconstruction)) < 1e-10);
  REQUIRE(std::abs(*both.regression -
                   0.5 * (*b1.regression + *b2.regression)) < 1e-10);
}

TEST_CASE("a duplicated image leaves the batch mean unchanged", "[loss]") {
  const Arch arch = tiny_arch();
  const ModelParams mp = init_params(arch, 29);
  const LossConfig cfg = LossConfig::for_arch(arch);
  Rng rng(30);

  const Tensor x = random_image(rng, arch.n);
  const std::vector<double> eps = rng.normal_vector(arch.latent_dim);

  Minibatch one;
  one.images = {x};
  one.labels = {ordinal_encode(2)};
  ReplayNoise rn1;
  rn1.draws = {eps};
  const LossBreakdown single = total_loss(one, mp, cfg, rn1.source());

  Minibatch two;
  two.images = {x, x};
  two.labels = {ordinal_encode(2), ordinal_encode(2)};
  ReplayNoise rn2;
  rn2.draws = {eps, eps};
  const LossBreakdown doubled = total_loss(two, mp, cfg, rn2.source());

  REQUIRE(std::abs(doubled.total - single.total) < 1e-12);
}

TEST_CASE("mixed labeled and unlabeled batches are rejected", "[loss]") {
  const Arch arch = tiny_arch();
  const ModelParams mp = init_params(arch, 31);
  const LossConfig cfg = LossConfig::for_arch(arch);
  Rng rng(32);

  Minibatch batch;
  batch.images = {random_image(rng, arch.n), random_image(rng, arch.n)};
  batch.labels = {ordinal_encode(1), std::nullopt};
  ReplayNoise rn = make_noise(rng, 2, arch.latent_dim);
  REQUIRE_THROWS_AS(total_loss(batch, mp, cfg, rn.source()), DataError);

  Minibatch empty;
  REQUIRE_THROWS_AS(total_loss(empty, mp, cfg, rn.source()), DataError);
}

TEST_CASE("exactly one noise draw per image, each of latent size", "[loss]") {
  const Arch arch = tiny_arch();
  const ModelParams mp = init_params(arch, 33);
  const LossConfig cfg = LossConfig::for_arch(arch);
  Rng rng(34);

  Minibatch batch;
  for (int i = 0; i < 5; ++i) {
    batch.images.push_back(random_image(rng, arch.n));
    batch.labels.push_back(ordinal_encode(i % 4));
  }
  std::size_t calls = 0;
  bool sizes_ok = true;
  NoiseSource counting = [&](std::size_t d) {
    ++calls;
    sizes_ok = sizes_ok && d == arch.latent_dim;
    return std::vector<double>(d, 0.0);
  };
  total_loss(batch, mp, cfg, counting);
  REQUIRE(calls == 5);
  REQUIRE(sizes_ok);
}

TEST_CASE("the regression term is a function of the sampled latent alone",
          "[loss]") {
  const Arch arch = tiny_arch();
  const ModelParams mp = init_params(arch, 35);
  LossConfig cfg = LossConfig::for_arch(arch);
  Rng rng(36);

  const Tensor x = random_image(rng, arch.n);
  const std::vector<double> eps = rng.normal_vector(arch.latent_dim);
  const OrdinalLabel label = ordinal_encode(2);

  Minibatch batch;
  batch.images = {x};
  batch.labels = {label};
  ReplayNoise rn;
  rn.draws = {eps};

  Graph g;
  ParamNodes pn = register_params(g, mp);
  BatchLossNodes nodes =
      total_loss_nodes(g, batch, pn, arch, cfg, rn.source());
  REQUIRE(nodes.regression.has_value());
  const double from_batch = g.value(*nodes.regression);

  // Reconstruct the same term through the public single-step path: encode,
  // reparameterize with the same noise, regress that latent.
  const GaussianLatent q = encode(x, mp);
  const Tensor z = sample_latent(q, eps);
  const OrdinalPrediction pred = regress(z, mp);
  const double direct = regression_loss(pred, label);
  REQUIRE(std::abs(from_batch - direct) < 1e-12);
}

TEST_CASE("objective gradients match finite differences for every parameter",
          "[loss][gradients]") {
  const Arch arch = tiny_arch();
  const ModelParams mp = init_params(arch, 37);
  const LossConfig cfg = LossConfig::for_arch(arch, 10.0);
  Rng rng(38);

  Minibatch batch;
  batch.images = {random_image(rng, arch.n), random_image(rng, arch.n)};
  batch.labels = {ordinal_encode(1), ordinal_encode(2)};
  ReplayNoise rn = make_noise(rng, 2, arch.latent_dim);

  rn.reset();
  Graph g;
  ParamNodes pn = register_params(g, mp);
  BatchLossNodes nodes =
      total_loss_nodes(g, batch, pn, arch, cfg, rn.source());
  g.backward(nodes.total);

  for (const auto& [name, tensor] : mp.params) {
    const std::vector<double>& analytic = g.grad(pn.at(name));
    auto f = [&, pname = name](const std::vector<double>& vals) {
      ModelParams probe = mp;
      probe.params.at(pname).values = vals;
      rn.reset();
      return total_loss(batch, probe, cfg, rn.source()).total;
    };
    const std::vector<double> fd = finite_diff_grad(f, tensor.values, 1e-5);
    for (std::size_t i = 0; i < fd.size(); ++i) {
      INFO("parameter " << name << " coordinate " << i << ": analytic "
                        << analytic[i] << " vs finite-difference " << fd[i]);
      if (std::abs(fd[i]) < 1e-3) {
        REQUIRE(std::abs(analytic[i] - fd[i]) < 1e-6);
      } else {
        const double rel = std::abs(analytic[i] - fd[i]) /
                           std::max(std::abs(analytic[i]), std::abs(fd[i]));
        REQUIRE(rel < 1e-4);
      }
    }
  }
}
