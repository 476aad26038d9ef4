#ifndef SSVR_MODEL_HPP
#define SSVR_MODEL_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ssvr/errors.hpp"
#include "ssvr/rng.hpp"
#include "ssvr/tensor.hpp"

namespace ssvr {

// Architecture hyperparameters. The encoder is a stack of stride-2 residual
// conv blocks (3x3 main path, 1x1 projection skip) with two affine heads for
// the latent mean and log-variance; the decoder mirrors it with transposed
// convs (4x4 main, 2x2 skip); the regressor reads the latent vector through
// residual blocks, an optional global average pool (spatial latents), and
// two affine layers ending in three sigmoids.
struct Arch {
  std::size_t n = 64;             // input image side
  std::size_t latent_dim = 32;    // D
  std::size_t blocks = 3;         // stride-2 blocks in encoder/decoder
  std::size_t base_channels = 16; // channels double per block
  std::size_t reg_hidden = 32;
  std::size_t reg_blocks = 1;
  bool latent_spatial = false;    // regressor treats z as [C,S,S]
  std::size_t latent_side = 0;
  std::size_t latent_channels = 0;

  std::size_t channels_at(std::size_t i) const { return base_channels << i; }
  std::size_t final_side() const { return n >> blocks; }
  std::size_t final_channels() const { return channels_at(blocks - 1); }

  void validate() const {
    if (blocks < 1) throw ShapeError("arch: needs at least one block");
    if (n == 0 || (n % (std::size_t{1} << blocks)) != 0)
      throw ShapeError("arch: image side " + std::to_string(n) +
                       " not divisible by 2^" + std::to_string(blocks));
    if (final_side() < 1) throw ShapeError("arch: too many blocks for side");
    if (latent_dim < 1) throw ShapeError("arch: latent_dim must be positive");
    if (latent_spatial &&
        latent_side * latent_side * latent_channels != latent_dim)
      throw ShapeError("arch: spatial latent " + std::to_string(latent_side) +
                       "^2 x " + std::to_string(latent_channels) +
                       " != latent_dim " + std::to_string(latent_dim));
  }

  std::string descriptor() const {
    std::ostringstream os;
    os << "n=" << n << ";D=" << latent_dim << ";blocks=" << blocks
       << ";base=" << base_channels << ";reg_hidden=" << reg_hidden
       << ";reg_blocks=" << reg_blocks
       << ";latent_spatial=" << (latent_spatial ? 1 : 0)
       << ";latent_side=" << latent_side
       << ";latent_channels=" << latent_channels;
    return os.str();
  }

  static Arch from_descriptor(const std::string& text) {
    Arch a;
    std::istringstream is(text);
    std::string kv;
    while (std::getline(is, kv, ';')) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos)
        throw DataError("arch descriptor: malformed entry '" + kv + "'");
      const std::string key = kv.substr(0, eq);
      const std::uint64_t val = std::stoull(kv.substr(eq + 1));
      if (key == "n") a.n = val;
      else if (key == "D") a.latent_dim = val;
      else if (key == "blocks") a.blocks = val;
      else if (key == "base") a.base_channels = val;
      else if (key == "reg_hidden") a.reg_hidden = val;
      else if (key == "reg_blocks") a.reg_blocks = val;
      else if (key == "latent_spatial") a.latent_spatial = val != 0;
      else if (key == "latent_side") a.latent_side = val;
      else if (key == "latent_channels") a.latent_channels = val;
      else throw DataError("arch descriptor: unknown key '" + key + "'");
    }
    a.validate();
    return a;
  }
};

// Diagonal Gaussian q(z|x): mean and log-variance per latent dimension.
struct GaussianLatent {
  std::vector<double> mu;
  std::vector<double> log_var;

  GaussianLatent(std::vector<double> m, std::vector<double> lv)
      : mu(std::move(m)), log_var(std::move(lv)) {
    if (mu.size() != log_var.size())
      throw ShapeError("gaussian latent: mu length " +
                       std::to_string(mu.size()) + " != log_var length " +
                       std::to_string(log_var.size()));
    for (double v : log_var)
      if (!std::isfinite(v))
        throw NumericalError("gaussian latent: non-finite log-variance");
    for (double v : mu)
      if (!std::isfinite(v))
        throw NumericalError("gaussian latent: non-finite mean");
  }
  std::size_t dim() const { return mu.size(); }
};

// 3-bit cumulative encoding of severity class 0..3. Valid labels are
// monotone: [0,0,0], [1,0,0], [1,1,0], [1,1,1].
struct OrdinalLabel {
  std::array<int, 3> bits;

  explicit OrdinalLabel(std::array<int, 3> b) : bits(b) {
    for (int v : bits)
      if (v != 0 && v != 1)
        throw DataError("ordinal label: bits must be 0 or 1");
    if (bits[0] < bits[1] || bits[1] < bits[2])
      throw DataError("ordinal label: non-monotone bit pattern [" +
                      std::to_string(bits[0]) + "," + std::to_string(bits[1]) +
                      "," + std::to_string(bits[2]) + "]");
  }
  int severity_class() const { return bits[0] + bits[1] + bits[2]; }
};

inline OrdinalLabel ordinal_encode(int severity_class) {
  if (severity_class < 0 || severity_class > 3)
    throw DataError("ordinal_encode: class " + std::to_string(severity_class) +
                    " outside {0,1,2,3}");
  return OrdinalLabel({severity_class >= 1 ? 1 : 0,
                       severity_class >= 2 ? 1 : 0,
                       severity_class >= 3 ? 1 : 0});
}

// Per-bit probabilities from the regressor, each strictly inside (0,1).
struct OrdinalPrediction {
  std::array<double, 3> probs;

  explicit OrdinalPrediction(std::array<double, 3> p) : probs(p) {
    for (double v : probs)
      if (!(v > 0.0 && v < 1.0))
        throw NumericalError("ordinal prediction: probability " +
                             std::to_string(v) + " outside (0,1)");
  }
};

// Expected severity in [0,3]: sum of the three bit probabilities.
inline double expected_severity(const OrdinalPrediction& pred) {
  return pred.probs[0] + pred.probs[1] + pred.probs[2];
}

// Exact integer-valued counterpart for hard labels.
inline double expected_severity(const OrdinalLabel& label) {
  return static_cast<double>(label.severity_class());
}

// Named parameter tensors for encoder (enc.*), decoder (dec.*) and
// regressor (reg.*). Map order is the canonical serialization order.
struct ModelParams {
  Arch arch;
  std::map<std::string, Tensor> params;

  enum class Group { Encoder, Decoder, Regressor };

  static Group group_of(const std::string& name) {
    if (name.rfind("enc.", 0) == 0) return Group::Encoder;
    if (name.rfind("dec.", 0) == 0) return Group::Decoder;
    return Group::Regressor;
  }
};

namespace detail {

inline Tensor he_conv(Rng& rng, std::size_t co, std::size_t ci, std::size_t k) {
  const double scale = std::sqrt(2.0 / (static_cast<double>(ci) * k * k));
  Tensor t = Tensor::zeros({co, ci, k, k}, true);
  for (auto& v : t.values) v = rng.normal() * scale;
  return t;
}

inline Tensor he_affine_w(Rng& rng, std::size_t n_out, std::size_t n_in) {
  const double scale = std::sqrt(2.0 / static_cast<double>(n_in));
  Tensor t = Tensor::zeros({n_out, n_in}, true);
  for (auto& v : t.values) v = rng.normal() * scale;
  return t;
}

inline Tensor zero_bias(std::size_t n) { return Tensor::zeros({n}, true); }

}  // namespace detail

// He fan-in initialization for weights, zero biases, fixed by seed.
inline ModelParams init_params(const Arch& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng = Rng::stream(seed, 0x1717);
  ModelParams mp;
  mp.arch = arch;
  auto put = [&mp](const std::string& name, Tensor t) {
    mp.params.emplace(name, std::move(t));
  };

  // Encoder blocks: 3x3 stride-2 conv plus 1x1 stride-2 projection skip.
  std::size_t cin = 1;
  for (std::size_t b = 0; b < arch.blocks; ++b) {
    const std::size_t cout = arch.channels_at(b);
    const std::string p = "enc.b" + std::to_string(b);
    put(p + ".conv.w", detail::he_conv(rng, cout, cin, 3));
    put(p + ".skip.w", detail::he_conv(rng, cout, cin, 1));
    cin = cout;
  }
  const std::size_t flat = arch.final_channels() * arch.final_side() *
                           arch.final_side();
  put("enc.mu.w", detail::he_affine_w(rng, arch.latent_dim, flat));
  put("enc.mu.b", detail::zero_bias(arch.latent_dim));
  put("enc.logvar.w", detail::he_affine_w(rng, arch.latent_dim, flat));
  put("enc.logvar.b", detail::zero_bias(arch.latent_dim));

  // Decoder: affine head to the coarsest feature map, then mirrored
  // transposed-conv blocks (4x4 main path, 2x2 skip).
  put("dec.head.w", detail::he_affine_w(rng, flat, arch.latent_dim));
  put("dec.head.b", detail::zero_bias(flat));
  for (std::size_t b = 0; b < arch.blocks; ++b) {
    const std::size_t c1 = arch.channels_at(arch.blocks - 1 - b);
    const std::size_t c2 =
        (b + 1 == arch.blocks) ? 1 : arch.channels_at(arch.blocks - 2 - b);
    const std::string p = "dec.b" + std::to_string(b);
    Tensor main = Tensor::zeros({c1, c2, 4, 4}, true);
    {
      const double scale = std::sqrt(2.0 / (static_cast<double>(c1) * 16));
      for (auto& v : main.values) v = rng.normal() * scale;
    }
    put(p + ".tconv.w", std::move(main));
    Tensor skip = Tensor::zeros({c1, c2, 2, 2}, true);
    {
      const double scale = std::sqrt(2.0 / (static_cast<double>(c1) * 4));
      for (auto& v : skip.values) v = rng.normal() * scale;
    }
    put(p + ".skip.w", std::move(skip));
  }

  // Regressor.
  if (arch.latent_spatial) {
    const std::size_t c = arch.latent_channels;
    for (std::size_t b = 0; b < arch.reg_blocks; ++b) {
      const std::string p = "reg.b" + std::to_string(b);
      put(p + ".conv.w", detail::he_conv(rng, c, c, 3));
    }
    put("reg.fc1.w", detail::he_affine_w(rng, arch.reg_hidden, c));
    put("reg.fc1.b", detail::zero_bias(arch.reg_hidden));
  } else {
    put("reg.in.w",
        detail::he_affine_w(rng, arch.reg_hidden, arch.latent_dim));
    put("reg.in.b", detail::zero_bias(arch.reg_hidden));
    for (std::size_t b = 0; b < arch.reg_blocks; ++b) {
      const std::string p = "reg.b" + std::to_string(b);
      put(p + ".fc1.w",
          detail::he_affine_w(rng, arch.reg_hidden, arch.reg_hidden));
      put(p + ".fc1.b", detail::zero_bias(arch.reg_hidden));
      put(p + ".fc2.w",
          detail::he_affine_w(rng, arch.reg_hidden, arch.reg_hidden));
      put(p + ".fc2.b", detail::zero_bias(arch.reg_hidden));
    }
    put("reg.fc1.w",
        detail::he_affine_w(rng, arch.reg_hidden, arch.reg_hidden));
    put("reg.fc1.b", detail::zero_bias(arch.reg_hidden));
  }
  put("reg.out.w", detail::he_affine_w(rng, 3, arch.reg_hidden));
  put("reg.out.b", detail::zero_bias(3));
  return mp;
}

// Parameter tensors registered as leaves of a graph.
struct ParamNodes {
  std::map<std::string, NodeId> id;

  NodeId at(const std::string& name) const {
    auto it = id.find(name);
    if (it == id.end())
      throw GraphError("param node '" + name + "' not registered");
    return it->second;
  }
};

inline ParamNodes register_params(Graph& g, const ModelParams& mp) {
  ParamNodes pn;
  for (const auto& [name, t] : mp.params) pn.id.emplace(name, g.leaf(t));
  return pn;
}

struct LatentNodes {
  NodeId mu;
  NodeId log_var;
};

// f_E: image -> (mu, log_var). Accepts [n,n] or [1,n,n] images.
inline LatentNodes encode_nodes(Graph& g, NodeId x, const ParamNodes& pn,
                                const Arch& arch) {
  const Tensor& tx = g.tensor(x);
  NodeId h = x;
  if (tx.shape == Shape{arch.n, arch.n}) {
    h = g.reshape(x, {1, arch.n, arch.n});
  } else if (tx.shape != Shape{1, arch.n, arch.n}) {
    throw ShapeError("encode: image shape " + shape_str(tx.shape) +
                     " does not match arch side " + std::to_string(arch.n));
  }
  for (std::size_t b = 0; b < arch.blocks; ++b) {
    const std::string p = "enc.b" + std::to_string(b);
    NodeId main = g.conv2d(h, pn.at(p + ".conv.w"), 2, 1);
    NodeId skip = g.conv2d(h, pn.at(p + ".skip.w"), 2, 0);
    h = g.relu(g.add(main, skip));
  }
  const std::size_t flat =
      arch.final_channels() * arch.final_side() * arch.final_side();
  NodeId hf = g.reshape(h, {flat});
  NodeId mu = g.affine(hf, pn.at("enc.mu.w"), pn.at("enc.mu.b"));
  NodeId lv = g.affine(hf, pn.at("enc.logvar.w"), pn.at("enc.logvar.b"));
  return {mu, lv};
}

// Reparameterized sample z = mu + exp(log_var / 2) * eps. Gradients flow to
// mu and log_var; eps enters as a non-grad leaf.
inline NodeId sample_latent_node(Graph& g, const LatentNodes& q, NodeId eps) {
  const Shape& s = g.tensor(q.mu).shape;
  if (g.tensor(eps).shape != s)
    throw ShapeError("sample_latent: noise shape " +
                     shape_str(g.tensor(eps).shape) + " != latent shape " +
                     shape_str(s));
  NodeId half = g.constant(s, 0.5);
  NodeId lambda = g.exp(g.mul(q.log_var, half));
  return g.add(q.mu, g.mul(lambda, eps));
}

// f_D: latent -> image [n,n].
inline NodeId decode_nodes(Graph& g, NodeId z, const ParamNodes& pn,
                           const Arch& arch) {
  if (g.tensor(z).shape != Shape{arch.latent_dim})
    throw ShapeError("decode: latent shape " +
                     shape_str(g.tensor(z).shape) + " != [" +
                     std::to_string(arch.latent_dim) + "]");
  const std::size_t m = arch.final_side();
  const std::size_t c = arch.final_channels();
  NodeId h = g.affine(z, pn.at("dec.head.w"), pn.at("dec.head.b"));
  h = g.relu(g.reshape(h, {c, m, m}));
  for (std::size_t b = 0; b < arch.blocks; ++b) {
    const std::string p = "dec.b" + std::to_string(b);
    NodeId main = g.conv2d_transpose(h, pn.at(p + ".tconv.w"), 2, 1);
    NodeId skip = g.conv2d_transpose(h, pn.at(p + ".skip.w"), 2, 0);
    h = g.add(main, skip);
    if (b + 1 < arch.blocks) h = g.relu(h);  // final layer stays linear
  }
  return g.reshape(h, {arch.n, arch.n});
}

// f_R: latent -> three bit probabilities.
inline NodeId regress_nodes(Graph& g, NodeId z, const ParamNodes& pn,
                            const Arch& arch) {
  if (g.tensor(z).shape != Shape{arch.latent_dim})
    throw ShapeError("regress: latent shape " +
                     shape_str(g.tensor(z).shape) + " != [" +
                     std::to_string(arch.latent_dim) + "]");
  NodeId h;
  if (arch.latent_spatial) {
    const std::size_t s = arch.latent_side, c = arch.latent_channels;
    h = g.reshape(z, {c, s, s});
    for (std::size_t b = 0; b < arch.reg_blocks; ++b) {
      const std::string p = "reg.b" + std::to_string(b);
      h = g.relu(g.add(h, g.conv2d(h, pn.at(p + ".conv.w"), 1, 1)));
    }
    h = g.reshape(g.avg_pool2d(h, static_cast<int>(s)), {c});
    h = g.relu(g.affine(h, pn.at("reg.fc1.w"), pn.at("reg.fc1.b")));
  } else {
    h = g.relu(g.affine(z, pn.at("reg.in.w"), pn.at("reg.in.b")));
    for (std::size_t b = 0; b < arch.reg_blocks; ++b) {
      const std::string p = "reg.b" + std::to_string(b);
      NodeId u = g.relu(g.affine(h, pn.at(p + ".fc1.w"), pn.at(p + ".fc1.b")));
      u = g.affine(u, pn.at(p + ".fc2.w"), pn.at(p + ".fc2.b"));
      h = g.relu(g.add(h, u));
    }
    h = g.relu(g.affine(h, pn.at("reg.fc1.w"), pn.at("reg.fc1.b")));
  }
  return g.sigmoid(g.affine(h, pn.at("reg.out.w"), pn.at("reg.out.b")));
}

// ---- plain (non-graph) entry points ---------------------------------------

inline GaussianLatent encode(const Tensor& x, const ModelParams& mp) {
  Graph g;
  ParamNodes pn = register_params(g, mp);
  LatentNodes q = encode_nodes(g, g.leaf(x), pn, mp.arch);
  return GaussianLatent(g.tensor(q.mu).values, g.tensor(q.log_var).values);
}

inline Tensor sample_latent(const GaussianLatent& q,
                            const std::vector<double>& noise) {
  if (noise.size() != q.dim())
    throw ShapeError("sample_latent: noise length " +
                     std::to_string(noise.size()) + " != latent dim " +
                     std::to_string(q.dim()));
  std::vector<double> z(q.dim());
  for (std::size_t k = 0; k < z.size(); ++k)
    z[k] = q.mu[k] + std::exp(0.5 * q.log_var[k]) * noise[k];
  return Tensor({q.dim()}, std::move(z));
}

inline Tensor decode(const Tensor& z, const ModelParams& mp) {
  Graph g;
  ParamNodes pn = register_params(g, mp);
  NodeId out = decode_nodes(g, g.leaf(z), pn, mp.arch);
  return Tensor(g.tensor(out).shape, g.tensor(out).values);
}

// A saturated sigmoid can round to exactly 0 or 1 in double precision; nudge
// into the open interval so downstream probability contracts hold.
inline double clamp_probability(double p) {
  constexpr double eps = 1e-12;
  return std::min(std::max(p, eps), 1.0 - eps);
}

inline OrdinalPrediction regress(const Tensor& z, const ModelParams& mp) {
  Graph g;
  ParamNodes pn = register_params(g, mp);
  NodeId out = regress_nodes(g, g.leaf(z), pn, mp.arch);
  const auto& v = g.tensor(out).values;
  return OrdinalPrediction({clamp_probability(v[0]), clamp_probability(v[1]),
                            clamp_probability(v[2])});
}

// Deterministic inference: posterior mean -> bit probabilities -> expected
// severity. No sampling is involved.
inline double predict_severity(const ModelParams& mp, const Tensor& image) {
  Graph g;
  ParamNodes pn = register_params(g, mp);
  LatentNodes q = encode_nodes(g, g.leaf(image), pn, mp.arch);
  NodeId out = regress_nodes(g, q.mu, pn, mp.arch);
  const auto& v = g.tensor(out).values;
  OrdinalPrediction pred({clamp_probability(v[0]), clamp_probability(v[1]),
                          clamp_probability(v[2])});
  return expected_severity(pred);
}

}  // namespace ssvr

#endif  // SSVR_MODEL_HPP
