#ifndef SSVR_OPTIM_HPP
#define SSVR_OPTIM_HPP

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ssvr/data.hpp"
#include "ssvr/errors.hpp"
#include "ssvr/loss.hpp"
#include "ssvr/model.hpp"
#include "ssvr/rng.hpp"
#include "ssvr/tensor.hpp"

namespace ssvr {

// ---- Adam -------------------------------------------------------------------

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0) || beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1 ||
        !(eps > 0))
      throw DataError("adam: invalid hyperparameters");
  }
};

struct AdamSlot {
  std::vector<double> m, v;
  std::uint64_t t = 0;
};

// Step counts are tracked per parameter: a parameter's bias correction
// advances only when that parameter is actually updated, so parameters that
// sit out a phase are unaffected by it.
struct AdamState {
  AdamConfig hyper;
  std::map<std::string, AdamSlot> slots;

  static AdamState init(const ModelParams& mp, const AdamConfig& hyper = {}) {
    hyper.validate();
    AdamState s;
    s.hyper = hyper;
    for (const auto& [name, t] : mp.params) {
      AdamSlot slot;
      slot.m.assign(t.values.size(), 0.0);
      slot.v.assign(t.values.size(), 0.0);
      s.slots.emplace(name, std::move(slot));
    }
    return s;
  }
};

inline void adam_step(ModelParams& params,
                      const std::map<std::string, std::vector<double>>& grads,
                      AdamState& state) {
  state.hyper.validate();
  const double lr = state.hyper.lr, b1 = state.hyper.beta1,
               b2 = state.hyper.beta2, eps = state.hyper.eps;
  for (const auto& [name, g] : grads) {
    auto pit = params.params.find(name);
    if (pit == params.params.end())
      throw ShapeError("adam: gradient for unknown parameter '" + name + "'");
    Tensor& theta = pit->second;
    if (g.size() != theta.values.size())
      throw ShapeError("adam: gradient size " + std::to_string(g.size()) +
                       " does not match parameter '" + name + "' (" +
                       std::to_string(theta.values.size()) + ")");
    AdamSlot& slot = state.slots[name];
    if (slot.m.empty() && slot.t == 0) {
      slot.m.assign(g.size(), 0.0);
      slot.v.assign(g.size(), 0.0);
    }
    if (slot.m.size() != g.size())
      throw ShapeError("adam: state size mismatch for parameter '" + name +
                       "'");
    ++slot.t;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(slot.t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(slot.t));
    for (std::size_t i = 0; i < g.size(); ++i) {
      slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g[i];
      slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = slot.m[i] / bc1;
      const double vhat = slot.v[i] / bc2;
      theta.values[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// ---- training configuration ----------------------------------------------------

struct TrainConfig {
  std::size_t minibatch_size = 16;
  std::size_t max_epochs = 200;
  std::size_t validation_every = 1;
  std::size_t patience = 10;  // validations without improvement before stopping
  std::uint64_t seed = 0;
  LossConfig loss;
  AdamConfig adam;
  AugmentParams augment;

  void validate() const {
    if (minibatch_size < 1) throw DataError("train: minibatch_size must be >= 1");
    if (validation_every < 1)
      throw DataError("train: validation_every must be >= 1");
    if (patience < 1) throw DataError("train: patience must be >= 1");
    adam.validate();
  }

  // Normalizers are definitional (latent size and pixel count), so training
  // always derives them from the architecture.
  TrainConfig resolved(const Arch& arch) const {
    TrainConfig c = *this;
    c.loss.kl_normalizer = static_cast<double>(arch.latent_dim);
    c.loss.recon_normalizer = static_cast<double>(arch.n * arch.n);
    c.loss.labeled_batch = c.minibatch_size;
    c.loss.unlabeled_batch = c.minibatch_size;
    c.loss.validate();
    c.validate();
    return c;
  }
};

// How the unlabeled phase behaves: the joint model leaves the regressor
// untouched; the entropy-minimization baseline adds a weighted prediction
// entropy and updates all parameter groups.
struct UnlabeledPhase {
  Objective objective = Objective::VaeR;
  double entropy_weight = 0.0;
  bool update_regressor = false;
};

// ---- epoch loop -----------------------------------------------------------------

namespace detail {

struct BreakdownAccum {
  double kl = 0, reg = 0, rec = 0, ent = 0, tot = 0, n = 0;
  bool has_reg = false, has_ent = false;

  void add(const LossBreakdown& b, std::size_t count) {
    const double c = static_cast<double>(count);
    kl += b.kl * c;
    rec += b.reconstruction * c;
    tot += b.total * c;
    if (b.regression) {
      reg += *b.regression * c;
      has_reg = true;
    }
    if (b.entropy) {
      ent += *b.entropy * c;
      has_ent = true;
    }
    n += c;
  }

  LossBreakdown mean() const {
    LossBreakdown b;
    b.kl = kl / n;
    b.reconstruction = rec / n;
    b.total = tot / n;
    if (has_reg) b.regression = reg / n;
    if (has_ent) b.entropy = ent / n;
    return b;
  }
};

inline void check_finite(const LossBreakdown& b, const char* phase,
                         std::uint64_t epoch) {
  auto bad = [&](const char* term) {
    throw NumericalError(std::string("non-finite ") + term + " loss in " +
                         phase + " phase at epoch " + std::to_string(epoch));
  };
  if (!std::isfinite(b.kl)) bad("kl");
  if (b.regression && !std::isfinite(*b.regression)) bad("regression");
  if (!std::isfinite(b.reconstruction)) bad("reconstruction");
  if (b.entropy && !std::isfinite(*b.entropy)) bad("entropy");
  if (!std::isfinite(b.total)) bad("total");
}

inline std::map<std::string, std::vector<double>> collect_grads(
    const Graph& g, const ParamNodes& pn, const ModelParams& mp,
    const std::function<bool(const std::string&)>& want) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& [name, id] : pn.id) {
    if (!want(name)) continue;
    const Tensor& t = g.tensor(id);
    if (t.grad)
      out.emplace(name, *t.grad);
    else
      out.emplace(name, std::vector<double>(t.values.size(), 0.0));
    (void)mp;
  }
  return out;
}

inline Tensor training_view(const ImageRecord& rec, const TrainConfig& cfg,
                            const Arch& arch, Rng& rng) {
  AugmentParams a = cfg.augment;
  if (a.crop_size == 0) a.crop_size = arch.n;
  Tensor img = augment(rec.pixels, rng, a);
  if (img.shape != Shape{arch.n, arch.n})
    throw ShapeError("training image for '" + rec.image_id + "' is " +
                     shape_str(img.shape) + ", model expects [" +
                     std::to_string(arch.n) + "," + std::to_string(arch.n) +
                     "]");
  return img;
}

}  // namespace detail

struct EpochStats {
  LossBreakdown labeled;
  std::optional<LossBreakdown> unlabeled;
  std::size_t labeled_minibatches = 0;
  std::size_t unlabeled_minibatches = 0;
};

// Observer invoked between the labeled and unlabeled phases of an epoch
// (after the last labeled update, before the first unlabeled one).
using PhaseObserver = std::function<void(const ModelParams&)>;

// One epoch: every labeled minibatch updates encoder, regressor, and decoder;
// then every unlabeled minibatch updates encoder and decoder (plus the
// regressor only for the entropy baseline).
inline EpochStats train_epoch(ModelParams& model, const DatasetSlice& labeled,
                              const DatasetSlice& unlabeled,
                              const TrainConfig& cfg, AdamState& state,
                              Rng& rng, const UnlabeledPhase& phase = {},
                              std::uint64_t epoch = 0,
                              const PhaseObserver& between_phases = {}) {
  cfg.validate();
  cfg.loss.validate();
  if (labeled.empty()) throw DataError("train: labeled set is empty");
  const Arch& arch = model.arch;
  NoiseSource noise = [&rng](std::size_t d) { return rng.normal_vector(d); };

  EpochStats stats;
  detail::BreakdownAccum acc_l, acc_u;

  std::vector<std::size_t> order(labeled.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  const std::size_t bl = cfg.loss.labeled_batch;
  for (std::size_t start = 0; start < order.size(); start += bl) {
    const std::size_t stop = std::min(order.size(), start + bl);
    Minibatch batch;
    for (std::size_t k = start; k < stop; ++k) {
      const ImageRecord& rec = *labeled[order[k]];
      batch.images.push_back(detail::training_view(rec, cfg, arch, rng));
      batch.labels.push_back(label_of(rec));
    }
    Graph g;
    ParamNodes pn = register_params(g, model);
    BatchLossNodes nodes =
        total_loss_nodes(g, batch, pn, arch, cfg.loss, noise);
    LossBreakdown b = nodes.breakdown(g);
    detail::check_finite(b, "labeled", epoch);
    g.backward(nodes.total);
    auto grads = detail::collect_grads(g, pn, model,
                                       [](const std::string&) { return true; });
    adam_step(model, grads, state);
    acc_l.add(b, stop - start);
    ++stats.labeled_minibatches;
  }
  stats.labeled = acc_l.mean();
  if (between_phases) between_phases(model);

  if (!unlabeled.empty()) {
    std::vector<std::size_t> uorder(unlabeled.size());
    for (std::size_t i = 0; i < uorder.size(); ++i) uorder[i] = i;
    rng.shuffle(uorder);
    const std::size_t bu = cfg.loss.unlabeled_batch;
    auto want = [&phase](const std::string& name) {
      return phase.update_regressor ||
             ModelParams::group_of(name) != ModelParams::Group::Regressor;
    };
    for (std::size_t start = 0; start < uorder.size(); start += bu) {
      const std::size_t stop = std::min(uorder.size(), start + bu);
      Minibatch batch;
      for (std::size_t k = start; k < stop; ++k) {
        const ImageRecord& rec = *unlabeled[uorder[k]];
        batch.images.push_back(detail::training_view(rec, cfg, arch, rng));
        batch.labels.push_back(std::nullopt);
      }
      Graph g;
      ParamNodes pn = register_params(g, model);
      BatchLossNodes nodes =
          total_loss_nodes(g, batch, pn, arch, cfg.loss, noise,
                           phase.objective, phase.entropy_weight);
      LossBreakdown b = nodes.breakdown(g);
      detail::check_finite(b, "unlabeled", epoch);
      g.backward(nodes.total);
      auto grads = detail::collect_grads(g, pn, model, want);
      adam_step(model, grads, state);
      acc_u.add(b, stop - start);
      ++stats.unlabeled_minibatches;
    }
    stats.unlabeled = acc_u.mean();
  }
  return stats;
}

// Deterministic posterior-mean validation error (no sampling, no RNG).
inline double validation_rms(const ModelParams& model,
                             const DatasetSlice& slice) {
  if (slice.empty()) throw DataError("validation set is empty");
  double sq = 0.0;
  for (const ImageRecord* rec : slice) {
    if (!rec->severity)
      throw DataError("validation image '" + rec->image_id + "' is unlabeled");
    Tensor img = rec->pixels;
    if (img.shape != Shape{model.arch.n, model.arch.n})
      img = center_crop(img, model.arch.n);
    const double pred = predict_severity(model, img);
    const double diff = pred - static_cast<double>(*rec->severity);
    sq += diff * diff;
  }
  return std::sqrt(sq / static_cast<double>(slice.size()));
}

// ---- checkpoints ------------------------------------------------------------------

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  ModelParams params;
  AdamState adam;
  std::uint64_t epoch = 0;      // completed epochs
  double val_rms = 0.0;         // validation RMS recorded for this snapshot
  std::uint64_t rng_seed = 0;   // counter-based stream: (seed, epoch index)
  std::uint64_t rng_next_epoch = 0;
};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

template <class T>
void put_pod(std::string& buf, T v) {
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.append(raw, sizeof(T));
}

inline void put_str(std::string& buf, const std::string& s) {
  put_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(s.size()));
  buf.append(s);
}

inline void put_doubles(std::string& buf, const std::vector<double>& v) {
  buf.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
}

struct ByteReader {
  const unsigned char* p;
  const unsigned char* end;
  std::string origin;

  void need(std::size_t n) const {
    if (static_cast<std::size_t>(end - p) < n)
      throw CheckpointCorruptError(origin + ": truncated checkpoint");
  }
  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, p, sizeof(T));
    p += sizeof(T);
    return v;
  }
  std::string str() {
    const std::uint32_t n = pod<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    return s;
  }
  std::vector<double> doubles(std::size_t n) {
    need(n * sizeof(double));
    std::vector<double> v(n);
    std::memcpy(v.data(), p, n * sizeof(double));
    p += n * sizeof(double);
    return v;
  }
};

inline std::uint32_t crc_of(const std::string& buf) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data()),
              static_cast<uInt>(buf.size()));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string buf;
  buf.append("SSVR");
  detail::put_pod<std::uint32_t>(buf, Checkpoint::kVersion);
  detail::put_str(buf, ckpt.params.arch.descriptor());
  detail::put_pod<std::uint64_t>(buf, ckpt.epoch);
  detail::put_pod<double>(buf, ckpt.val_rms);
  detail::put_pod<std::uint64_t>(buf, ckpt.rng_seed);
  detail::put_pod<std::uint64_t>(buf, ckpt.rng_next_epoch);
  detail::put_pod<std::uint32_t>(
      buf, static_cast<std::uint32_t>(ckpt.params.params.size()));
  for (const auto& [name, t] : ckpt.params.params) {
    detail::put_str(buf, name);
    detail::put_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape)
      detail::put_pod<std::uint64_t>(buf, static_cast<std::uint64_t>(d));
    detail::put_doubles(buf, t.values);
  }
  detail::put_pod<double>(buf, ckpt.adam.hyper.lr);
  detail::put_pod<double>(buf, ckpt.adam.hyper.beta1);
  detail::put_pod<double>(buf, ckpt.adam.hyper.beta2);
  detail::put_pod<double>(buf, ckpt.adam.hyper.eps);
  detail::put_pod<std::uint32_t>(
      buf, static_cast<std::uint32_t>(ckpt.adam.slots.size()));
  for (const auto& [name, slot] : ckpt.adam.slots) {
    detail::put_str(buf, name);
    detail::put_pod<std::uint64_t>(buf, slot.t);
    detail::put_pod<std::uint64_t>(buf, static_cast<std::uint64_t>(slot.m.size()));
    detail::put_doubles(buf, slot.m);
    detail::put_doubles(buf, slot.v);
  }
  detail::put_pod<std::uint32_t>(buf, detail::crc_of(buf));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("short write: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  if (buf.size() < 12 || buf.compare(0, 4, "SSVR") != 0)
    throw CheckpointCorruptError(path + ": not a checkpoint file");
  std::string body = buf.substr(0, buf.size() - 4);
  std::uint32_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 4, 4);
  if (detail::crc_of(body) != stored)
    throw CheckpointCorruptError(path + ": checksum mismatch");
  detail::ByteReader r{reinterpret_cast<const unsigned char*>(body.data()) + 4,
                       reinterpret_cast<const unsigned char*>(body.data()) +
                           body.size(),
                       path};
  const std::uint32_t version = r.pod<std::uint32_t>();
  if (version != Checkpoint::kVersion)
    throw CheckpointVersionError(path + ": checkpoint version " +
                                 std::to_string(version) + ", expected " +
                                 std::to_string(Checkpoint::kVersion));
  Checkpoint ckpt;
  ckpt.params.arch = Arch::from_descriptor(r.str());
  ckpt.epoch = r.pod<std::uint64_t>();
  ckpt.val_rms = r.pod<double>();
  ckpt.rng_seed = r.pod<std::uint64_t>();
  ckpt.rng_next_epoch = r.pod<std::uint64_t>();
  const std::uint32_t n_params = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_params; ++i) {
    std::string name = r.str();
    const std::uint32_t ndim = r.pod<std::uint32_t>();
    Shape shape(ndim);
    std::size_t count = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      shape[d] = static_cast<std::size_t>(r.pod<std::uint64_t>());
      count *= shape[d];
    }
    Tensor t(shape, r.doubles(count));
    t.requires_grad = true;
    ckpt.params.params.emplace(std::move(name), std::move(t));
  }
  ckpt.adam.hyper.lr = r.pod<double>();
  ckpt.adam.hyper.beta1 = r.pod<double>();
  ckpt.adam.hyper.beta2 = r.pod<double>();
  ckpt.adam.hyper.eps = r.pod<double>();
  const std::uint32_t n_slots = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_slots; ++i) {
    std::string name = r.str();
    AdamSlot slot;
    slot.t = r.pod<std::uint64_t>();
    const std::uint64_t len = r.pod<std::uint64_t>();
    slot.m = r.doubles(len);
    slot.v = r.doubles(len);
    ckpt.adam.slots.emplace(std::move(name), std::move(slot));
  }
  if (r.p != r.end)
    throw CheckpointCorruptError(path + ": trailing bytes after checkpoint");
  return ckpt;
}

// ---- fit -------------------------------------------------------------------------

struct EpochLog {
  std::uint64_t epoch = 0;  // 0 is the pre-training evaluation row
  std::optional<LossBreakdown> labeled;
  std::optional<LossBreakdown> unlabeled;
  std::optional<double> val_rms;
};

struct FitResult {
  Checkpoint best;  // lowest validation RMS seen (from this run's start)
  Checkpoint last;  // state after the final epoch, for resuming
  std::vector<EpochLog> log;
  bool early_stopped = false;
};

// Trains until max_epochs or until validation RMS has not improved for
// `patience` consecutive validations; returns the best checkpoint.
inline FitResult fit(const ModelParams& init, const DatasetSlice& labeled,
                     const DatasetSlice& unlabeled,
                     const DatasetSlice& validation, const TrainConfig& cfg0,
                     const UnlabeledPhase& phase = {},
                     const Checkpoint* resume = nullptr,
                     const PhaseObserver& between_phases = {}) {
  const TrainConfig cfg = cfg0.resolved(init.arch);
  if (validation.empty()) throw DataError("fit: validation set is empty");

  ModelParams model = resume ? resume->params : init;
  if (resume && resume->params.arch.descriptor() != init.arch.descriptor())
    throw DataError("resume checkpoint architecture '" +
                    resume->params.arch.descriptor() +
                    "' does not match configured '" + init.arch.descriptor() +
                    "'");
  AdamState state = resume ? resume->adam : AdamState::init(model, cfg.adam);
  std::uint64_t epoch = resume ? resume->epoch : 0;

  auto snapshot = [&](double rms) {
    Checkpoint c;
    c.params = model;
    c.adam = state;
    c.epoch = epoch;
    c.val_rms = rms;
    c.rng_seed = cfg.seed;
    c.rng_next_epoch = epoch;
    return c;
  };

  FitResult res;
  double current_rms =
      resume ? resume->val_rms : validation_rms(model, validation);
  double best_rms = current_rms;
  res.best = snapshot(current_rms);
  {
    EpochLog row;
    row.epoch = epoch;
    row.val_rms = current_rms;
    res.log.push_back(row);
  }

  std::size_t stale_validations = 0;
  while (epoch < cfg.max_epochs) {
    Rng rng = Rng::stream(cfg.seed, epoch);
    EpochStats stats = train_epoch(model, labeled, unlabeled, cfg, state, rng,
                                   phase, epoch + 1, between_phases);
    ++epoch;
    EpochLog row;
    row.epoch = epoch;
    row.labeled = stats.labeled;
    row.unlabeled = stats.unlabeled;
    const bool validate =
        epoch % cfg.validation_every == 0 || epoch == cfg.max_epochs;
    if (validate) {
      current_rms = validation_rms(model, validation);
      row.val_rms = current_rms;
      if (current_rms < best_rms) {
        best_rms = current_rms;
        res.best = snapshot(current_rms);
        stale_validations = 0;
      } else {
        ++stale_validations;
      }
    }
    res.log.push_back(row);
    if (validate && stale_validations >= cfg.patience) {
      res.early_stopped = true;
      break;
    }
  }
  res.last = snapshot(current_rms);
  return res;
}

}  // namespace ssvr

#endif  // SSVR_OPTIM_HPP
