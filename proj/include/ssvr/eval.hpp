#ifndef SSVR_EVAL_HPP
#define SSVR_EVAL_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "ssvr/data.hpp"
#include "ssvr/errors.hpp"
#include "ssvr/model.hpp"
#include "ssvr/optim.hpp"

namespace ssvr {

inline std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---- metrics ----------------------------------------------------------------

inline double rms_error(const std::vector<double>& predicted,
                        const std::vector<int>& true_class) {
  if (predicted.empty()) throw DataError("rms_error: empty input");
  if (predicted.size() != true_class.size())
    throw DataError("rms_error: length mismatch");
  double sq = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double d = predicted[i] - static_cast<double>(true_class[i]);
    sq += d * d;
  }
  return std::sqrt(sq / static_cast<double>(predicted.size()));
}

inline double pearson_cc(const std::vector<double>& a,
                         const std::vector<double>& b) {
  if (a.size() != b.size()) throw DataError("pearson_cc: length mismatch");
  if (a.size() < 2) throw DataError("pearson_cc: need at least 2 samples");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0)
    throw NumericalError(
        "pearson_cc: correlation undefined for a constant vector");
  return sab / std::sqrt(saa * sbb);
}

struct Metrics {
  double rms = 0.0;
  double pearson = 0.0;
  std::array<std::vector<double>, 4> per_class_predictions;
  std::size_t n = 0;
};

namespace detail {

inline unsigned eval_thread_count(std::size_t jobs) {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  if (const char* env = std::getenv("SSVR_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) hw = static_cast<unsigned>(v);
  }
  if (jobs < hw) hw = static_cast<unsigned>(jobs);
  return hw == 0 ? 1 : hw;
}

}  // namespace detail

// Deterministic posterior-mean evaluation over a fully labeled slice. The
// per-image map may run on several threads (capped by SSVR_THREADS); the
// reduction is indexed, so the thread count never changes the result.
inline Metrics evaluate(const ModelParams& params, const DatasetSlice& slice) {
  if (slice.empty()) throw DataError("evaluate: empty dataset slice");
  for (const ImageRecord* rec : slice)
    if (!rec->severity)
      throw DataError("evaluate: image '" + rec->image_id + "' is unlabeled");

  const std::size_t n = slice.size();
  std::vector<double> preds(n);
  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      Tensor img = slice[i]->pixels;
      if (img.shape != Shape{params.arch.n, params.arch.n})
        img = center_crop(img, params.arch.n);
      preds[i] = predict_severity(params, img);
    }
  };
  const unsigned t = detail::eval_thread_count(n);
  if (t <= 1) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    for (unsigned k = 0; k < t; ++k) {
      const std::size_t lo = n * k / t, hi = n * (k + 1) / t;
      pool.emplace_back(work, lo, hi);
    }
    for (auto& th : pool) th.join();
  }

  Metrics m;
  m.n = n;
  std::vector<int> labels(n);
  std::vector<double> labels_d(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = *slice[i]->severity;
    labels_d[i] = static_cast<double>(labels[i]);
    m.per_class_predictions[static_cast<std::size_t>(labels[i])].push_back(
        preds[i]);
  }
  m.rms = rms_error(preds, labels);
  m.pearson = pearson_cc(preds, labels_d);
  return m;
}

inline std::string metrics_csv_header() { return "method,seed,rms,cc,n\n"; }

inline std::string metrics_csv_line(const std::string& method,
                                    std::uint64_t seed, const Metrics& m) {
  return csv_line({method, std::to_string(seed), format_g17(m.rms),
                   format_g17(m.pearson), std::to_string(m.n)});
}

// Per-class prediction dump for external plotting: one row per test image.
inline void write_per_class_csv(const std::string& path, const Metrics& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write per-class dump: " + path);
  out << "true_class,predicted_severity\n";
  for (int c = 0; c < 4; ++c)
    for (double p : m.per_class_predictions[static_cast<std::size_t>(c)])
      out << csv_line({std::to_string(c), format_g17(p)});
  if (!out) throw DataError("short write: " + path);
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw DataError("median of empty list");
  std::sort(v.begin(), v.end());
  const std::size_t k = v.size() / 2;
  return v.size() % 2 ? v[k] : 0.5 * (v[k - 1] + v[k]);
}

// ---- the three training methods ------------------------------------------------

// Joint semi-supervised model: unlabeled phase updates encoder and decoder.
inline FitResult train_vae_r(const ModelParams& init,
                             const DatasetSlice& labeled,
                             const DatasetSlice& unlabeled,
                             const DatasetSlice& validation,
                             const TrainConfig& cfg,
                             const Checkpoint* resume = nullptr) {
  return fit(init, labeled, unlabeled, validation, cfg, UnlabeledPhase{},
             resume);
}

// Same pipeline with the unlabeled set empty, isolating the contribution of
// the unlabeled data.
inline FitResult train_supervised_baseline(const ModelParams& init,
                                           const DatasetSlice& labeled,
                                           const DatasetSlice& validation,
                                           const TrainConfig& cfg,
                                           const Checkpoint* resume = nullptr) {
  return fit(init, labeled, {}, validation, cfg, UnlabeledPhase{}, resume);
}

// Entropy-minimization self-training: the unlabeled phase adds a weighted
// per-bit Bernoulli prediction entropy and updates all parameter groups.
inline FitResult train_em_baseline(const ModelParams& init,
                                   const DatasetSlice& labeled,
                                   const DatasetSlice& unlabeled,
                                   const DatasetSlice& validation,
                                   const TrainConfig& cfg,
                                   double entropy_weight,
                                   const Checkpoint* resume = nullptr) {
  if (entropy_weight < 0)
    throw DataError("em baseline: entropy_weight must be non-negative");
  UnlabeledPhase phase;
  phase.objective = Objective::EmEntropy;
  phase.entropy_weight = entropy_weight;
  phase.update_regressor = true;
  return fit(init, labeled, unlabeled, validation, cfg, phase, resume);
}

}  // namespace ssvr

#endif  // SSVR_EVAL_HPP
