#include <catch2/catch_amalgamated.hpp>

#include <stdlib.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ssvr/data.hpp"
#include "ssvr/eval.hpp"
#include "ssvr/model.hpp"
#include "ssvr/optim.hpp"

namespace {

using namespace ssvr;

Arch tiny_arch() {
  Arch a;
  a.n = 8;
  a.latent_dim = 4;
  a.blocks = 2;
  a.base_channels = 2;
  a.reg_hidden = 8;
  a.reg_blocks = 1;
  a.validate();
  return a;
}

struct Bundle {
  std::vector<ImageRecord> store;
  DatasetSlice labeled, unlabeled, validation;
};

// Class s fills the image around 0.12 + 0.22*s with +-0.04 uniform speckle.
Bundle make_bundle(const Arch& arch, std::size_t n_lab, std::size_t n_unlab,
                   std::size_t n_val, std::uint64_t seed) {
  Bundle b;
  b.store.reserve(n_lab + n_unlab + n_val);
  Rng rng(seed * 0x9E3779B9ULL + 17);
  std::size_t idx = 0;
  auto make = [&](int pixel_sev, std::optional<int> label, std::size_t side) {
    ImageRecord r;
    r.image_id = "img" + std::to_string(idx);
    r.patient_id = "pat" + std::to_string(idx);
    ++idx;
    r.pixels = Tensor::zeros({side, side});
    const double base = 0.12 + 0.22 * static_cast<double>(pixel_sev);
    for (auto& v : r.pixels.values)
      v = std::clamp(base + 0.04 * rng.uniform(-1.0, 1.0), 0.0, 1.0);
    r.severity = label;
    b.store.push_back(std::move(r));
  };
  for (std::size_t i = 0; i < n_lab; ++i) {
    const int s = static_cast<int>(i % 4);
    make(s, s, arch.n);
  }
  for (std::size_t i = 0; i < n_unlab; ++i)
    make(static_cast<int>(i % 4), {}, arch.n);
  for (std::size_t i = 0; i < n_val; ++i) {
    const int s = static_cast<int>(i % 4);
    make(s, s, arch.n);
  }
  for (std::size_t i = 0; i < n_lab; ++i) b.labeled.push_back(&b.store[i]);
  for (std::size_t i = 0; i < n_unlab; ++i)
    b.unlabeled.push_back(&b.store[n_lab + i]);
  for (std::size_t i = 0; i < n_val; ++i)
    b.validation.push_back(&b.store[n_lab + n_unlab + i]);
  return b;
}

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  return a.empty() ||
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

bool double_bits_equal(double a, double b) {
  return std::memcmp(&a, &b, sizeof(double)) == 0;
}

bool params_bits_equal(const ModelParams& a, const ModelParams& b) {
  if (a.params.size() != b.params.size()) return false;
  for (const auto& [name, t] : a.params) {
    auto it = b.params.find(name);
    if (it == b.params.end() || t.shape != it->second.shape ||
        !bits_equal(t.values, it->second.values))
      return false;
  }
  return true;
}

bool fit_results_bits_equal(const FitResult& a, const FitResult& b) {
  if (a.log.size() != b.log.size() || a.early_stopped != b.early_stopped)
    return false;
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    if (a.log[i].epoch != b.log[i].epoch) return false;
    if (a.log[i].val_rms.has_value() != b.log[i].val_rms.has_value())
      return false;
    if (a.log[i].val_rms &&
        !double_bits_equal(*a.log[i].val_rms, *b.log[i].val_rms))
      return false;
  }
  return params_bits_equal(a.last.params, b.last.params) &&
         params_bits_equal(a.best.params, b.best.params) &&
         double_bits_equal(a.last.val_rms, b.last.val_rms) &&
         a.last.epoch == b.last.epoch;
}

TrainConfig small_config(const Arch& arch, std::size_t minibatch,
                         std::size_t max_epochs, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.minibatch_size = minibatch;
  cfg.max_epochs = max_epochs;
  cfg.validation_every = 1;
  cfg.patience = 100;
  cfg.seed = seed;
  return cfg.resolved(arch);
}

// Scoped environment override that restores the previous value on exit.
struct EnvGuard {
  std::string name;
  std::optional<std::string> saved;
  EnvGuard(const std::string& n, const char* value) : name(n) {
    if (const char* old = ::getenv(name.c_str())) saved = old;
    if (value)
      ::setenv(name.c_str(), value, 1);
    else
      ::unsetenv(name.c_str());
  }
  ~EnvGuard() {
    if (saved)
      ::setenv(name.c_str(), saved->c_str(), 1);
    else
      ::unsetenv(name.c_str());
  }
};

struct TempDir {
  std::filesystem::path dir;
  TempDir() {
    static int counter = 0;
    dir = std::filesystem::temp_directory_path() /
          ("ssvr_eval_" + std::to_string(::getpid()) + "_" +
           std::to_string(counter++));
    std::filesystem::create_directories(dir);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(dir, ec);
  }
  std::string path(const std::string& name) const {
    return (dir / name).string();
  }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

}  // namespace

// ---- rms ------------------------------------------------------------------------

TEST_CASE("rms error matches hand-computed values", "[eval][metrics]") {
  CHECK(rms_error({1.0, 2.0}, {0, 2}) ==
        Catch::Approx(0.70710678118654752).epsilon(1e-14));
  CHECK(rms_error({0.0, 1.0, 2.0, 3.0}, {0, 1, 2, 3}) == 0.0);
  CHECK(rms_error({0.25, 1.25, 2.25}, {0, 1, 2}) ==
        Catch::Approx(0.25).epsilon(1e-14));
  CHECK(rms_error({3.5}, {1}) == Catch::Approx(2.5).epsilon(1e-14));
}

TEST_CASE("rms error rejects malformed input", "[eval][metrics][errors]") {
  REQUIRE_THROWS_WITH(rms_error({}, {}),
                      Catch::Matchers::ContainsSubstring("empty input"));
  REQUIRE_THROWS_WITH(rms_error({1.0, 2.0}, {1}),
                      Catch::Matchers::ContainsSubstring("length mismatch"));
}

// ---- pearson ---------------------------------------------------------------------

TEST_CASE("pearson correlation matches hand-computed values", "[eval][metrics]") {
  CHECK(pearson_cc({1, 2, 3}, {1, 2, 4}) ==
        Catch::Approx(0.98198050606196585).epsilon(1e-13));
  const std::vector<double> a = {0.5, -1.25, 3.0, 2.0};
  std::vector<double> pos(a), neg(a);
  for (auto& v : pos) v = 2.0 * v + 1.0;
  for (auto& v : neg) v = -0.5 * v + 7.0;
  CHECK(pearson_cc(a, pos) == Catch::Approx(1.0).margin(1e-12));
  CHECK(pearson_cc(a, neg) == Catch::Approx(-1.0).margin(1e-12));
  // Orthogonal residuals: zero correlation by construction.
  CHECK(pearson_cc({-1, 0, 1}, {1, -2, 1}) == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("pearson correlation rejects degenerate input", "[eval][metrics][errors]") {
  REQUIRE_THROWS_WITH(pearson_cc({1, 2}, {1, 2, 3}),
                      Catch::Matchers::ContainsSubstring("length mismatch"));
  REQUIRE_THROWS_WITH(pearson_cc({1}, {1}),
                      Catch::Matchers::ContainsSubstring("at least 2"));
  REQUIRE_THROWS_AS(pearson_cc({2, 2, 2}, {1, 2, 3}), NumericalError);
  REQUIRE_THROWS_AS(pearson_cc({1, 2, 3}, {5, 5, 5}), NumericalError);
}

// ---- brute-force metric oracles --------------------------------------------------

TEST_CASE("metrics agree with long-double reference over 1000 random cases",
          "[eval][metrics][property]") {
  Rng rng(0xE7A1);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t len = 2 + rng.below(19);
    std::vector<double> pred(len), b(len);
    std::vector<int> truth(len);
    for (std::size_t i = 0; i < len; ++i) {
      pred[i] = rng.uniform(-4.0, 4.0);
      b[i] = rng.uniform(-4.0, 4.0);
      truth[i] = static_cast<int>(rng.below(4));
    }

    // Reference RMS: reverse-order long-double accumulation.
    long double sq = 0.0L;
    for (std::size_t i = len; i-- > 0;) {
      const long double d =
          static_cast<long double>(pred[i]) - static_cast<long double>(truth[i]);
      sq += d * d;
    }
    const double rms_ref =
        static_cast<double>(std::sqrt(sq / static_cast<long double>(len)));
    const double rms_got = rms_error(pred, truth);
    INFO("trial " << trial << " len " << len);
    REQUIRE(std::abs(rms_got - rms_ref) <= 1e-10 * (1.0 + std::abs(rms_ref)));

    // Reference correlation: one-pass raw moments in long double.
    long double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
    for (std::size_t i = len; i-- > 0;) {
      const long double x = pred[i], y = b[i];
      sa += x;
      sb += y;
      saa += x * x;
      sbb += y * y;
      sab += x * y;
    }
    const long double n = static_cast<long double>(len);
    const long double cov = sab - sa * sb / n;
    const long double va = saa - sa * sa / n;
    const long double vb = sbb - sb * sb / n;
    const double cc_ref = static_cast<double>(cov / std::sqrt(va * vb));
    const double cc_got = pearson_cc(pred, b);
    REQUIRE(std::abs(cc_got - cc_ref) <= 1e-10);
  }
}

// ---- small formatting helpers -----------------------------------------------------

TEST_CASE("g17 formatting round-trips doubles exactly", "[eval][format]") {
  Rng rng(404);
  for (int i = 0; i < 200; ++i) {
    const double v = rng.uniform(-1e6, 1e6) * std::pow(10.0, rng.uniform(-12.0, 12.0));
    const double back = std::strtod(format_g17(v).c_str(), nullptr);
    REQUIRE(double_bits_equal(v, back));
  }
  CHECK(format_g17(0.5) == "0.5");
  CHECK(format_g17(-2.0) == "-2");
}

TEST_CASE("median splits sorted values in half", "[eval][metrics]") {
  CHECK(median_of({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median_of({4.0, 1.0, 3.0, 2.0}) == 2.5);
  CHECK(median_of({5.0}) == 5.0);
  REQUIRE_THROWS_AS(median_of({}), DataError);
}

TEST_CASE("metric rows serialize to stable CSV", "[eval][format]") {
  CHECK(metrics_csv_header() == "method,seed,rms,cc,n\n");
  Metrics m;
  m.rms = 0.5;
  m.pearson = -0.25;
  m.n = 7;
  CHECK(metrics_csv_line("vae_r", 42, m) == "vae_r,42,0.5,-0.25,7\n");
}

TEST_CASE("per-class dumps write one row per prediction", "[eval][format]") {
  Metrics m;
  m.per_class_predictions[0] = {0.1};
  m.per_class_predictions[2] = {1.9, 2.25};
  m.per_class_predictions[3] = {3.0};
  TempDir tmp;
  write_per_class_csv(tmp.path("pc.csv"), m);
  CHECK(slurp(tmp.path("pc.csv")) ==
        "true_class,predicted_severity\n"
        "0,0.10000000000000001\n"
        "2,1.8999999999999999\n"
        "2,2.25\n"
        "3,3\n");
  REQUIRE_THROWS_WITH(
      write_per_class_csv("/nonexistent_dir_zz/x.csv", m),
      Catch::Matchers::ContainsSubstring("cannot write"));
}

// ---- evaluate ---------------------------------------------------------------------

TEST_CASE("evaluate reproduces a serial posterior-mean reference", "[eval]") {
  const Arch arch = tiny_arch();
  const ModelParams mp = init_params(arch, 21);
  Bundle b = make_bundle(arch, 12, 0, 0, 5);

  // Serial reference, computed without the evaluate() plumbing.
  std::vector<double> ref_preds;
  std::vector<int> ref_labels;
  std::vector<double> ref_labels_d;
  for (const ImageRecord* rec : b.labeled) {
    ref_preds.push_back(predict_severity(mp, rec->pixels));
    ref_labels.push_back(*rec->severity);
    ref_labels_d.push_back(static_cast<double>(*rec->severity));
  }

  EnvGuard guard("SSVR_THREADS", "1");
  const Metrics m = evaluate(mp, b.labeled);
  CHECK(m.n == 12);
  CHECK(double_bits_equal(m.rms, rms_error(ref_preds, ref_labels)));
  CHECK(double_bits_equal(m.pearson, pearson_cc(ref_preds, ref_labels_d)));

  // Per-class regrouping preserves values and counts.
  std::size_t regrouped = 0;
  for (int c = 0; c < 4; ++c) {
    for (double p : m.per_class_predictions[static_cast<std::size_t>(c)]) {
      bool found = false;
      for (std::size_t i = 0; i < ref_preds.size(); ++i)
        found = found || (ref_labels[i] == c && double_bits_equal(ref_preds[i], p));
      CHECK(found);
      ++regrouped;
    }
  }
  CHECK(regrouped == 12);

  SECTION("predictions stay within the severity scale") {
    for (int c = 0; c < 4; ++c)
      for (double p : m.per_class_predictions[static_cast<std::size_t>(c)]) {
        CHECK(p >= 0.0);
        CHECK(p <= 3.0);
      }
  }
}

TEST_CASE("evaluate is independent of the thread count", "[eval][threads]") {
  const Arch arch = tiny_arch();
  const ModelParams mp = init_params(arch, 33);
  Bundle b = make_bundle(arch, 17, 0, 0, 9);

  Metrics one, three, silly;
  {
    EnvGuard guard("SSVR_THREADS", "1");
    one = evaluate(mp, b.labeled);
  }
  {
    EnvGuard guard("SSVR_THREADS", "3");
    three = evaluate(mp, b.labeled);
  }
  {
    EnvGuard guard("SSVR_THREADS", "64");  // more threads than images
    silly = evaluate(mp, b.labeled);
  }
  CHECK(double_bits_equal(one.rms, three.rms));
  CHECK(double_bits_equal(one.pearson, three.pearson));
  CHECK(double_bits_equal(one.rms, silly.rms));
  for (int c = 0; c < 4; ++c) {
    CHECK(bits_equal(one.per_class_predictions[static_cast<std::size_t>(c)],
                     three.per_class_predictions[static_cast<std::size_t>(c)]));
    CHECK(bits_equal(one.per_class_predictions[static_cast<std::size_t>(c)],
                     silly.per_class_predictions[static_cast<std::size_t>(c)]));
  }

  SECTION("an unparseable thread override falls back to the default") {
    EnvGuard guard("SSVR_THREADS", "banana");
    const Metrics m = evaluate(mp, b.labeled);
    CHECK(double_bits_equal(m.rms, one.rms));
  }
}

TEST_CASE("evaluate is a pure function of its inputs", "[eval]") {
  const Arch arch = tiny_arch();
  const ModelParams mp = init_params(arch, 2);
  Bundle b = make_bundle(arch, 9, 0, 0, 3);
  const Metrics m1 = evaluate(mp, b.labeled);
  const Metrics m2 = evaluate(mp, b.labeled);
  CHECK(double_bits_equal(m1.rms, m2.rms));
  CHECK(double_bits_equal(m1.pearson, m2.pearson));
}

TEST_CASE("evaluate center-crops oversized inputs", "[eval]") {
  const Arch arch = tiny_arch();
  const ModelParams mp = init_params(arch, 11);

  Bundle big;
  big.store.reserve(4);
  Rng rng(55);
  for (int i = 0; i < 4; ++i) {
    ImageRecord r;
    r.image_id = "big" + std::to_string(i);
    r.patient_id = "p";
    r.pixels = Tensor::zeros({12, 12});
    for (auto& v : r.pixels.values) v = rng.uniform();
    r.severity = i;
    big.store.push_back(std::move(r));
  }
  for (const auto& r : big.store) big.labeled.push_back(&r);

  EnvGuard guard("SSVR_THREADS", "1");
  const Metrics m = evaluate(mp, big.labeled);

  std::vector<double> ref_preds;
  std::vector<int> ref_labels;
  for (const ImageRecord* rec : big.labeled) {
    ref_preds.push_back(predict_severity(mp, center_crop(rec->pixels, arch.n)));
    ref_labels.push_back(*rec->severity);
  }
  CHECK(double_bits_equal(m.rms, rms_error(ref_preds, ref_labels)));
}

TEST_CASE("evaluate rejects empty and unlabeled slices", "[eval][errors]") {
  const Arch arch = tiny_arch();
  const ModelParams mp = init_params(arch, 1);
  REQUIRE_THROWS_WITH(evaluate(mp, {}),
                      Catch::Matchers::ContainsSubstring("empty dataset slice"));

  Bundle b = make_bundle(arch, 3, 1, 0, 4);
  DatasetSlice mixed = b.labeled;
  mixed.push_back(b.unlabeled[0]);
  REQUIRE_THROWS_WITH(evaluate(mp, mixed),
                      Catch::Matchers::ContainsSubstring("img3") &&
                          Catch::Matchers::ContainsSubstring("unlabeled"));
}

TEST_CASE("a constant predictor surfaces as a numerical error", "[eval][errors]") {
  const Arch arch = tiny_arch();
  ModelParams mp = init_params(arch, 3);
  // Zeroing the regressor output stage makes every prediction exactly 1.5.
  for (auto& [name, t] : mp.params)
    if (name.rfind("reg.out.", 0) == 0)
      std::fill(t.values.begin(), t.values.end(), 0.0);
  Bundle b = make_bundle(arch, 8, 0, 0, 6);
  REQUIRE_THROWS_AS(evaluate(mp, b.labeled), NumericalError);
}

// ---- the three training methods -----------------------------------------------------

TEST_CASE("the supervised baseline is the semi-supervised fit without unlabeled data",
          "[eval][baselines]") {
  const Arch arch = tiny_arch();
  const ModelParams init = init_params(arch, 77);
  Bundle b = make_bundle(arch, 8, 6, 4, 12);
  const TrainConfig cfg = small_config(arch, 4, 2, 3);

  const FitResult sup = train_supervised_baseline(init, b.labeled, b.validation, cfg);
  const FitResult ref = fit(init, b.labeled, {}, b.validation, cfg, UnlabeledPhase{});
  CHECK(fit_results_bits_equal(sup, ref));

  SECTION("and differs from the run that uses the unlabeled pool") {
    const FitResult semi =
        train_vae_r(init, b.labeled, b.unlabeled, b.validation, cfg);
    CHECK_FALSE(params_bits_equal(semi.last.params, sup.last.params));
  }
}

TEST_CASE("the semi-supervised method is the default-phase fit", "[eval][baselines]") {
  const Arch arch = tiny_arch();
  const ModelParams init = init_params(arch, 78);
  Bundle b = make_bundle(arch, 8, 6, 4, 13);
  const TrainConfig cfg = small_config(arch, 4, 2, 4);

  const FitResult a = train_vae_r(init, b.labeled, b.unlabeled, b.validation, cfg);
  const FitResult ref =
      fit(init, b.labeled, b.unlabeled, b.validation, cfg, UnlabeledPhase{});
  CHECK(fit_results_bits_equal(a, ref));
}

TEST_CASE("the entropy baseline forwards its weight and updates the regressor",
          "[eval][baselines]") {
  const Arch arch = tiny_arch();
  const ModelParams init = init_params(arch, 79);
  Bundle b = make_bundle(arch, 8, 6, 4, 14);
  const TrainConfig cfg = small_config(arch, 4, 2, 5);

  const FitResult em =
      train_em_baseline(init, b.labeled, b.unlabeled, b.validation, cfg, 0.3);
  UnlabeledPhase phase;
  phase.objective = Objective::EmEntropy;
  phase.entropy_weight = 0.3;
  phase.update_regressor = true;
  const FitResult ref =
      fit(init, b.labeled, b.unlabeled, b.validation, cfg, phase);
  CHECK(fit_results_bits_equal(em, ref));
  REQUIRE(ref.log.size() >= 2);
  REQUIRE(ref.log[1].unlabeled.has_value());
  CHECK(ref.log[1].unlabeled->entropy.has_value());

  SECTION("a negative weight is rejected up front") {
    REQUIRE_THROWS_WITH(
        train_em_baseline(init, b.labeled, b.unlabeled, b.validation, cfg, -0.1),
        Catch::Matchers::ContainsSubstring("non-negative"));
  }
}
