#ifndef SSVR_DATA_HPP
#define SSVR_DATA_HPP

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ssvr/csv.hpp"
#include "ssvr/errors.hpp"
#include "ssvr/image_io.hpp"
#include "ssvr/model.hpp"
#include "ssvr/rng.hpp"
#include "ssvr/tensor.hpp"

namespace ssvr {

// ---- dataset ----------------------------------------------------------------

struct ImageRecord {
  std::string image_id;
  std::string patient_id;
  Tensor pixels;                      // [H,W], values in [0,1]
  std::optional<int> severity;        // 0..3 when labeled
  std::optional<std::string> report;
  bool cohort = true;
};

struct Dataset {
  std::vector<ImageRecord> records;

  std::size_t size() const { return records.size(); }
  std::size_t labeled_count() const {
    std::size_t n = 0;
    for (const auto& r : records) n += r.severity.has_value();
    return n;
  }
  const ImageRecord* find(const std::string& image_id) const {
    for (const auto& r : records)
      if (r.image_id == image_id) return &r;
    return nullptr;
  }
};

using DatasetSlice = std::vector<const ImageRecord*>;

inline OrdinalLabel label_of(const ImageRecord& r) {
  if (!r.severity)
    throw DataError("image '" + r.image_id + "' has no severity label");
  return ordinal_encode(*r.severity);
}

// ---- manifest loading ---------------------------------------------------------

inline const std::vector<std::string>& manifest_header() {
  static const std::vector<std::string> h = {"image_id", "patient_id",
                                             "severity", "report_text"};
  return h;
}

inline Dataset load_manifest(const std::string& images_dir,
                             const std::string& labels_csv) {
  std::vector<CsvRow> rows = read_csv_file(labels_csv);
  if (rows.empty()) throw DataError(labels_csv + ": empty manifest");
  const auto& head = rows.front().fields;
  bool has_cohort = head.size() == 5 && head[4] == "cohort";
  if ((head.size() != 4 && !has_cohort) || head.size() < 4 ||
      !std::equal(manifest_header().begin(), manifest_header().end(),
                  head.begin()))
    throw DataError(labels_csv + ":1: expected header "
                    "image_id,patient_id,severity,report_text[,cohort]");
  Dataset ds;
  std::map<std::string, std::size_t> seen;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& row = rows[i];
    const std::string at = labels_csv + ":" + std::to_string(row.line);
    if (row.fields.size() < 3 || row.fields.size() > (has_cohort ? 5u : 4u))
      throw DataError(at + ": expected " +
                      std::to_string(has_cohort ? 5 : 4) + " fields, got " +
                      std::to_string(row.fields.size()));
    ImageRecord rec;
    rec.image_id = row.fields[0];
    rec.patient_id = row.fields[1];
    if (rec.image_id.empty() || rec.patient_id.empty())
      throw DataError(at + ": image_id and patient_id must be non-empty");
    if (!seen.emplace(rec.image_id, row.line).second)
      throw DataError(at + ": duplicate image_id '" + rec.image_id + "'");
    const std::string& sev = row.fields[2];
    if (!sev.empty()) {
      bool digits = !sev.empty() &&
                    std::all_of(sev.begin(), sev.end(),
                                [](unsigned char c) { return std::isdigit(c); });
      int v = digits ? std::stoi(sev) : -1;
      if (!digits || v < 0 || v > 3)
        throw DataError(at + ": severity must be in 0..3, got '" + sev + "'");
      rec.severity = v;
    }
    if (row.fields.size() > 3 && !row.fields[3].empty())
      rec.report = row.fields[3];
    if (has_cohort && row.fields.size() == 5)
      rec.cohort = row.fields[4] != "0";
    // Locate the image file: the id may carry its extension or not.
    namespace fs = std::filesystem;
    std::string path;
    for (const std::string& cand :
         {images_dir + "/" + rec.image_id,
          images_dir + "/" + rec.image_id + ".png",
          images_dir + "/" + rec.image_id + ".pgm"}) {
      if (fs::exists(cand) && cand.find_last_of('.') != std::string::npos &&
          cand.find_last_of('.') > cand.find_last_of('/')) {
        path = cand;
        break;
      }
    }
    if (path.empty())
      throw DataError(at + ": no image file for '" + rec.image_id + "' in " +
                      images_dir);
    rec.pixels = normalize_minmax(read_image(path));
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

// ---- patient-disjoint splits --------------------------------------------------

enum class SplitId { Train, Validation, Test };

inline const char* split_name(SplitId s) {
  switch (s) {
    case SplitId::Train: return "train";
    case SplitId::Validation: return "validation";
    case SplitId::Test: return "test";
  }
  return "?";
}

inline SplitId split_from_name(const std::string& s) {
  if (s == "train") return SplitId::Train;
  if (s == "validation") return SplitId::Validation;
  if (s == "test") return SplitId::Test;
  throw DataError("unknown split name '" + s + "'");
}

// Images not present in the manifest are excluded from all splits (this is
// how unlabeled images of validation/test patients are dropped).
struct SplitManifest {
  struct Entry {
    SplitId split = SplitId::Train;
    bool labeled = false;
  };
  std::map<std::string, Entry> assignment;

  void write_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write split manifest: " + path);
    out << "image_id,split,labeled\n";
    for (const auto& [id, e] : assignment)
      out << csv_line({id, split_name(e.split), e.labeled ? "1" : "0"});
    if (!out) throw DataError("short write: " + path);
  }

  static SplitManifest read_csv(const std::string& path) {
    std::vector<CsvRow> rows = read_csv_file(path);
    if (rows.empty() ||
        rows.front().fields != std::vector<std::string>{"image_id", "split",
                                                        "labeled"})
      throw DataError(path + ":1: expected header image_id,split,labeled");
    SplitManifest man;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto& row = rows[i];
      if (row.fields.size() != 3)
        throw DataError(path + ":" + std::to_string(row.line) +
                        ": expected 3 fields");
      Entry e;
      e.split = split_from_name(row.fields[1]);
      e.labeled = row.fields[2] == "1";
      if (!man.assignment.emplace(row.fields[0], e).second)
        throw DataError(path + ":" + std::to_string(row.line) +
                        ": duplicate image_id");
    }
    return man;
  }
};

struct SplitFractions {
  double train = 0.8, validation = 0.1, test = 0.1;
  void validate() const {
    if (train < 0 || validation < 0 || test < 0 ||
        std::abs(train + validation + test - 1.0) > 1e-9)
      throw DataError("split fractions must be non-negative and sum to 1");
  }
};

// Splits labeled images by patient near the target fractions; every image of
// a patient lands in that patient's split. Unlabeled images join the training
// pool only when their patient is not a validation/test patient.
inline SplitManifest split_by_patient(const Dataset& ds,
                                      const SplitFractions& fractions,
                                      std::uint64_t seed) {
  fractions.validate();
  std::vector<std::string> patient_order;
  std::map<std::string, std::vector<std::size_t>> by_patient;
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& p = ds.records[i].patient_id;
    auto [it, fresh] = by_patient.try_emplace(p);
    if (fresh) patient_order.push_back(p);
    it->second.push_back(i);
  }
  std::vector<std::string> labeled_patients;
  std::size_t labeled_total = 0;
  for (const auto& p : patient_order) {
    bool any = false;
    for (std::size_t i : by_patient[p]) {
      if (ds.records[i].severity) {
        any = true;
        ++labeled_total;
      }
    }
    if (any) labeled_patients.push_back(p);
  }
  if (labeled_patients.size() < 3)
    throw DataError("split: need at least 3 distinct labeled patients, have " +
                    std::to_string(labeled_patients.size()));

  Rng rng = Rng::stream(seed, 0x5011);
  rng.shuffle(labeled_patients);

  const double targets[3] = {fractions.train * labeled_total,
                             fractions.validation * labeled_total,
                             fractions.test * labeled_total};
  double assigned[3] = {0, 0, 0};
  std::map<std::string, SplitId> patient_split;
  std::size_t next = 0;
  // Seed each split that wants images with one patient so none ends up empty.
  for (int s = 0; s < 3; ++s) {
    if (targets[s] <= 0.0) continue;
    const auto& p = labeled_patients[next++];
    patient_split[p] = static_cast<SplitId>(s);
    for (std::size_t i : by_patient[p])
      assigned[s] += ds.records[i].severity.has_value();
  }
  for (; next < labeled_patients.size(); ++next) {
    const auto& p = labeled_patients[next];
    int best = 0;
    double best_deficit = targets[0] - assigned[0];
    for (int s = 1; s < 3; ++s) {
      double d = targets[s] - assigned[s];
      if (d > best_deficit) {
        best_deficit = d;
        best = s;
      }
    }
    patient_split[p] = static_cast<SplitId>(best);
    for (std::size_t i : by_patient[p])
      assigned[best] += ds.records[i].severity.has_value();
  }

  SplitManifest man;
  for (const auto& rec : ds.records) {
    auto it = patient_split.find(rec.patient_id);
    if (it == patient_split.end()) {
      // Patient has no labeled image: training-eligible unlabeled data.
      man.assignment[rec.image_id] = {SplitId::Train, false};
    } else if (rec.severity) {
      man.assignment[rec.image_id] = {it->second, true};
    } else if (it->second == SplitId::Train) {
      man.assignment[rec.image_id] = {SplitId::Train, false};
    }
    // Unlabeled images of validation/test patients stay out entirely.
  }
  return man;
}

namespace detail {

inline DatasetSlice select(const Dataset& ds, const SplitManifest& man,
                           SplitId split, bool labeled) {
  DatasetSlice out;
  for (const auto& rec : ds.records) {
    auto it = man.assignment.find(rec.image_id);
    if (it != man.assignment.end() && it->second.split == split &&
        it->second.labeled == labeled)
      out.push_back(&rec);
  }
  return out;
}

}  // namespace detail

inline DatasetSlice train_labeled_slice(const Dataset& ds,
                                        const SplitManifest& man) {
  return detail::select(ds, man, SplitId::Train, true);
}
inline DatasetSlice train_unlabeled_slice(const Dataset& ds,
                                          const SplitManifest& man) {
  return detail::select(ds, man, SplitId::Train, false);
}
inline DatasetSlice validation_slice(const Dataset& ds,
                                     const SplitManifest& man) {
  return detail::select(ds, man, SplitId::Validation, true);
}
inline DatasetSlice test_slice(const Dataset& ds, const SplitManifest& man) {
  return detail::select(ds, man, SplitId::Test, true);
}

// ---- augmentation -------------------------------------------------------------

struct AugmentParams {
  double max_rotation_deg = 5.0;
  double max_translation_px = 2.0;
  std::size_t crop_size = 0;  // 0 = keep full size

  bool identity() const {
    return max_rotation_deg == 0.0 && max_translation_px == 0.0;
  }
};

inline Tensor center_crop(const Tensor& img, std::size_t size) {
  if (img.shape.size() != 2)
    throw ShapeError("center_crop: expected [H,W], got " + shape_str(img.shape));
  const std::size_t h = img.shape[0], w = img.shape[1];
  if (size > h || size > w)
    throw DataError("center_crop: crop " + std::to_string(size) +
                    " larger than image " + shape_str(img.shape));
  if (size == h && size == w) return img;
  const std::size_t r0 = (h - size) / 2, c0 = (w - size) / 2;
  Tensor out = Tensor::zeros({size, size});
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c)
      out.values[r * size + c] = img.values[(r0 + r) * w + (c0 + c)];
  return out;
}

// Deterministic rotation (degrees, about the image center) plus translation
// (pixels), bilinear resampling with zero fill outside the source frame.
inline Tensor transform_image(const Tensor& img, double theta_deg, double dx,
                              double dy) {
  if (img.shape.size() != 2)
    throw ShapeError("transform_image: expected [H,W], got " +
                     shape_str(img.shape));
  const std::size_t h = img.shape[0], w = img.shape[1];
  const double theta = theta_deg * M_PI / 180.0;
  Tensor out = Tensor::zeros({h, w});
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double ct = std::cos(theta), st = std::sin(theta);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      // Invert the forward map (rotate by theta, then translate by (dx,dy)).
      const double yr = static_cast<double>(r) - dy - cy;
      const double xr = static_cast<double>(c) - dx - cx;
      const double sy = ct * yr - st * xr + cy;
      const double sx = st * yr + ct * xr + cx;
      const double fy = std::floor(sy), fx = std::floor(sx);
      const long r0 = static_cast<long>(fy), c0 = static_cast<long>(fx);
      const double wy = sy - fy, wx = sx - fx;
      double acc = 0.0;
      for (int ddr = 0; ddr < 2; ++ddr) {
        for (int ddc = 0; ddc < 2; ++ddc) {
          const long rr = r0 + ddr, cc = c0 + ddc;
          if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) ||
              cc >= static_cast<long>(w))
            continue;
          const double wgt = (ddr ? wy : 1.0 - wy) * (ddc ? wx : 1.0 - wx);
          acc += wgt * img.values[static_cast<std::size_t>(rr) * w +
                                  static_cast<std::size_t>(cc)];
        }
      }
      out.values[r * w + c] = std::clamp(acc, 0.0, 1.0);
    }
  }
  return out;
}

// Random rotation + translation with bilinear resampling (zero fill), then a
// center crop. Exactly three uniform draws per call, even at zero magnitude.
inline Tensor augment(const Tensor& img, Rng& rng, const AugmentParams& p) {
  if (img.shape.size() != 2)
    throw ShapeError("augment: expected [H,W], got " + shape_str(img.shape));
  const std::size_t h = img.shape[0], w = img.shape[1];
  const std::size_t crop = p.crop_size == 0 ? std::min(h, w) : p.crop_size;
  if (crop > h || crop > w)
    throw DataError("augment: crop " + std::to_string(crop) +
                    " larger than image " + shape_str(img.shape));
  const double theta = rng.uniform(-p.max_rotation_deg, p.max_rotation_deg);
  const double dx = rng.uniform(-p.max_translation_px, p.max_translation_px);
  const double dy = rng.uniform(-p.max_translation_px, p.max_translation_px);
  return center_crop(transform_image(img, theta, dx, dy), crop);
}

// ---- keyword label extraction ---------------------------------------------------

struct KeywordRule {
  int severity = 0;
  std::string phrase;
};

struct KeywordRuleset {
  std::vector<KeywordRule> rules;  // order defines precedence
  bool cohort_only = false;

  void validate() const {
    for (const auto& r : rules) {
      if (r.phrase.empty()) throw DataError("ruleset: empty phrase");
      if (r.severity < 0 || r.severity > 3)
        throw DataError("ruleset: severity out of range for '" + r.phrase +
                        "'");
    }
  }

  static KeywordRuleset parse(std::istream& in, const std::string& origin) {
    KeywordRuleset rs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      std::size_t first = line.find_first_not_of(" \t");
      if (first == std::string::npos || line[first] == '#') continue;
      std::size_t tab = line.find('\t', first);
      const std::string at = origin + ":" + std::to_string(lineno);
      if (tab == std::string::npos)
        throw DataError(at + ": expected <severity><TAB><phrase>");
      std::string sev = line.substr(first, tab - first);
      std::size_t pstart = line.find_first_not_of('\t', tab);
      std::string phrase =
          pstart == std::string::npos ? std::string() : line.substr(pstart);
      while (!phrase.empty() && (phrase.back() == ' ' || phrase.back() == '\t'))
        phrase.pop_back();
      if (sev.size() != 1 || sev[0] < '0' || sev[0] > '3')
        throw DataError(at + ": severity must be a single digit 0..3, got '" +
                        sev + "'");
      if (phrase.empty()) throw DataError(at + ": empty phrase");
      rs.rules.push_back({sev[0] - '0', phrase});
    }
    rs.validate();
    return rs;
  }

  static KeywordRuleset parse_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open ruleset: " + path);
    return parse(in, path);
  }

  static KeywordRuleset default_rules() {
    KeywordRuleset rs;
    rs.rules = {
        {0, "no pulmonary edema"},
        {0, "no evidence of pulmonary edema"},
        {0, "without evidence of pulmonary edema"},
        {0, "no interstitial edema"},
        {0, "edema has resolved"},
        {1, "mild pulmonary edema"},
        {1, "mild interstitial edema"},
        {1, "mild edema"},
        {1, "vascular congestion"},
        {2, "moderate pulmonary edema"},
        {2, "moderate interstitial edema"},
        {2, "moderate edema"},
        {3, "severe pulmonary edema"},
        {3, "severe edema"},
        {3, "florid pulmonary edema"},
        {3, "alveolar edema"},
    };
    return rs;
  }
};

namespace detail {

// Lowercase and collapse whitespace runs to single spaces.
inline std::string fold_text(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  bool space = false;
  for (unsigned char c : s) {
    if (std::isspace(c)) {
      space = !out.empty();
      continue;
    }
    if (space) out.push_back(' ');
    space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

inline bool word_boundary(const std::string& hay, std::size_t pos,
                          std::size_t len) {
  auto alnum = [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) != 0;
  };
  if (pos > 0 && alnum(hay[pos - 1])) return false;
  if (pos + len < hay.size() && alnum(hay[pos + len])) return false;
  return true;
}

inline bool phrase_matches(const std::string& folded_text,
                           const std::string& folded_phrase) {
  std::size_t pos = 0;
  while ((pos = folded_text.find(folded_phrase, pos)) != std::string::npos) {
    if (word_boundary(folded_text, pos, folded_phrase.size())) return true;
    ++pos;
  }
  return false;
}

}  // namespace detail

// Case-insensitive whole-phrase match; the first rule that matches wins.
// No match is a value (the image simply stays unlabeled), never an error.
inline std::optional<int> extract_label(const std::string& report_text,
                                        const KeywordRuleset& rules) {
  rules.validate();
  const std::string folded = detail::fold_text(report_text);
  for (const auto& rule : rules.rules) {
    if (detail::phrase_matches(folded, detail::fold_text(rule.phrase)))
      return rule.severity;
  }
  return std::nullopt;
}

// ---- synthetic benchmark --------------------------------------------------------

struct SynthConfig {
  std::size_t n = 64;
  std::size_t n_labeled = 100;
  std::size_t n_unlabeled = 5000;
  std::size_t n_validation = 200;
  std::size_t n_test = 200;
  double noise = 0.02;
  double haze_strength = 0.65;   // severity-proportional diffuse opacity
  double blob_amplitude = 0.25;  // severity-proportional focal opacities
  double anatomy_jitter = 0.015;  // per-patient shape variation
  std::uint64_t seed = 0;

  void validate() const {
    if (n < 8) throw DataError("synth: image side must be at least 8");
    if (noise < 0) throw DataError("synth: noise must be non-negative");
    if (haze_strength < 0 || blob_amplitude < 0 || anatomy_jitter < 0)
      throw DataError("synth: appearance parameters must be non-negative");
  }
};

inline int severity_class_of(double s) {
  if (s < 0.5) return 0;
  if (s < 1.5) return 1;
  if (s < 2.5) return 2;
  return 3;
}

struct SynthResult {
  Dataset dataset;
  SplitManifest split;
  std::map<std::string, double> true_severity;  // image_id -> continuous s
};

namespace detail {

struct LungShape {
  double cx, cy, rx, ry;
  // Squared elliptic radius of normalized coordinates (u,v).
  double d2(double u, double v) const {
    const double du = (u - cx) / rx, dv = (v - cy) / ry;
    return du * du + dv * dv;
  }
};

struct PatientAnatomy {
  LungShape lungs[2];
  double body_rx, body_ry, medi_halfwidth;
};

inline PatientAnatomy draw_anatomy(Rng& rng, double jitter) {
  auto j = [&] { return 1.0 + rng.uniform(-jitter, jitter); };
  PatientAnatomy a;
  a.body_rx = 0.92 * j();
  a.body_ry = 0.98 * j();
  a.medi_halfwidth = 0.16 * j();
  for (int side = 0; side < 2; ++side) {
    const double sign = side == 0 ? -1.0 : 1.0;
    a.lungs[side].cx = sign * 0.46 * j();
    a.lungs[side].cy = -0.05 + rng.uniform(-jitter, jitter) * 0.5;
    a.lungs[side].rx = 0.26 * j();
    a.lungs[side].ry = 0.50 * j();
  }
  return a;
}

inline double smooth01(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

struct Blob {
  double u, v, sigma, amplitude;
};

// Renders one phantom image; returns raw values in [0,1] before per-image
// min-max normalization.
inline Tensor render_phantom(const PatientAnatomy& a, double s,
                             const SynthConfig& cfg, Rng& rng) {
  const std::size_t n = cfg.n;
  const double sev = s / 3.0;
  const int n_blobs = static_cast<int>(std::lround(2.0 * s));
  std::vector<Blob> blobs;
  for (int b = 0; b < n_blobs; ++b) {
    const LungShape& lung = a.lungs[b % 2];
    const double rr = std::sqrt(rng.uniform(0.0, 1.0)) * 0.75;
    const double ang = rng.uniform(0.0, 2.0 * M_PI);
    Blob blob;
    blob.u = lung.cx + rr * std::cos(ang) * lung.rx;
    blob.v = lung.cy + rr * std::sin(ang) * lung.ry;
    blob.sigma = 0.05 + 0.05 * rng.uniform(0.0, 1.0);
    blob.amplitude = cfg.blob_amplitude * sev * (0.5 + 0.5 * rng.uniform(0.0, 1.0));
    blobs.push_back(blob);
  }
  Tensor img = Tensor::zeros({n, n});
  const double half = static_cast<double>(n) / 2.0;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const double v = (static_cast<double>(r) + 0.5 - half) / half;
      const double u = (static_cast<double>(c) + 0.5 - half) / half;
      const double body_d2 = (u / a.body_rx) * (u / a.body_rx) +
                             (v / a.body_ry) * (v / a.body_ry);
      const double body = smooth01((1.0 - body_d2) / 0.08);
      double val = 0.05 + body * 0.65;  // air outside, soft tissue inside
      // Mediastinum: bright central band inside the body.
      const double medi = smooth01((a.medi_halfwidth - std::abs(u)) / 0.05);
      val += body * medi * 0.20;
      for (const LungShape& lung : a.lungs) {
        const double d2 = lung.d2(u, v);
        const double inside = smooth01((1.0 - d2) / 0.15);
        if (inside <= 0.0) continue;
        val += inside * (-0.45);  // radiolucent lung field
        // Diffuse severity-proportional haze, densest at the lung center.
        val += inside * cfg.haze_strength * sev * (1.0 - 0.5 * d2);
      }
      for (const Blob& blob : blobs) {
        const double du = u - blob.u, dv = v - blob.v;
        val += blob.amplitude *
               std::exp(-(du * du + dv * dv) / (2.0 * blob.sigma * blob.sigma));
      }
      img.values[r * n + c] = val;
    }
  }
  if (cfg.noise > 0) {
    for (double& p : img.values) p += cfg.noise * rng.normal();
  }
  for (double& p : img.values) p = std::clamp(p, 0.0, 1.0);
  return img;
}

// Per-image min-max to [0,1], matching what a write/load round trip yields.
inline void renormalize(Tensor& img) {
  double lo = img.values[0], hi = img.values[0];
  for (double v : img.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi > lo) {
    for (double& v : img.values) v = (v - lo) / (hi - lo);
  } else {
    for (double& v : img.values) v = 0.0;
  }
}

}  // namespace detail

// Generates the synthetic benchmark with exact per-role counts. Patients are
// role-pure (1..5 images each), so the split is patient-disjoint by
// construction; labeled flags follow the role.
inline SynthResult synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng = Rng::stream(cfg.seed, 0x5F17);
  SynthResult out;
  std::size_t next_patient = 0, next_image = 0;

  struct Role {
    SplitId split;
    bool labeled;
    std::size_t count;
  };
  const Role roles[4] = {
      {SplitId::Train, true, cfg.n_labeled},
      {SplitId::Train, false, cfg.n_unlabeled},
      {SplitId::Validation, true, cfg.n_validation},
      {SplitId::Test, true, cfg.n_test},
  };
  for (const Role& role : roles) {
    std::size_t remaining = role.count;
    while (remaining > 0) {
      char pid[16];
      std::snprintf(pid, sizeof pid, "p%05zu", next_patient++);
      detail::PatientAnatomy anatomy =
          detail::draw_anatomy(rng, cfg.anatomy_jitter);
      std::size_t k = std::min<std::size_t>(rng.range(1, 5), remaining);
      for (std::size_t i = 0; i < k; ++i) {
        char iid[16];
        std::snprintf(iid, sizeof iid, "x%06zu", next_image++);
        const double s = rng.uniform(0.0, 3.0);
        ImageRecord rec;
        rec.image_id = iid;
        rec.patient_id = pid;
        rec.pixels = detail::render_phantom(anatomy, s, cfg, rng);
        detail::renormalize(rec.pixels);
        if (role.labeled) rec.severity = severity_class_of(s);
        out.true_severity[rec.image_id] = s;
        out.split.assignment[rec.image_id] = {role.split, role.labeled};
        out.dataset.records.push_back(std::move(rec));
      }
      remaining -= k;
    }
  }
  return out;
}

}  // namespace ssvr

#endif  // SSVR_DATA_HPP
