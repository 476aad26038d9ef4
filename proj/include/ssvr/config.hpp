#ifndef SSVR_CONFIG_HPP
#define SSVR_CONFIG_HPP

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ssvr/data.hpp"
#include "ssvr/errors.hpp"
#include "ssvr/eval.hpp"
#include "ssvr/model.hpp"
#include "ssvr/optim.hpp"

namespace ssvr {

// Fully-resolved run configuration: every knob of every stage, with the
// defaults used when a key is absent. The echoed form round-trips through the
// parser, which is what makes runs reproducible from their run directory.
struct RunConfig {
  std::string method = "vae_r";  // vae_r | supervised | em
  Arch arch;
  TrainConfig train;
  double entropy_weight = 0.1;
  SynthConfig synth;
  std::string synth_format = "pgm";  // pgm | png
  int synth_bit_depth = 16;
  SplitFractions fractions;
  std::uint64_t split_seed = 0;
  std::string data_dir;
  std::string out_dir;

  void validate() const {
    if (method != "vae_r" && method != "supervised" && method != "em")
      throw DataError("config: method must be vae_r, supervised, or em");
    if (synth_format != "pgm" && synth_format != "png")
      throw DataError("config: synth.format must be pgm or png");
    if (synth_bit_depth != 8 && synth_bit_depth != 16)
      throw DataError("config: synth.bit_depth must be 8 or 16");
    if (entropy_weight < 0)
      throw DataError("config: em.entropy_weight must be non-negative");
    arch.validate();
    synth.validate();
    train.validate();
    fractions.validate();
  }
};

namespace detail {

inline double cfg_double(const std::string& v, const std::string& at) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw DataError(at + ": expected a number, got '" + v + "'");
  }
}

inline std::uint64_t cfg_u64(const std::string& v, const std::string& at) {
  try {
    std::size_t used = 0;
    unsigned long long u = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return u;
  } catch (const std::exception&) {
    throw DataError(at + ": expected a non-negative integer, got '" + v + "'");
  }
}

inline bool cfg_bool(const std::string& v, const std::string& at) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw DataError(at + ": expected 0/1/true/false, got '" + v + "'");
}

struct ConfigKey {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::map<std::string, ConfigKey>& config_keys() {
  auto u64 = [](auto member) {
    return ConfigKey{
        [member](RunConfig& c, const std::string& v, const std::string& at) {
          c.*member = cfg_u64(v, at);
        },
        [member](const RunConfig& c) { return std::to_string(c.*member); }};
  };
  (void)u64;
  static const std::map<std::string, ConfigKey> keys = [] {
    std::map<std::string, ConfigKey> k;
    auto add = [&k](const std::string& name, auto setter, auto getter) {
      k[name] = ConfigKey{setter, getter};
    };
    auto size_key = [&add](const std::string& name, auto access) {
      add(
          name,
          [access](RunConfig& c, const std::string& v, const std::string& at) {
            access(c) = static_cast<std::size_t>(cfg_u64(v, at));
          },
          [access](const RunConfig& c) {
            return std::to_string(access(const_cast<RunConfig&>(c)));
          });
    };
    auto u64_key = [&add](const std::string& name, auto access) {
      add(
          name,
          [access](RunConfig& c, const std::string& v, const std::string& at) {
            access(c) = cfg_u64(v, at);
          },
          [access](const RunConfig& c) {
            return std::to_string(access(const_cast<RunConfig&>(c)));
          });
    };
    auto dbl_key = [&add](const std::string& name, auto access) {
      add(
          name,
          [access](RunConfig& c, const std::string& v, const std::string& at) {
            access(c) = cfg_double(v, at);
          },
          [access](const RunConfig& c) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.17g",
                          access(const_cast<RunConfig&>(c)));
            return std::string(buf);
          });
    };
    auto str_key = [&add](const std::string& name, auto access) {
      add(
          name,
          [access](RunConfig& c, const std::string& v, const std::string&) {
            access(c) = v;
          },
          [access](const RunConfig& c) {
            return access(const_cast<RunConfig&>(c));
          });
    };

    str_key("method", [](RunConfig& c) -> std::string& { return c.method; });
    size_key("arch.n", [](RunConfig& c) -> std::size_t& { return c.arch.n; });
    size_key("arch.latent_dim",
             [](RunConfig& c) -> std::size_t& { return c.arch.latent_dim; });
    size_key("arch.blocks",
             [](RunConfig& c) -> std::size_t& { return c.arch.blocks; });
    size_key("arch.base_channels", [](RunConfig& c) -> std::size_t& {
      return c.arch.base_channels;
    });
    size_key("arch.reg_hidden",
             [](RunConfig& c) -> std::size_t& { return c.arch.reg_hidden; });
    size_key("arch.reg_blocks",
             [](RunConfig& c) -> std::size_t& { return c.arch.reg_blocks; });
    add(
        "arch.latent_spatial",
        [](RunConfig& c, const std::string& v, const std::string& at) {
          c.arch.latent_spatial = cfg_bool(v, at);
        },
        [](const RunConfig& c) {
          return std::string(c.arch.latent_spatial ? "1" : "0");
        });
    size_key("arch.latent_side",
             [](RunConfig& c) -> std::size_t& { return c.arch.latent_side; });
    size_key("arch.latent_channels", [](RunConfig& c) -> std::size_t& {
      return c.arch.latent_channels;
    });

    dbl_key("loss.recon_variance", [](RunConfig& c) -> double& {
      return c.train.loss.recon_variance;
    });
    size_key("train.minibatch_size", [](RunConfig& c) -> std::size_t& {
      return c.train.minibatch_size;
    });
    size_key("train.max_epochs",
             [](RunConfig& c) -> std::size_t& { return c.train.max_epochs; });
    size_key("train.validation_every", [](RunConfig& c) -> std::size_t& {
      return c.train.validation_every;
    });
    size_key("train.patience",
             [](RunConfig& c) -> std::size_t& { return c.train.patience; });
    u64_key("train.seed",
            [](RunConfig& c) -> std::uint64_t& { return c.train.seed; });
    dbl_key("adam.lr", [](RunConfig& c) -> double& { return c.train.adam.lr; });
    dbl_key("adam.beta1",
            [](RunConfig& c) -> double& { return c.train.adam.beta1; });
    dbl_key("adam.beta2",
            [](RunConfig& c) -> double& { return c.train.adam.beta2; });
    dbl_key("adam.eps",
            [](RunConfig& c) -> double& { return c.train.adam.eps; });
    dbl_key("augment.max_rotation_deg", [](RunConfig& c) -> double& {
      return c.train.augment.max_rotation_deg;
    });
    dbl_key("augment.max_translation_px", [](RunConfig& c) -> double& {
      return c.train.augment.max_translation_px;
    });
    size_key("augment.crop_size", [](RunConfig& c) -> std::size_t& {
      return c.train.augment.crop_size;
    });
    dbl_key("em.entropy_weight",
            [](RunConfig& c) -> double& { return c.entropy_weight; });

    size_key("synth.n", [](RunConfig& c) -> std::size_t& { return c.synth.n; });
    size_key("synth.labeled",
             [](RunConfig& c) -> std::size_t& { return c.synth.n_labeled; });
    size_key("synth.unlabeled",
             [](RunConfig& c) -> std::size_t& { return c.synth.n_unlabeled; });
    size_key("synth.validation", [](RunConfig& c) -> std::size_t& {
      return c.synth.n_validation;
    });
    size_key("synth.test",
             [](RunConfig& c) -> std::size_t& { return c.synth.n_test; });
    dbl_key("synth.noise",
            [](RunConfig& c) -> double& { return c.synth.noise; });
    dbl_key("synth.haze_strength",
            [](RunConfig& c) -> double& { return c.synth.haze_strength; });
    dbl_key("synth.blob_amplitude",
            [](RunConfig& c) -> double& { return c.synth.blob_amplitude; });
    dbl_key("synth.anatomy_jitter",
            [](RunConfig& c) -> double& { return c.synth.anatomy_jitter; });
    u64_key("synth.seed",
            [](RunConfig& c) -> std::uint64_t& { return c.synth.seed; });
    str_key("synth.format",
            [](RunConfig& c) -> std::string& { return c.synth_format; });
    add(
        "synth.bit_depth",
        [](RunConfig& c, const std::string& v, const std::string& at) {
          c.synth_bit_depth = static_cast<int>(cfg_u64(v, at));
        },
        [](const RunConfig& c) { return std::to_string(c.synth_bit_depth); });

    u64_key("split.seed",
            [](RunConfig& c) -> std::uint64_t& { return c.split_seed; });
    dbl_key("split.train",
            [](RunConfig& c) -> double& { return c.fractions.train; });
    dbl_key("split.validation",
            [](RunConfig& c) -> double& { return c.fractions.validation; });
    dbl_key("split.test",
            [](RunConfig& c) -> double& { return c.fractions.test; });

    str_key("data.dir", [](RunConfig& c) -> std::string& { return c.data_dir; });
    str_key("out.dir", [](RunConfig& c) -> std::string& { return c.out_dir; });
    return k;
  }();
  return keys;
}

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline void apply_config_entry(RunConfig& cfg, const std::string& key,
                               const std::string& value,
                               const std::string& at) {
  const auto& keys = detail::config_keys();
  auto it = keys.find(key);
  if (it == keys.end()) throw DataError(at + ": unknown key '" + key + "'");
  it->second.set(cfg, value, at);
}

// `key = value` lines; blank lines and lines starting with '#' are skipped.
inline RunConfig parse_config(std::istream& in, const std::string& origin,
                              RunConfig base = {}) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::string at = origin + ":" + std::to_string(lineno);
    std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw DataError(at + ": expected key = value");
    apply_config_entry(base, detail::trim(t.substr(0, eq)),
                       detail::trim(t.substr(eq + 1)), at);
  }
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open config: " + path);
  return parse_config(in, path, std::move(base));
}

// Overrides are `key=value` strings from the command line.
inline void apply_overrides(RunConfig& cfg,
                            const std::vector<std::string>& overrides) {
  for (const std::string& o : overrides) {
    std::size_t eq = o.find('=');
    if (eq == std::string::npos)
      throw DataError("override '" + o + "': expected key=value");
    apply_config_entry(cfg, detail::trim(o.substr(0, eq)),
                       detail::trim(o.substr(eq + 1)), "override '" + o + "'");
  }
}

// Sorted `key = value` dump of every knob; parsing it back reproduces the
// config exactly.
inline std::string dump_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [name, key] : detail::config_keys())
    out += name + " = " + key.get(cfg) + "\n";
  return out;
}

}  // namespace ssvr

#endif  // SSVR_CONFIG_HPP
