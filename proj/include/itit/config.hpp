#pragma once

// Experiment configuration: `[section]` headers with `key = value` lines.
// Every key has a default; unknown sections or keys are errors.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "itit/binary_io.hpp"
#include "itit/model.hpp"
#include "itit/objectives.hpp"
#include "itit/sampling.hpp"

namespace itit {

struct OptimizerConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.96;
  double eps = 1e-8;
  double weight_decay = 0.045;
  double clip = 3.0;
};

struct ScheduleConfig {
  std::size_t warmup = 250;
  std::size_t total = 5000;
};

struct BatchQuotas {
  std::size_t paired = 32;
  std::size_t unpaired_image = 16;
  std::size_t unpaired_text = 16;
  bool reuse_paired = false;  // draw the unpaired quotas from the paired records
};

struct SeedConfig {
  std::uint64_t data = 0;
  std::uint64_t init = 0;
  std::uint64_t train = 0;
};

struct EvalConfig {
  std::size_t interval = 1000;
  std::size_t count = 200;       // eval records used per metrics row
  std::size_t chain_prompts = 0; // cycle-chain retention (0 disables)
  std::size_t chain_rounds = 3;
  std::uint64_t seed = 0;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
  std::string manifest;
  std::string eval_manifest;
  std::string codebook;
  ModelConfig model;
  ObjectiveMode objective;
  SamplerConfig sampler;             // evaluation
  SamplerConfig cycle_sampler{8, 0.0, 4.5, 1, RevealRule::kCategorical, false};
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  BatchQuotas batch;
  SeedConfig seeds;
  EvalConfig eval;

  /// Visits every key with a reference-like setter/getter pair so parsing,
  /// echoing and hashing share one list.
  template <class Visitor>
  void visit(Visitor&& v) {
    v("data", "manifest", manifest);
    v("data", "eval_manifest", eval_manifest);
    v("data", "codebook", codebook);
    v("model", "d_model", model.d_model);
    v("model", "n_heads", model.n_heads);
    v("model", "encoder_layers", model.encoder_layers);
    v("model", "text_decoder_layers", model.text_decoder_layers);
    v("model", "image_decoder_layers", model.image_decoder_layers);
    v("model", "image_vocab", model.image_vocab);
    v("model", "max_text", model.max_text);
    v("model", "dropout", model.dropout);
    v("model", "mlp_ratio", model.mlp_ratio);
    v("objective", "i2t", objective.i2t);
    v("objective", "t2i", objective.t2i);
    v("objective", "i2i", objective.i2i);
    v("objective", "t2t", objective.t2t);
    v("objective", "t2i2t", objective.t2i2t);
    v("objective", "i2t2i", objective.i2t2i);
    for (auto name : kObjectiveNames) v("objective", "weight_" + std::string(name), objective.weights[std::string(name)]);
    v("objective", "i2t2i_text_grad_scale", objective.i2t2i_text_grad_scale);
    v("objective", "cycle_start", objective.cycle_start);
    v("sampler", "steps", sampler.steps);
    v("sampler", "guidance", sampler.guidance);
    v("sampler", "temperature", sampler.temperature0);
    v("sampler", "beam", sampler.beam);
    v("sampler", "reveal", sampler.reveal);
    v("sampler", "cycle_steps", cycle_sampler.steps);
    v("sampler", "cycle_guidance", cycle_sampler.guidance);
    v("sampler", "cycle_temperature", cycle_sampler.temperature0);
    v("optimizer", "lr", optimizer.lr);
    v("optimizer", "beta1", optimizer.beta1);
    v("optimizer", "beta2", optimizer.beta2);
    v("optimizer", "eps", optimizer.eps);
    v("optimizer", "weight_decay", optimizer.weight_decay);
    v("optimizer", "clip", optimizer.clip);
    v("schedule", "warmup", schedule.warmup);
    v("schedule", "total", schedule.total);
    v("batch", "paired", batch.paired);
    v("batch", "unpaired_image", batch.unpaired_image);
    v("batch", "unpaired_text", batch.unpaired_text);
    v("batch", "reuse_paired", batch.reuse_paired);
    v("seed", "data", seeds.data);
    v("seed", "init", seeds.init);
    v("seed", "train", seeds.train);
    v("eval", "interval", eval.interval);
    v("eval", "count", eval.count);
    v("eval", "chain_prompts", eval.chain_prompts);
    v("eval", "chain_rounds", eval.chain_rounds);
    v("eval", "seed", eval.seed);
  }
  template <class Visitor>
  void visit(Visitor&& v) const {
    const_cast<TrainConfig*>(this)->visit(std::forward<Visitor>(v));
  }

  /// Sets init, train and eval seeds from one number.
  void set_seed(std::uint64_t s) {
    seeds.init = s;
    seeds.train = s;
    eval.seed = s;
  }

  void validate() const {
    model.validate();
    objective.validate();
    sampler.validate();
    cycle_sampler.validate();
    if (schedule.total <= schedule.warmup)
      throw ConfigError("schedule: total steps (" + std::to_string(schedule.total) + ") must exceed warmup (" +
                        std::to_string(schedule.warmup) + ")");
    const bool needs_pairs = objective.i2t || objective.t2i;
    if (needs_pairs && batch.paired == 0) throw ConfigError("batch: paired quota is 0 but i2t/t2i is enabled");
    if (objective.t2i2t != CycleMode::kOff && batch.unpaired_text == 0)
      throw ConfigError("batch: t2i2t cycle enabled with zero unpaired_text quota");
    if (objective.i2t2i != CycleMode::kOff && batch.unpaired_image == 0)
      throw ConfigError("batch: i2t2i cycle enabled with zero unpaired_image quota");
    if (objective.t2t && batch.unpaired_text == 0 && batch.paired == 0)
      throw ConfigError("batch: t2t enabled without any text quota");
    if (objective.i2i && batch.paired == 0 && batch.unpaired_image == 0)
      throw ConfigError("batch: i2i enabled without any image quota");
    if (optimizer.lr <= 0.0 || optimizer.clip <= 0.0 || optimizer.beta1 < 0.0 || optimizer.beta1 >= 1.0 ||
        optimizer.beta2 < 0.0 || optimizer.beta2 >= 1.0 || optimizer.weight_decay < 0.0)
      throw ConfigError("optimizer: invalid hyperparameters");
    if (eval.interval == 0) throw ConfigError("eval: interval must be positive");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline void parse_value(const std::string& key, const std::string& text, std::string& out) { out = text; (void)key; }

inline void parse_value(const std::string& key, const std::string& text, bool& out) {
  if (text == "true" || text == "1" || text == "on") out = true;
  else if (text == "false" || text == "0" || text == "off") out = false;
  else throw ConfigError(key + ": expected a boolean, got '" + text + "'");
}

template <class N>
  requires std::is_arithmetic_v<N>
void parse_value(const std::string& key, const std::string& text, N& out) {
  std::istringstream is(text);
  N v{};
  if constexpr (std::is_unsigned_v<N>) {
    if (!text.empty() && text[0] == '-') throw ConfigError(key + ": expected a non-negative number, got '" + text + "'");
  }
  is >> v;
  if (!is || !is.eof()) throw ConfigError(key + ": cannot parse '" + text + "'");
  out = v;
}

inline void parse_value(const std::string& key, const std::string& text, CycleMode& out) {
  try {
    out = parse_cycle_mode(text);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

inline void parse_value(const std::string& key, const std::string& text, RevealRule& out) {
  if (text == "categorical") out = RevealRule::kCategorical;
  else if (text == "topk") out = RevealRule::kTopK;
  else throw ConfigError(key + ": expected categorical or topk, got '" + text + "'");
}

inline std::string show(const std::string& v) { return v; }
inline std::string show(bool v) { return v ? "true" : "false"; }
inline std::string show(CycleMode m) { return std::string(cycle_mode_name(m)); }
inline std::string show(RevealRule r) { return r == RevealRule::kCategorical ? "categorical" : "topk"; }
template <class N>
  requires std::is_arithmetic_v<N>
std::string show(N v) {
  if constexpr (std::is_floating_point_v<N>) return format_double(v);
  else return std::to_string(v);
}

}  // namespace detail

/// Applies one `section.key = value` assignment.
inline void set_config_value(TrainConfig& cfg, const std::string& section, const std::string& key,
                             const std::string& value) {
  bool found = false;
  cfg.visit([&](const std::string& sec, const std::string& k, auto& field) {
    if (sec == section && k == key) {
      detail::parse_value(section + "." + key, value, field);
      found = true;
    }
  });
  if (!found) throw ConfigError("unknown config key '" + section + "." + key + "'");
}

inline TrainConfig parse_config(std::istream& is, TrainConfig cfg = {}) {
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": key outside any section");
    set_config_value(cfg, section, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return cfg;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  return parse_config(in);
}

/// Canonical text form; parse_config(write_config(c)) == c.
inline std::string write_config(const TrainConfig& cfg) {
  std::ostringstream os;
  std::string current;
  cfg.visit([&](const std::string& sec, const std::string& key, const auto& field) {
    if (sec != current) {
      os << (current.empty() ? "" : "\n") << '[' << sec << "]\n";
      current = sec;
    }
    os << key << " = " << detail::show(field) << '\n';
  });
  return os.str();
}

/// Stable identifier of a configuration (FNV-1a of its canonical text).
inline std::uint64_t config_hash(const TrainConfig& cfg) {
  auto text = write_config(cfg);
  return fnv1a64(reinterpret_cast<const std::uint8_t*>(text.data()), text.size());
}

}  // namespace itit
