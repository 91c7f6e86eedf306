#pragma once

// Training step, training loop with metrics/checkpoints/resume, and a cache
// of finished runs keyed by configuration.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "itit/checkpoint.hpp"
#include "itit/config.hpp"
#include "itit/data.hpp"
#include "itit/metrics.hpp"
#include "itit/objectives.hpp"
#include "itit/optimizer.hpp"

namespace itit {

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepResult {
  LossReport report;
  double grad_norm = 0.0;  // before clipping
  double lr = 0.0;
};

/// Loss seed for objective `index` (position in kObjectiveNames) at `step`.
inline std::uint64_t objective_seed(std::uint64_t train_seed, std::size_t step, std::size_t index) {
  return Rng::derive(train_seed, {0x73746570ULL, step, index}).next_u64();
}

namespace detail {

inline std::vector<ImageTokens> images_of(const std::vector<const TokenizedRecord*>& rs) {
  std::vector<ImageTokens> out;
  for (auto* r : rs) out.push_back(r->image);
  return out;
}

inline std::vector<std::vector<int>> captions_of(const std::vector<const TokenizedRecord*>& rs) {
  std::vector<std::vector<int>> out;
  for (auto* r : rs) out.push_back(r->caption);
  return out;
}

}  // namespace detail

/// Forward every enabled objective, backpropagate each weighted term in
/// objective order, clip, and apply one AdamW update at lr_at(state.step).
/// Routing: i2t/t2i on pairs; i2i on paired images plus unpaired images when
/// no I2T2I cycle consumes them; t2t on unpaired texts (paired captions if
/// none); cycles on their unpaired split from step objective.cycle_start on.
/// Throws NonFiniteLoss before touching the parameters if any loss is not
/// finite.
inline StepResult train_step(TrainingState& state, const Batch& batch, const TrainConfig& cfg) {
  auto& model = state.model;
  const auto& obj = cfg.objective;
  StepResult res;
  res.lr = lr_at(state.step, cfg.optimizer.lr, cfg.schedule);
  model.params.zero_grad();

  auto paired_images = detail::images_of(batch.paired);
  auto paired_captions = detail::captions_of(batch.paired);
  auto ui = detail::images_of(batch.unpaired_image);
  auto ut = detail::captions_of(batch.unpaired_text);

  double total = 0.0;
  for (std::size_t idx = 0; idx < kObjectiveNames.size(); ++idx) {
    const std::string name(kObjectiveNames[idx]);
    if (!obj.enabled(name)) continue;
    const bool cycle = name == "t2i2t" || name == "i2t2i";
    if (cycle && state.step < obj.cycle_start) continue;
    const double w = obj.weight(name);
    const std::uint64_t seed = objective_seed(state.seeds.train, state.step, idx);
    Tape<float> tape;
    TapeScope<float> scope(&tape);
    std::optional<LossTerm<float>> term;
    if (name == "i2t") {
      if (!paired_images.empty()) term = loss_i2t(model, paired_images, paired_captions, seed);
    } else if (name == "t2i") {
      if (!paired_images.empty()) term = loss_t2i(model, paired_images, paired_captions, seed);
    } else if (name == "i2i") {
      auto imgs = paired_images;
      if (obj.i2t2i == CycleMode::kOff) imgs.insert(imgs.end(), ui.begin(), ui.end());
      if (!imgs.empty()) term = loss_i2i(model, imgs, seed);
    } else if (name == "t2t") {
      auto caps = ut.empty() ? paired_captions : ut;
      if (!caps.empty()) term = loss_t2t(model, caps, seed);
    } else if (name == "t2i2t") {
      if (!ut.empty()) term = cycle_t2i2t(model, ut, seed, CycleOptions{obj.t2i2t, cfg.cycle_sampler, true});
    } else if (name == "i2t2i") {
      if (!ui.empty()) term = cycle_i2t2i(model, ui, seed, CycleOptions{obj.i2t2i, cfg.cycle_sampler, true, obj.i2t2i_text_grad_scale});
    }
    if (!term) continue;
    const double v = term->value.item();
    res.report.losses[name] = v;
    res.report.tokens[name] = term->tokens;
    res.report.weights[name] = w;
    if (!std::isfinite(v)) {
      std::ostringstream os;
      os << "non-finite loss at step " << state.step << ": " << name << " = " << v << " (tokens " << term->tokens
         << ", lr " << res.lr << ")";
      for (auto& [n, l] : res.report.losses) os << "\n  " << n << " = " << format_double(l);
      model.params.zero_grad();
      throw NonFiniteLoss(os.str());
    }
    total += w * v;
    if (w > 0.0) tape.backward(scale(term->value, static_cast<float>(w)));
  }
  res.report.total = total;
  res.grad_norm = clip_grad_norm(model.params, cfg.optimizer.clip);
  if (!std::isfinite(res.grad_norm)) {
    model.params.zero_grad();
    throw NonFiniteLoss("non-finite gradient norm at step " + std::to_string(state.step));
  }
  adam_update(model.params, state.adam, cfg.optimizer, res.lr);
  model.params.zero_grad();
  ++state.step;
  return res;
}

inline TrainingState fresh_state(const TrainConfig& cfg) {
  TrainingState s;
  s.model = init_model<float>(cfg.model, cfg.seeds.init);
  s.adam.init(s.model.params);
  s.seeds = cfg.seeds;
  return s;
}

struct RunOptions {
  std::string out_dir;
  std::string resume;                   // checkpoint to continue from
  std::optional<std::size_t> stop_at;   // checkpoint and return once this many steps are done
  std::ostream* log = nullptr;          // progress (not part of any artifact)
};

struct RunResult {
  std::vector<MetricsRow> rows;
  TrainingState state;
  bool finished = false;
};

inline std::string metrics_path(const std::string& dir) { return dir + "/metrics.csv"; }
inline std::string checkpoint_path(const std::string& dir) { return dir + "/checkpoint.itck"; }
inline std::string summary_path(const std::string& dir) { return dir + "/summary.log"; }

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

/// Evaluation records: the eval manifest when given, otherwise the paired
/// records of the training manifest.
inline EvalSet load_eval_set(const TrainConfig& cfg, const DatasetManifest& train, const Codebook& cb) {
  if (cfg.eval_manifest.empty()) {
    DatasetManifest paired;
    for (auto& r : train.records)
      if (r.split == Split::kPaired) paired.records.push_back(r);
    return make_eval_set(paired, cb, cfg.eval.count);
  }
  return make_eval_set(load_manifest(cfg.eval_manifest), cb, cfg.eval.count);
}

/// Runs (or continues) training. Writes metrics.csv (one row per eval
/// interval and at the last step), summary.log and checkpoint.itck into
/// `opt.out_dir`. Every artifact except the log stream is a function of
/// the configuration alone; resuming from a checkpoint reproduces the
/// uninterrupted run.
inline RunResult run_training(const TrainConfig& cfg, const RunOptions& opt) {
  namespace fs = std::filesystem;
  cfg.validate();
  auto say = [&](const std::string& s) {
    if (opt.log) *opt.log << s << std::endl;
  };
  fs::create_directories(opt.out_dir);
  const Codebook cb = load_codebook(cfg.codebook);
  if (cb.size != cfg.model.image_vocab)
    throw ConfigError("codebook has " + std::to_string(cb.size) + " entries but model.image_vocab = " +
                      std::to_string(cfg.model.image_vocab));
  const DatasetManifest manifest = load_manifest(cfg.manifest);
  const auto records = tokenize(manifest, cb);
  const EvalSet eval_set = load_eval_set(cfg, manifest, cb);
  BatchStream stream(records, cfg.batch, Rng::derive(cfg.seeds.data, {0x64617461ULL, cfg.seeds.train}).next_u64());

  RunResult out;
  std::vector<MetricsRow> kept;
  if (!opt.resume.empty()) {
    out.state = load_checkpoint(opt.resume, &cfg.model);
    if (out.state.seeds.init != cfg.seeds.init || out.state.seeds.train != cfg.seeds.train ||
        out.state.seeds.data != cfg.seeds.data)
      throw CheckpointError("checkpoint: seeds differ from the configuration");
    if (out.state.step > cfg.schedule.total)
      throw CheckpointError("checkpoint: step " + std::to_string(out.state.step) + " beyond schedule total");
    std::ifstream in(metrics_path(opt.out_dir));
    if (in)
      for (auto& r : read_metrics_csv(in))
        if (r.step <= out.state.step) kept.push_back(r);
    say("resumed at step " + std::to_string(out.state.step));
  } else {
    out.state = fresh_state(cfg);
  }

  {
    std::ofstream cfg_out(opt.out_dir + "/config.cfg");
    cfg_out << write_config(cfg);
  }
  std::ofstream metrics(metrics_path(opt.out_dir), std::ios::trunc);
  write_metrics_header(metrics);
  for (auto& r : kept) write_metrics_row(metrics, r);
  metrics.flush();
  out.rows = kept;
  std::ofstream summary(summary_path(opt.out_dir), opt.resume.empty() ? std::ios::trunc : std::ios::app);
  if (opt.resume.empty()) {
    summary << "config " << hex64(config_hash(cfg)) << '\n';
    summary << "records paired=" << stream.pool_size(Split::kPaired)
            << " unpaired_image=" << stream.pool_size(Split::kUnpairedImage)
            << " unpaired_text=" << stream.pool_size(Split::kUnpairedText) << " eval=" << eval_set.scenes.size() << '\n';
  } else {
    summary << "resume step=" << out.state.step << '\n';
  }

  auto& state = out.state;
  while (state.step < cfg.schedule.total) {
    if (opt.stop_at && state.step >= *opt.stop_at) break;
    const std::size_t step = state.step;
    Batch batch = stream.at(step);
    for (auto& e : batch.epoch_events) summary << "step=" << step << " epoch " << e << '\n';
    StepResult sr;
    try {
      sr = train_step(state, batch, cfg);
    } catch (const NonFiniteLoss& e) {
      summary << "abort " << e.what() << '\n';
      throw;
    }
    const std::size_t done = state.step;
    if (done % cfg.eval.interval == 0 || done == cfg.schedule.total) {
      const bool last = done == cfg.schedule.total;
      auto ev = evaluate(state.model, cb, eval_set, cfg.sampler, Rng::derive(cfg.eval.seed, {done}).next_u64(),
                         last ? cfg.eval.chain_prompts : 0, cfg.eval.chain_rounds);
      MetricsRow row;
      row.step = done;
      row.lr = sr.lr;
      row.losses = sr.report.losses;
      row.total_loss = sr.report.total;
      row.grad_norm = sr.grad_norm;
      row.caption_accuracy = ev.caption_accuracy;
      row.token_f1 = ev.token_f1;
      row.image_match = ev.image_match;
      row.fid_proxy = ev.fid_proxy;
      row.perplexity = ev.perplexity;
      row.chain_retention = ev.chain_retention;
      if (!row.fid_proxy) {
        summary << "step=" << done << " warning fid_proxy omitted (fewer than 2 samples)\n";
        say("warning: fid_proxy omitted at step " + std::to_string(done) + " (fewer than 2 eval samples)");
      }
      write_metrics_row(metrics, row);
      metrics.flush();
      summary << "step=" << done << " loss=" << format_double(row.total_loss)
              << " caption_accuracy=" << format_double(row.caption_accuracy)
              << " image_match=" << format_double(row.image_match) << '\n';
      summary.flush();
      std::ostringstream msg;
      msg << "step " << done << "/" << cfg.schedule.total << " loss " << std::setprecision(4) << row.total_loss
          << " cap_acc " << row.caption_accuracy << " img_match " << row.image_match;
      if (row.fid_proxy) msg << " fid " << *row.fid_proxy;
      say(msg.str());
      out.rows.push_back(std::move(row));
    }
  }
  save_checkpoint(state, checkpoint_path(opt.out_dir));
  out.finished = state.step >= cfg.schedule.total;
  if (out.finished) summary << "finished step=" << state.step << '\n';
  else summary << "stopped step=" << state.step << '\n';
  return out;
}

/// FNV-1a of a file's bytes (0 if it cannot be read).
inline std::uint64_t file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return 0;
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a64(bytes.data(), bytes.size());
}

/// Directory name of a run: configuration hash mixed with the contents of
/// the data files it reads.
inline std::string run_key(const TrainConfig& cfg) {
  std::uint64_t h = config_hash(cfg);
  for (auto* p : {&cfg.manifest, &cfg.eval_manifest, &cfg.codebook}) {
    const std::uint64_t f = file_hash(*p);
    h = fnv1a64(reinterpret_cast<const std::uint8_t*>(&f), sizeof f, h);
  }
  return hex64(h);
}

/// Returns the metrics of a finished run under `root`, training it first if
/// no finished run with the same key exists. Interrupted runs resume from
/// their checkpoint.
inline std::vector<MetricsRow> cached_run(const TrainConfig& cfg, const std::string& root, std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  const std::string dir = root + "/" + run_key(cfg);
  const std::string done_marker = dir + "/done";
  if (fs::exists(done_marker)) {
    std::ifstream in(metrics_path(dir));
    return read_metrics_csv(in);
  }
  RunOptions opt;
  opt.out_dir = dir;
  opt.log = log;
  // Checkpoint every eval interval so that a killed run loses little work.
  std::size_t next = 0;
  if (fs::exists(checkpoint_path(dir))) {
    try {
      next = load_checkpoint(checkpoint_path(dir), &cfg.model).step;
      opt.resume = checkpoint_path(dir);
    } catch (const CheckpointError&) {
      next = 0;
    }
  }
  RunResult r;
  do {
    opt.stop_at = std::min(cfg.schedule.total, (next / cfg.eval.interval + 1) * cfg.eval.interval);
    r = run_training(cfg, opt);
    next = r.state.step;
    opt.resume = checkpoint_path(dir);
  } while (!r.finished);
  std::ofstream(done_marker) << "ok\n";
  return r.rows;
}

}  // namespace itit
