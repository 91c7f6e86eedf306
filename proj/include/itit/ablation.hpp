#pragma once

// Named objective/batch presets for the ablation grid (rows 1-14).

#include <array>
#include <string>
#include <string_view>

#include "itit/config.hpp"

namespace itit {

struct AblationRow {
  int number;
  std::string_view name;
  bool t2i, i2t;
  bool t2t, i2i_unpaired;
  CycleMode t2i2t, i2t2i;
  bool unpaired_text, unpaired_image;  // which unpaired quotas are drawn
  bool reuse_paired;                   // cycles run on the paired records themselves
};

// Row 4 differs from row 3 only in its data: the manifest must carry the
// extra (noisy) pairs in the paired split.
inline constexpr std::array<AblationRow, 14> kAblationRows = {{
    {1, "t2i-only", true, false, false, false, CycleMode::kOff, CycleMode::kOff, false, false, false},
    {2, "i2t-only", false, true, false, false, CycleMode::kOff, CycleMode::kOff, false, false, false},
    {3, "paired-only", true, true, false, false, CycleMode::kOff, CycleMode::kOff, false, false, false},
    {4, "paired-extra", true, true, false, false, CycleMode::kOff, CycleMode::kOff, false, false, false},
    {5, "t2t", true, true, true, false, CycleMode::kOff, CycleMode::kOff, true, false, false},
    {6, "i2i", true, true, false, true, CycleMode::kOff, CycleMode::kOff, false, true, false},
    {7, "non-cycle", true, true, true, true, CycleMode::kOff, CycleMode::kOff, true, true, false},
    {8, "half-t2i2t", true, true, false, false, CycleMode::kHalf, CycleMode::kOff, true, false, false},
    {9, "half-i2t2i", true, true, false, false, CycleMode::kOff, CycleMode::kHalf, false, true, false},
    {10, "half-cycle", true, true, false, false, CycleMode::kHalf, CycleMode::kHalf, true, true, false},
    {11, "full-t2i2t", true, true, false, false, CycleMode::kFull, CycleMode::kOff, true, false, false},
    {12, "full-i2t2i", true, true, false, false, CycleMode::kOff, CycleMode::kFull, false, true, false},
    {13, "full-cycle-paired", true, true, false, false, CycleMode::kFull, CycleMode::kFull, true, true, true},
    {14, "full-cycle", true, true, false, false, CycleMode::kFull, CycleMode::kFull, true, true, false},
}};

/// Looks a row up by name or by number.
inline const AblationRow& find_ablation_row(std::string_view key) {
  for (auto& r : kAblationRows)
    if (r.name == key || std::to_string(r.number) == key) return r;
  std::string names;
  for (auto& r : kAblationRows) names += (names.empty() ? "" : ", ") + std::string(r.name);
  throw ConfigError("unknown ablation row '" + std::string(key) + "' (expected 1-14 or one of: " + names + ")");
}

/// Sets the objective mode and batch quotas of `cfg` for `row`. Unpaired
/// quotas a row does not use are zeroed; the ones it uses keep their value
/// from `cfg` (or half the paired quota when zero there).
inline void apply_ablation_row(TrainConfig& cfg, const AblationRow& row) {
  const std::size_t half = std::max<std::size_t>(1, cfg.batch.paired / 2);
  auto quota = [&](std::size_t current, bool used) -> std::size_t { return used ? (current ? current : half) : 0; };
  ObjectiveMode m;
  m.weights = cfg.objective.weights;
  m.i2t2i_text_grad_scale = cfg.objective.i2t2i_text_grad_scale;
  m.cycle_start = cfg.objective.cycle_start;
  m.t2i = row.t2i;
  m.i2t = row.i2t;
  // Unconditional image modelling on paired images accompanies every mode
  // that trains T2I (it provides the guidance branch); on unpaired images it
  // is the row 6/7 baseline.
  m.i2i = row.t2i || row.i2i_unpaired;
  m.t2t = row.t2t;
  m.t2i2t = row.t2i2t;
  m.i2t2i = row.i2t2i;
  cfg.objective = m;
  cfg.batch.unpaired_text = quota(cfg.batch.unpaired_text, row.unpaired_text);
  cfg.batch.unpaired_image = quota(cfg.batch.unpaired_image, row.unpaired_image);
  cfg.batch.reuse_paired = row.reuse_paired;
}

}  // namespace itit
