#pragma once

// Procedural scenes: sampling, rendering, captioning and the two exact
// oracles (caption parser, template-matching scene extractor), plus dataset
// manifests with paired / unpaired splits and pairing corruption.

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "itit/geometry.hpp"
#include "itit/rng.hpp"

namespace itit {

enum class ShapeKind : std::uint8_t { kCircle, kSquare, kTriangle, kCross };
enum class Color : std::uint8_t { kRed, kGreen, kBlue, kYellow, kMagenta, kCyan };
enum class SizeKind : std::uint8_t { kSmall, kLarge };

struct ObjectSpec {
  ShapeKind shape = ShapeKind::kCircle;
  Color color = Color::kRed;
  SizeKind size = SizeKind::kSmall;
  std::uint8_t zone = 0;  // row-major index into the 3x3 grid

  auto operator<=>(const ObjectSpec&) const = default;
};

struct SceneSpec {
  std::vector<ObjectSpec> objects;  // sorted by zone
  std::uint64_t seed = 0;           // provenance only; not part of equality

  bool operator==(const SceneSpec& o) const { return objects == o.objects; }
  bool operator<(const SceneSpec& o) const { return objects < o.objects; }
};

/// 1-3 objects, distinct zones, canonical order.
inline bool is_valid_scene(const SceneSpec& s) {
  if (s.objects.empty() || s.objects.size() > kMaxObjects) return false;
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    if (s.objects[i].zone >= kZones) return false;
    if (i > 0 && s.objects[i - 1].zone >= s.objects[i].zone) return false;
  }
  return true;
}

struct RenderedImage {
  std::array<float, kPixels> pixels{};  // HWC, row-major, values in [0, 1]

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * kImageSize + x) * kChannels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * kImageSize + x) * kChannels + c]; }
  bool operator==(const RenderedImage&) const = default;
};

inline constexpr std::array<float, 3> kBackground = {0.8f, 0.8f, 0.8f};
inline constexpr std::array<std::array<float, 3>, kColors> kPalette = {{
    {0.9f, 0.1f, 0.1f},   // red
    {0.1f, 0.75f, 0.1f},  // green
    {0.1f, 0.2f, 0.9f},   // blue
    {0.95f, 0.9f, 0.1f},  // yellow
    {0.85f, 0.1f, 0.85f}, // magenta
    {0.1f, 0.85f, 0.9f},  // cyan
}};

using StampMask = std::array<std::array<bool, kZoneWindow>, kZoneWindow>;

/// Bitmap of a shape relative to its zone window. Large stamps span the full
/// 8x8 window; small stamps are 4x4 centred in it.
inline StampMask stamp_mask(ShapeKind shape, SizeKind size) {
  StampMask m{};
  if (size == SizeKind::kLarge) {
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        bool on = false;
        switch (shape) {
          case ShapeKind::kCircle: on = (x - 3.5) * (x - 3.5) + (y - 3.5) * (y - 3.5) <= 14.0; break;
          case ShapeKind::kSquare: on = x >= 1 && x <= 6 && y >= 1 && y <= 6; break;
          case ShapeKind::kTriangle: {
            int half = y / 2 + 1;  // rows of width 2, 2, 4, 4, 6, 6, 8, 8
            on = x >= 4 - half && x < 4 + half;
            break;
          }
          case ShapeKind::kCross: on = std::abs(x - y) <= 1 || std::abs(x + y - 7) <= 1; break;
        }
        m[y][x] = on;
      }
    return m;
  }
  static constexpr std::array<std::array<const char*, 4>, kShapes> kSmall = {{
      {".##.", "####", "####", ".##."},
      {"####", "####", "####", "####"},
      {".##.", ".##.", "####", "####"},
      {"#..#", ".##.", ".##.", "#..#"},
  }};
  const auto& rows = kSmall[static_cast<std::size_t>(shape)];
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) m[y + 2][x + 2] = rows[y][x] == '#';
  return m;
}

inline std::size_t zone_y(std::size_t zone) { return kZoneOrigin[zone / kZoneRows]; }
inline std::size_t zone_x(std::size_t zone) { return kZoneOrigin[zone % kZoneRows]; }

inline RenderedImage render(const SceneSpec& scene) {
  RenderedImage img;
  for (std::size_t i = 0; i < kImageSize * kImageSize; ++i)
    for (std::size_t c = 0; c < kChannels; ++c) img.pixels[i * kChannels + c] = kBackground[c];
  for (const auto& o : scene.objects) {
    auto mask = stamp_mask(o.shape, o.size);
    const auto& col = kPalette[static_cast<std::size_t>(o.color)];
    const std::size_t y0 = zone_y(o.zone), x0 = zone_x(o.zone);
    for (std::size_t y = 0; y < kZoneWindow; ++y)
      for (std::size_t x = 0; x < kZoneWindow; ++x)
        if (mask[y][x])
          for (std::size_t c = 0; c < kChannels; ++c) img.at(y0 + y, x0 + x, c) = col[c];
  }
  return img;
}

inline SceneSpec sample_scene(Rng& rng) {
  SceneSpec s;
  s.seed = rng.next_u64();
  const std::size_t count = 1 + rng.below(kMaxObjects);
  std::array<std::uint8_t, kZones> zones{};
  for (std::size_t i = 0; i < kZones; ++i) zones[i] = static_cast<std::uint8_t>(i);
  rng.shuffle(zones.begin(), zones.end());
  for (std::size_t i = 0; i < count; ++i) {
    ObjectSpec o;
    o.zone = zones[i];
    o.shape = static_cast<ShapeKind>(rng.below(kShapes));
    o.color = static_cast<Color>(rng.below(kColors));
    o.size = static_cast<SizeKind>(rng.below(kSizes));
    s.objects.push_back(o);
  }
  std::sort(s.objects.begin(), s.objects.end(), [](const auto& a, const auto& b) { return a.zone < b.zone; });
  return s;
}

// ---------------------------------------------------------------------------
// Captions.

inline int shape_token(ShapeKind s) { return kCircle + static_cast<int>(s); }
inline int color_token(Color c) { return kRed + static_cast<int>(c); }
inline int size_token(SizeKind s) { return kSmall + static_cast<int>(s); }

/// "a <size> <color> <shape> at <row> <col>" clauses joined by "and", then EOS.
inline std::vector<int> caption(const SceneSpec& scene) {
  std::vector<int> out;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& o = scene.objects[i];
    if (i > 0) out.push_back(kAnd);
    out.insert(out.end(), {kA, size_token(o.size), color_token(o.color), shape_token(o.shape), kAt,
                           kTop + static_cast<int>(o.zone / kZoneRows), kLeft + static_cast<int>(o.zone % kZoneRows)});
  }
  out.push_back(kEos);
  return out;
}

/// Space-joined words up to (excluding) the first EOS.
inline std::string words_of(const std::vector<int>& tokens) {
  std::string s;
  for (int t : tokens) {
    if (t == kEos) break;
    if (t < 0 || t >= static_cast<int>(kTextVocab)) throw std::out_of_range("words_of: token " + std::to_string(t));
    if (!s.empty()) s += ' ';
    s += kWords[static_cast<std::size_t>(t)];
  }
  return s;
}

inline std::string caption_string(const SceneSpec& scene) { return words_of(caption(scene)); }

/// Inverse of words_of; appends EOS. Unknown words are rejected.
inline std::vector<int> tokens_of(std::string_view text) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find(' ', pos);
    if (end == std::string_view::npos) end = text.size();
    auto w = text.substr(pos, end - pos);
    if (!w.empty()) {
      auto it = std::find(kWords.begin(), kWords.end(), w);
      if (it == kWords.end()) throw std::invalid_argument("unknown caption word '" + std::string(w) + "'");
      out.push_back(static_cast<int>(it - kWords.begin()));
    }
    pos = end + 1;
  }
  out.push_back(kEos);
  return out;
}

/// Attribute slots recovered from a clause; unset slots were unreadable.
struct PartialObject {
  std::optional<ShapeKind> shape;
  std::optional<Color> color;
  std::optional<SizeKind> size;
  std::optional<std::uint8_t> zone;
};

struct ParseResult {
  std::optional<SceneSpec> scene;       // set on grammatical, canonical input
  std::size_t error_position = 0;       // first offending token when scene is unset
  std::vector<PartialObject> partial;   // best-effort attributes, always filled
  bool ok() const { return scene.has_value(); }
};

namespace detail {

inline PartialObject salvage_clause(std::span<const int> clause) {
  PartialObject p;
  std::optional<int> row, col;
  for (int t : clause) {
    if (t >= kSmall && t <= kLarge && !p.size) p.size = static_cast<SizeKind>(t - kSmall);
    else if (t >= kRed && t <= kCyan && !p.color) p.color = static_cast<Color>(t - kRed);
    else if (t >= kCircle && t <= kCross && !p.shape) p.shape = static_cast<ShapeKind>(t - kCircle);
    else if (t >= kTop && t <= kBottom && !row) row = t - kTop;
    else if (t >= kLeft && t <= kRight && !col) col = t - kLeft;
  }
  if (row && col) p.zone = static_cast<std::uint8_t>(*row * static_cast<int>(kZoneRows) + *col);
  return p;
}

}  // namespace detail

/// Exact inverse of caption() on grammatical input. Tokens after the first
/// EOS are ignored; a missing EOS is tolerated (length-truncated output).
inline ParseResult parse_caption(std::span<const int> tokens) {
  ParseResult r;
  std::size_t n = 0;
  while (n < tokens.size() && tokens[n] != kEos) ++n;
  auto body = tokens.first(n);

  // Salvage: split on "and" and read typed slots per clause.
  std::size_t start = 0;
  for (std::size_t i = 0; i <= n; ++i) {
    if (i == n || body[i] == kAnd) {
      if (i > start) r.partial.push_back(detail::salvage_clause(body.subspan(start, i - start)));
      start = i + 1;
    }
  }

  SceneSpec scene;
  std::size_t i = 0;
  auto fail = [&](std::size_t pos) {
    r.error_position = pos;
    return r;
  };
  if (n == 0) return fail(0);
  while (true) {
    if (scene.objects.size() == kMaxObjects) return fail(i);
    // Slot k of a clause accepts tokens in [lo[k], hi[k]].
    static constexpr std::array<int, kClauseTokens> lo = {kA, kSmall, kRed, kCircle, kAt, kTop, kLeft};
    static constexpr std::array<int, kClauseTokens> hi = {kA, kLarge, kCyan, kCross, kAt, kBottom, kRight};
    for (std::size_t k = 0; k < kClauseTokens; ++k) {
      if (i + k >= n) return fail(n);
      if (body[i + k] < lo[k] || body[i + k] > hi[k]) return fail(i + k);
    }
    const int* c = body.data() + i;
    ObjectSpec o;
    o.size = static_cast<SizeKind>(c[1] - kSmall);
    o.color = static_cast<Color>(c[2] - kRed);
    o.shape = static_cast<ShapeKind>(c[3] - kCircle);
    o.zone = static_cast<std::uint8_t>((c[5] - kTop) * static_cast<int>(kZoneRows) + (c[6] - kLeft));
    if (!scene.objects.empty() && scene.objects.back().zone >= o.zone) return fail(i + 5);
    scene.objects.push_back(o);
    i += kClauseTokens;
    if (i == n) break;
    if (body[i] != kAnd) return fail(i);
    ++i;
    if (i == n) return fail(i);
  }
  r.scene = std::move(scene);
  return r;
}

inline std::vector<PartialObject> as_partial(const SceneSpec& s) {
  std::vector<PartialObject> out;
  for (const auto& o : s.objects) out.push_back({o.shape, o.color, o.size, o.zone});
  return out;
}

/// Fraction of ground-truth attributes (shape, colour, size, zone per object)
/// recovered by `predicted`. Objects are bound by zone; each predicted object
/// is used at most once. Hallucinated objects enlarge the denominator.
inline double attribute_score(const std::vector<PartialObject>& predicted, const SceneSpec& truth) {
  const std::size_t denom = 4 * std::max(predicted.size(), truth.objects.size());
  if (denom == 0) return 1.0;
  std::vector<bool> used(predicted.size(), false);
  std::size_t hits = 0;
  for (const auto& g : truth.objects) {
    for (std::size_t j = 0; j < predicted.size(); ++j) {
      if (used[j] || !predicted[j].zone || *predicted[j].zone != g.zone) continue;
      used[j] = true;
      hits += 1;
      hits += predicted[j].shape == g.shape;
      hits += predicted[j].color == g.color;
      hits += predicted[j].size == g.size;
      break;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(denom);
}

// ---------------------------------------------------------------------------
// Scene extraction by template matching.

inline constexpr double kDefaultMatchThreshold = 0.02;

/// Mean squared error between a zone window of `img` and the window rendered
/// with the given stamp (or empty background when `object` is unset).
inline double zone_mse(const RenderedImage& img, std::size_t zone, const ObjectSpec* object) {
  StampMask mask{};
  std::array<float, 3> col = kBackground;
  if (object) {
    mask = stamp_mask(object->shape, object->size);
    col = kPalette[static_cast<std::size_t>(object->color)];
  }
  const std::size_t y0 = zone_y(zone), x0 = zone_x(zone);
  double err = 0.0;
  for (std::size_t y = 0; y < kZoneWindow; ++y)
    for (std::size_t x = 0; x < kZoneWindow; ++x) {
      const auto& ref = mask[y][x] ? col : kBackground;
      for (std::size_t c = 0; c < kChannels; ++c) {
        double d = static_cast<double>(img.at(y0 + y, x0 + x, c)) - static_cast<double>(ref[c]);
        err += d * d;
      }
    }
  return err / static_cast<double>(kZoneWindow * kZoneWindow * kChannels);
}

/// Per-zone best match over all 4x6x2 stamps and the empty window. A zone is
/// occupied when a stamp wins and its MSE is at most `threshold`.
inline SceneSpec extract_scene(const RenderedImage& img, double threshold = kDefaultMatchThreshold) {
  SceneSpec s;
  for (std::size_t z = 0; z < kZones; ++z) {
    double best = zone_mse(img, z, nullptr);
    std::optional<ObjectSpec> winner;
    for (std::size_t sh = 0; sh < kShapes; ++sh)
      for (std::size_t co = 0; co < kColors; ++co)
        for (std::size_t si = 0; si < kSizes; ++si) {
          ObjectSpec o{static_cast<ShapeKind>(sh), static_cast<Color>(co), static_cast<SizeKind>(si),
                       static_cast<std::uint8_t>(z)};
          double e = zone_mse(img, z, &o);
          if (e < best) {
            best = e;
            winner = o;
          }
        }
    if (winner && best <= threshold) s.objects.push_back(*winner);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Manifests.

enum class Split { kPaired, kUnpairedImage, kUnpairedText };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::kPaired: return "paired";
    case Split::kUnpairedImage: return "unpaired_image";
    case Split::kUnpairedText: return "unpaired_text";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "paired") return Split::kPaired;
  if (s == "unpaired_image") return Split::kUnpairedImage;
  if (s == "unpaired_text") return Split::kUnpairedText;
  throw std::invalid_argument("unknown split '" + std::string(s) + "'");
}

struct ManifestRecord {
  std::string id;
  std::string caption;  // the text side of the record
  Split split = Split::kPaired;
  std::string scene;    // canonical caption of the scene the image is rendered from

  bool operator==(const ManifestRecord&) const = default;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  double corruption_rate = 0.0;
  std::vector<ManifestRecord> records;

  std::size_t count(Split s) const {
    return static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [s](const auto& r) { return r.split == s; }));
  }
};

inline constexpr int kManifestVersion = 1;

inline SceneSpec scene_from_caption(std::string_view words) {
  auto toks = tokens_of(words);
  auto parsed = parse_caption(toks);
  if (!parsed.ok()) throw std::invalid_argument("manifest: ungrammatical scene '" + std::string(words) + "'");
  return *parsed.scene;
}

/// Three pairwise-disjoint pools of distinct scenes.
inline DatasetManifest make_dataset(std::size_t n_paired, std::size_t n_unpaired_image, std::size_t n_unpaired_text,
                                    std::uint64_t seed) {
  DatasetManifest m;
  m.seed = seed;
  Rng rng = Rng::derive(seed, {0x6d616e6966ULL});
  std::set<SceneSpec> seen;
  auto fill = [&](std::size_t n, Split split, const char* prefix) {
    for (std::size_t i = 0; i < n; ++i) {
      SceneSpec s;
      do {
        s = sample_scene(rng);
      } while (!seen.insert(s).second);
      std::ostringstream id;
      id << prefix << std::setw(6) << std::setfill('0') << i;
      auto text = caption_string(s);
      m.records.push_back({id.str(), text, split, text});
    }
  };
  fill(n_paired, Split::kPaired, "p");
  fill(n_unpaired_image, Split::kUnpairedImage, "ui");
  fill(n_unpaired_text, Split::kUnpairedText, "ut");
  return m;
}

/// Each paired record is selected with probability p; selected captions are
/// permuted among themselves without fixed points. A lone selected record
/// takes the caption of another random paired record.
inline DatasetManifest corrupt_pairs(DatasetManifest m, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("corrupt_pairs: p must lie in [0, 1]");
  std::vector<std::size_t> paired, chosen;
  for (std::size_t i = 0; i < m.records.size(); ++i)
    if (m.records[i].split == Split::kPaired) paired.push_back(i);
  for (auto i : paired)
    if (rng.uniform() < p) chosen.push_back(i);
  if (chosen.size() >= 2) {
    rng.shuffle(chosen.begin(), chosen.end());
    std::vector<std::string> captions;
    for (auto i : chosen) captions.push_back(m.records[i].caption);
    // Rotate by one along the shuffled order: a derangement.
    for (std::size_t k = 0; k < chosen.size(); ++k)
      m.records[chosen[k]].caption = captions[(k + 1) % chosen.size()];
  } else if (chosen.size() == 1 && paired.size() >= 2) {
    std::size_t self = chosen[0], other;
    do {
      other = paired[rng.below(paired.size())];
    } while (other == self);
    m.records[self].caption = m.records[other].caption;
  }
  m.corruption_rate = p;
  return m;
}

/// Concatenates record lists; ids must stay unique.
inline DatasetManifest merge_manifests(const DatasetManifest& a, const DatasetManifest& b, const std::string& b_prefix) {
  DatasetManifest m = a;
  std::set<std::string> ids;
  for (const auto& r : a.records) ids.insert(r.id);
  for (auto r : b.records) {
    r.id = b_prefix + r.id;
    if (!ids.insert(r.id).second) throw std::invalid_argument("merge_manifests: duplicate id " + r.id);
    m.records.push_back(std::move(r));
  }
  return m;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void write_manifest(std::ostream& os, const DatasetManifest& m) {
  os << "#itit-manifest\tversion=" << kManifestVersion << "\tseed=" << m.seed
     << "\tcorruption_rate=" << format_double(m.corruption_rate) << '\n';
  for (const auto& r : m.records)
    os << r.id << '\t' << r.caption << '\t' << split_name(r.split) << '\t' << r.scene << '\n';
}

inline DatasetManifest read_manifest(std::istream& is) {
  DatasetManifest m;
  std::string line;
  if (!std::getline(is, line) || line.rfind("#itit-manifest", 0) != 0)
    throw std::runtime_error("manifest: missing header");
  auto field = [&](const std::string& key) -> std::string {
    auto pos = line.find(key + "=");
    if (pos == std::string::npos) throw std::runtime_error("manifest: header lacks " + key);
    auto end = line.find('\t', pos);
    return line.substr(pos + key.size() + 1, end == std::string::npos ? std::string::npos : end - pos - key.size() - 1);
  };
  if (std::stoi(field("version")) != kManifestVersion) throw std::runtime_error("manifest: unsupported version");
  m.seed = std::stoull(field("seed"));
  m.corruption_rate = std::stod(field("corruption_rate"));
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t pos = 0;
    while (true) {
      auto tab = line.find('\t', pos);
      cols.push_back(line.substr(pos, tab == std::string::npos ? std::string::npos : tab - pos));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    if (cols.size() != 4) throw std::runtime_error("manifest: line " + std::to_string(lineno) + " has " +
                                                   std::to_string(cols.size()) + " fields, expected 4");
    m.records.push_back({cols[0], cols[1], parse_split(cols[2]), cols[3]});
  }
  return m;
}

}  // namespace itit
