#pragma once

// Evaluation: caption semantic accuracy and token F1 via the caption parser,
// image semantic match via the scene extractor, and a Frechet distance over
// handcrafted image features (FID-proxy).

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "itit/data.hpp"
#include "itit/sampling.hpp"
#include "itit/synthdata.hpp"
#include "itit/vq.hpp"

namespace itit {

inline constexpr std::size_t kFeatureDim = 64;
using ImageFeatures = std::array<double, kFeatureDim>;

namespace detail {

inline bool is_ink(const RenderedImage& img, std::size_t y, std::size_t x) {
  double d = 0.0;
  for (std::size_t c = 0; c < kChannels; ++c) d = std::max(d, std::abs(double(img.at(y, x, c)) - kBackground[c]));
  return d > 0.1;
}

}  // namespace detail

/// 27 zone mean colours, 36 zone x shape stamp responses, 1 occupied-zone
/// count. A stamp response is the ink fraction inside the stamp minus the ink
/// fraction outside it, maximised over the two sizes.
inline ImageFeatures image_features(const RenderedImage& img) {
  ImageFeatures f{};
  std::size_t at = 0;
  std::array<double, kZones> ink_frac{};
  for (std::size_t z = 0; z < kZones; ++z) {
    const std::size_t y0 = zone_y(z), x0 = zone_x(z);
    std::array<double, 3> mean{};
    std::size_t ink = 0;
    for (std::size_t y = 0; y < kZoneWindow; ++y)
      for (std::size_t x = 0; x < kZoneWindow; ++x) {
        for (std::size_t c = 0; c < kChannels; ++c) mean[c] += img.at(y0 + y, x0 + x, c);
        ink += detail::is_ink(img, y0 + y, x0 + x);
      }
    for (std::size_t c = 0; c < kChannels; ++c) f[at++] = mean[c] / double(kZoneWindow * kZoneWindow);
    ink_frac[z] = double(ink) / double(kZoneWindow * kZoneWindow);
  }
  for (std::size_t z = 0; z < kZones; ++z) {
    const std::size_t y0 = zone_y(z), x0 = zone_x(z);
    for (std::size_t s = 0; s < kShapes; ++s) {
      double best = -1.0;
      for (std::size_t sz = 0; sz < kSizes; ++sz) {
        auto mask = stamp_mask(static_cast<ShapeKind>(s), static_cast<SizeKind>(sz));
        std::size_t in = 0, in_ink = 0, out_ink = 0;
        for (std::size_t y = 0; y < kZoneWindow; ++y)
          for (std::size_t x = 0; x < kZoneWindow; ++x) {
            bool ink = detail::is_ink(img, y0 + y, x0 + x);
            if (mask[y][x]) {
              ++in;
              in_ink += ink;
            } else {
              out_ink += ink;
            }
          }
        const std::size_t out = kZoneWindow * kZoneWindow - in;
        best = std::max(best, double(in_ink) / double(in) - (out ? double(out_ink) / double(out) : 0.0));
      }
      f[at++] = best;
    }
  }
  double occupied = 0.0;
  for (double v : ink_frac) occupied += v > 0.05;
  f[at++] = occupied;
  return f;
}

/// Frechet distance between Gaussian fits of two feature sets:
///   |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)
/// with `ridge` added to both covariance diagonals. Needs >= 2 rows per set.
inline std::optional<double> frechet_distance(const std::vector<ImageFeatures>& a, const std::vector<ImageFeatures>& b,
                                              double ridge = 1e-6) {
  if (a.size() < 2 || b.size() < 2) return std::nullopt;
  auto fit = [&](const std::vector<ImageFeatures>& xs, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    const auto n = static_cast<Eigen::Index>(xs.size());
    Eigen::MatrixXd X(n, static_cast<Eigen::Index>(kFeatureDim));
    for (Eigen::Index i = 0; i < n; ++i)
      for (std::size_t j = 0; j < kFeatureDim; ++j) X(i, static_cast<Eigen::Index>(j)) = xs[static_cast<std::size_t>(i)][j];
    mu = X.colwise().mean();
    Eigen::MatrixXd C = X.rowwise() - mu.transpose();
    cov = (C.transpose() * C) / double(n - 1);
    cov.diagonal().array() += ridge;
  };
  Eigen::VectorXd m1, m2;
  Eigen::MatrixXd s1, s2;
  fit(a, m1, s1);
  fit(b, m2, s2);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e1(s1);
  Eigen::VectorXd sq = e1.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  Eigen::MatrixXd root1 = e1.eigenvectors() * sq.asDiagonal() * e1.eigenvectors().transpose();
  Eigen::MatrixXd inner = root1 * s2 * root1;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e2(inner);
  const double tr_root = e2.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (m1 - m2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_root;
  return std::max(d, 0.0);
}

/// Bag-of-tokens F1 between a generated caption and the reference, ignoring
/// EOS and padding.
inline double token_f1(const std::vector<int>& predicted, const std::vector<int>& reference) {
  std::map<int, int> p, r;
  for (int t : predicted)
    if (t != kEos && t != kPad) ++p[t];
  for (int t : reference)
    if (t != kEos && t != kPad) ++r[t];
  int np = 0, nr = 0, overlap = 0;
  for (auto& [t, c] : p) np += c;
  for (auto& [t, c] : r) {
    nr += c;
    if (auto it = p.find(t); it != p.end()) overlap += std::min(c, it->second);
  }
  if (np == 0 && nr == 0) return 1.0;
  if (np == 0 || nr == 0 || overlap == 0) return 0.0;
  const double prec = double(overlap) / np, rec = double(overlap) / nr;
  return 2.0 * prec * rec / (prec + rec);
}

inline double caption_semantic_accuracy(const std::vector<int>& generated, const SceneSpec& truth) {
  return attribute_score(parse_caption(generated).partial, truth);
}

inline double image_semantic_match(const ImageTokens& tokens, const Codebook& cb, const SceneSpec& prompt) {
  return attribute_score(as_partial(extract_scene(decode(tokens, cb))), prompt);
}

struct MetricsRow {
  std::size_t step = 0;
  double lr = 0.0;
  std::map<std::string, double> losses;  // training losses of the step's batch
  double total_loss = 0.0;
  double grad_norm = 0.0;
  double caption_accuracy = 0.0;
  double token_f1 = 0.0;
  double image_match = 0.0;
  std::optional<double> fid_proxy;
  double perplexity = 0.0;
  std::optional<double> chain_retention;
};

inline std::vector<std::string> metrics_columns() {
  std::vector<std::string> cols{"step", "lr"};
  for (auto n : kObjectiveNames) cols.push_back("loss_" + std::string(n));
  for (auto c : {"loss_total", "grad_norm", "caption_accuracy", "token_f1", "image_match", "fid_proxy", "perplexity",
                 "chain_retention"})
    cols.emplace_back(c);
  return cols;
}

inline void write_metrics_header(std::ostream& os) {
  auto cols = metrics_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << '\n';
}

/// Disabled objectives and omitted metrics are written as empty fields.
inline void write_metrics_row(std::ostream& os, const MetricsRow& r) {
  os << r.step << ',' << format_double(r.lr);
  for (auto n : kObjectiveNames) {
    os << ',';
    if (auto it = r.losses.find(std::string(n)); it != r.losses.end()) os << format_double(it->second);
  }
  os << ',' << format_double(r.total_loss) << ',' << format_double(r.grad_norm) << ',' << format_double(r.caption_accuracy)
     << ',' << format_double(r.token_f1) << ',' << format_double(r.image_match) << ',';
  if (r.fid_proxy) os << format_double(*r.fid_proxy);
  os << ',' << format_double(r.perplexity) << ',';
  if (r.chain_retention) os << format_double(*r.chain_retention);
  os << '\n';
}

/// Inverse of write_metrics_header + write_metrics_row.
inline std::vector<MetricsRow> read_metrics_csv(std::istream& is) {
  std::vector<MetricsRow> rows;
  std::string line;
  const auto cols = metrics_columns();
  if (!std::getline(is, line)) return rows;
  std::string expected;
  for (std::size_t i = 0; i < cols.size(); ++i) expected += (i ? "," : "") + cols[i];
  if (line != expected) throw std::runtime_error("metrics csv: unexpected header '" + line + "'");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      auto comma = line.find(',', start);
      f.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (f.size() != cols.size()) throw std::runtime_error("metrics csv: row with " + std::to_string(f.size()) + " fields");
    auto num = [](const std::string& x) { return std::stod(x); };
    MetricsRow r;
    std::size_t at = 0;
    r.step = std::stoull(f[at++]);
    r.lr = num(f[at++]);
    for (auto n : kObjectiveNames) {
      if (!f[at].empty()) r.losses[std::string(n)] = num(f[at]);
      ++at;
    }
    r.total_loss = num(f[at++]);
    r.grad_norm = num(f[at++]);
    r.caption_accuracy = num(f[at++]);
    r.token_f1 = num(f[at++]);
    r.image_match = num(f[at++]);
    if (!f[at].empty()) r.fid_proxy = num(f[at]);
    ++at;
    r.perplexity = num(f[at++]);
    if (!f[at].empty()) r.chain_retention = num(f[at]);
    rows.push_back(std::move(r));
  }
  return rows;
}

struct EvalSet {
  std::vector<SceneSpec> scenes;
  std::vector<ImageTokens> images;            // VQ tokens of the clean renders
  std::vector<std::vector<int>> captions;     // canonical captions + EOS
  std::vector<ImageFeatures> reference;       // features of the clean renders
};

inline EvalSet make_eval_set(const DatasetManifest& m, const Codebook& cb, std::size_t count) {
  EvalSet e;
  for (const auto& r : m.records) {
    if (e.scenes.size() == count) break;
    auto scene = scene_from_caption(r.scene);
    auto img = render(scene);
    e.scenes.push_back(scene);
    e.images.push_back(encode(img, cb));
    e.captions.push_back(caption(scene));
    e.reference.push_back(image_features(img));
  }
  return e;
}

struct EvalResult {
  double caption_accuracy = 0.0;
  double token_f1 = 0.0;
  double image_match = 0.0;
  std::optional<double> fid_proxy;
  double perplexity = 0.0;
  std::optional<double> chain_retention;
  std::vector<std::vector<int>> generated_captions;
  std::vector<ImageTokens> generated_images;
};

/// Greedy captions for every eval image; one guided parallel decode per eval
/// caption; optional cycle chains over the first `chain_prompts` captions.
inline EvalResult evaluate(const Model<float>& model, const Codebook& cb, const EvalSet& set, const SamplerConfig& sampler,
                           std::uint64_t seed, std::size_t chain_prompts = 0, std::size_t chain_rounds = 3) {
  EvalResult res;
  const std::size_t n = set.scenes.size();
  if (n == 0) return res;
  res.generated_captions = greedy_captions(model, set.images);
  for (std::size_t i = 0; i < n; ++i) {
    res.caption_accuracy += caption_semantic_accuracy(res.generated_captions[i], set.scenes[i]);
    res.token_f1 += token_f1(res.generated_captions[i], set.captions[i]);
  }
  res.caption_accuracy /= double(n);
  res.token_f1 /= double(n);

  Rng rng = Rng::derive(seed, {0x6576616cULL});
  res.generated_images = parallel_decode(model, set.captions, sampler, rng).images;
  std::vector<ImageFeatures> gen;
  std::vector<int> stream;
  for (std::size_t i = 0; i < n; ++i) {
    auto pixels = decode(res.generated_images[i], cb);
    res.image_match += attribute_score(as_partial(extract_scene(pixels)), set.scenes[i]);
    gen.push_back(image_features(pixels));
    stream.insert(stream.end(), res.generated_images[i].begin(), res.generated_images[i].end());
  }
  res.image_match /= double(n);
  res.fid_proxy = frechet_distance(gen, set.reference);
  res.perplexity = codebook_stats(stream, cb.size).perplexity;

  if (chain_prompts > 0) {
    Rng chain_rng = Rng::derive(seed, {0x636861696eULL});
    double total = 0.0;
    const std::size_t m = std::min(chain_prompts, n);
    for (std::size_t i = 0; i < m; ++i)
      total += cycle_chain(model, cb, set.captions[i], chain_rounds, sampler, chain_rng).round_retention.back();
    res.chain_retention = total / double(m);
  }
  return res;
}

}  // namespace itit
