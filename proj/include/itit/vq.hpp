#pragma once

// Patch vector quantizer: k-means over 8x8 RGB patches stands in for a
// frozen image tokenizer/detokenizer.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <iterator>
#include <limits>
#include <map>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "itit/binary_io.hpp"
#include "itit/geometry.hpp"
#include "itit/rng.hpp"
#include "itit/synthdata.hpp"

namespace itit {

using Patch = std::array<float, kPatchDim>;
using ImageTokens = std::array<int, kImageTokens>;

struct Codebook {
  std::size_t size = 0;         // V_img
  std::vector<float> entries;   // size x kPatchDim, row-major
  std::uint64_t fit_seed = 0;

  std::span<const float> entry(std::size_t i) const { return {entries.data() + i * kPatchDim, kPatchDim}; }
  bool operator==(const Codebook& o) const { return size == o.size && entries == o.entries; }
};

/// Patch p = gy * kGrid + gx, pixels in HWC order inside the patch.
inline Patch extract_patch(const RenderedImage& img, std::size_t p) {
  Patch out{};
  const std::size_t y0 = (p / kGrid) * kPatch, x0 = (p % kGrid) * kPatch;
  std::size_t k = 0;
  for (std::size_t y = 0; y < kPatch; ++y)
    for (std::size_t x = 0; x < kPatch; ++x)
      for (std::size_t c = 0; c < kChannels; ++c) out[k++] = img.at(y0 + y, x0 + x, c);
  return out;
}

inline void paste_patch(RenderedImage& img, std::size_t p, std::span<const float> patch) {
  const std::size_t y0 = (p / kGrid) * kPatch, x0 = (p % kGrid) * kPatch;
  std::size_t k = 0;
  for (std::size_t y = 0; y < kPatch; ++y)
    for (std::size_t x = 0; x < kPatch; ++x)
      for (std::size_t c = 0; c < kChannels; ++c) img.at(y0 + y, x0 + x, c) = std::clamp(patch[k++], 0.0f, 1.0f);
}

inline float patch_distance(std::span<const float> a, std::span<const float> b) {
  float d = 0.0f;
  for (std::size_t i = 0; i < kPatchDim; ++i) {
    float t = a[i] - b[i];
    d += t * t;
  }
  return d;
}

/// Nearest codeword per patch; ties go to the lowest index.
inline ImageTokens encode(const RenderedImage& img, const Codebook& cb) {
  ImageTokens out{};
  for (std::size_t p = 0; p < kImageTokens; ++p) {
    Patch patch = extract_patch(img, p);
    float best = std::numeric_limits<float>::infinity();
    int arg = 0;
    for (std::size_t e = 0; e < cb.size; ++e) {
      float d = patch_distance(patch, cb.entry(e));
      if (d < best) {
        best = d;
        arg = static_cast<int>(e);
      }
    }
    out[p] = arg;
  }
  return out;
}

inline RenderedImage decode(const ImageTokens& tokens, const Codebook& cb) {
  RenderedImage img;
  for (std::size_t p = 0; p < kImageTokens; ++p) {
    if (tokens[p] < 0 || static_cast<std::size_t>(tokens[p]) >= cb.size)
      throw std::out_of_range("vq decode: token " + std::to_string(tokens[p]) + " outside codebook of size " +
                              std::to_string(cb.size));
    paste_patch(img, p, cb.entry(static_cast<std::size_t>(tokens[p])));
  }
  return img;
}

inline double image_mse(const RenderedImage& a, const RenderedImage& b) {
  double e = 0.0;
  for (std::size_t i = 0; i < kPixels; ++i) {
    double d = static_cast<double>(a.pixels[i]) - static_cast<double>(b.pixels[i]);
    e += d * d;
  }
  return e / static_cast<double>(kPixels);
}

struct FitOptions {
  std::size_t max_iterations = 50;
  double min_change_fraction = 0.001;  // stop when fewer assignments change
};

struct FitReport {
  std::vector<double> distortion;  // mean squared patch error per iteration
  std::size_t iterations = 0;
  std::size_t distinct_patches = 0;
};

/// Lloyd's k-means on all patches of `images` with k-means++ seeding.
/// Identical patches are folded into weighted points, which leaves the
/// objective and every assignment unchanged.
inline Codebook fit_codebook(std::span<const RenderedImage> images, std::size_t v_img, std::uint64_t seed,
                             FitReport* report = nullptr, FitOptions opts = {}) {
  std::map<Patch, double> counts;
  for (const auto& img : images)
    for (std::size_t p = 0; p < kImageTokens; ++p) counts[extract_patch(img, p)] += 1.0;
  if (counts.size() < v_img)
    throw std::invalid_argument("fit_codebook: only " + std::to_string(counts.size()) +
                                " distinct patches available, need at least " + std::to_string(v_img));
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const std::size_t n = counts.size();
  Mat x(n, kPatchDim);
  Eigen::VectorXd w(n);
  {
    std::size_t i = 0;
    for (const auto& [patch, c] : counts) {
      for (std::size_t j = 0; j < kPatchDim; ++j) x(i, j) = patch[j];
      w(i) = c;
      ++i;
    }
  }
  const double total_weight = w.sum();
  const Eigen::VectorXd x_sq = x.rowwise().squaredNorm();

  Rng rng = Rng::derive(seed, {0x6b6d65616e73ULL});
  Mat centers(v_img, kPatchDim);
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  // k-means++: first center by weight, then by weight * D^2.
  {
    std::vector<double> prob(w.data(), w.data() + n);
    std::size_t first = rng.categorical<double>(prob);
    centers.row(0) = x.row(static_cast<Eigen::Index>(first));
    for (std::size_t k = 1; k < v_img; ++k) {
      for (std::size_t i = 0; i < n; ++i) {
        double d = (x.row(static_cast<Eigen::Index>(i)) - centers.row(static_cast<Eigen::Index>(k - 1))).squaredNorm();
        dist[i] = std::min(dist[i], d);
        prob[i] = w(static_cast<Eigen::Index>(i)) * dist[i];
      }
      std::size_t pick = rng.categorical<double>(prob);
      centers.row(static_cast<Eigen::Index>(k)) = x.row(static_cast<Eigen::Index>(pick));
    }
  }

  std::vector<std::size_t> assign(n, v_img);
  FitReport local;
  local.distinct_patches = n;
  auto assign_all = [&]() {
    const Eigen::VectorXd c_sq = centers.rowwise().squaredNorm();
    const Mat cross = x * centers.transpose();
    double changed = 0.0, distortion = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t k = 0; k < v_img; ++k) {
        double d = x_sq(static_cast<Eigen::Index>(i)) - 2.0 * cross(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) +
                   c_sq(static_cast<Eigen::Index>(k));
        if (d < best) {
          best = d;
          arg = k;
        }
      }
      if (arg != assign[i]) changed += w(static_cast<Eigen::Index>(i));
      assign[i] = arg;
      dist[i] = std::max(best, 0.0);
      distortion += w(static_cast<Eigen::Index>(i)) * dist[i];
    }
    local.distortion.push_back(distortion / total_weight / static_cast<double>(kPatchDim));
    return changed / total_weight;
  };

  // Moves center k onto the highest-distortion point not already a center.
  auto reseed = [&](std::size_t k) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
    for (auto i : order) {
      bool taken = false;
      for (std::size_t c = 0; c < v_img && !taken; ++c)
        taken = c != k && (centers.row(static_cast<Eigen::Index>(c)) - x.row(static_cast<Eigen::Index>(i))).squaredNorm() == 0.0;
      if (taken) continue;
      centers.row(static_cast<Eigen::Index>(k)) = x.row(static_cast<Eigen::Index>(i));
      dist[i] = 0.0;
      return;
    }
  };

  for (std::size_t it = 0; it < opts.max_iterations; ++it) {
    double change = assign_all();
    local.iterations = it + 1;
    if (it > 0 && change < opts.min_change_fraction) break;
    Mat sums = Mat::Zero(static_cast<Eigen::Index>(v_img), kPatchDim);
    Eigen::VectorXd mass = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(v_img));
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(static_cast<Eigen::Index>(assign[i])) += w(static_cast<Eigen::Index>(i)) * x.row(static_cast<Eigen::Index>(i));
      mass(static_cast<Eigen::Index>(assign[i])) += w(static_cast<Eigen::Index>(i));
    }
    for (std::size_t k = 0; k < v_img; ++k) {
      if (mass(static_cast<Eigen::Index>(k)) > 0.0)
        centers.row(static_cast<Eigen::Index>(k)) = sums.row(static_cast<Eigen::Index>(k)) / mass(static_cast<Eigen::Index>(k));
      else
        reseed(k);
    }
  }

  Codebook cb;
  cb.size = v_img;
  cb.fit_seed = seed;
  cb.entries.resize(v_img * kPatchDim);
  for (std::size_t k = 0; k < v_img; ++k)
    for (std::size_t j = 0; j < kPatchDim; ++j)
      cb.entries[k * kPatchDim + j] = static_cast<float>(centers(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)));
  // Distinct entries are required for encode(decode(t)) == t.
  for (std::size_t k = 1; k < v_img; ++k) {
    for (std::size_t j = 0; j < k; ++j) {
      if (!std::equal(cb.entry(k).begin(), cb.entry(k).end(), cb.entry(j).begin())) continue;
      reseed(k);
      for (std::size_t d = 0; d < kPatchDim; ++d)
        cb.entries[k * kPatchDim + d] = static_cast<float>(centers(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d)));
      j = static_cast<std::size_t>(-1);  // recheck against all earlier entries
    }
  }
  if (report) *report = std::move(local);
  return cb;
}

struct CodebookStats {
  std::vector<std::size_t> usage;
  double perplexity = 0.0;
};

template <class Range>
CodebookStats codebook_stats(const Range& token_stream, std::size_t v_img) {
  CodebookStats s;
  s.usage.assign(v_img, 0);
  std::size_t total = 0;
  for (int t : token_stream) {
    if (t < 0 || static_cast<std::size_t>(t) >= v_img) throw std::out_of_range("codebook_stats: token out of range");
    ++s.usage[static_cast<std::size_t>(t)];
    ++total;
  }
  double h = 0.0;
  for (auto c : s.usage) {
    if (c == 0) continue;
    double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  s.perplexity = total ? std::exp(h) : 0.0;
  return s;
}

inline constexpr char kCodebookMagic[4] = {'I', 'T', 'V', 'Q'};
inline constexpr std::uint32_t kCodebookVersion = 1;

inline void write_codebook(std::ostream& os, const Codebook& cb) {
  ByteWriter w;
  w.put_bytes(kCodebookMagic, 4);
  w.put<std::uint32_t>(kCodebookVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cb.size));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(kPatchDim));
  const auto payload_start = w.bytes().size();
  w.put_span(cb.entries);
  const auto sum = fnv1a64(w.bytes().data() + payload_start, w.bytes().size() - payload_start);
  w.put<std::uint64_t>(sum);
  os.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.bytes().size()));
  if (!os) throw std::runtime_error("codebook: write failed");
}

inline Codebook read_codebook(std::istream& is) {
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  ByteReader r(bytes.data(), bytes.size(), "codebook");
  char magic[4];
  r.get_bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kCodebookMagic)) throw std::runtime_error("codebook: bad magic");
  if (r.get<std::uint32_t>() != kCodebookVersion) throw std::runtime_error("codebook: unsupported version");
  Codebook cb;
  cb.size = r.get<std::uint32_t>();
  if (r.get<std::uint32_t>() != kPatchDim) throw std::runtime_error("codebook: patch dimension mismatch");
  const auto payload_start = r.position();
  cb.entries.resize(cb.size * kPatchDim);
  r.get_bytes(cb.entries.data(), cb.entries.size() * sizeof(float));
  const auto expect = fnv1a64(bytes.data() + payload_start, r.position() - payload_start);
  if (r.get<std::uint64_t>() != expect) throw std::runtime_error("codebook: checksum mismatch");
  for (float v : cb.entries)
    if (!std::isfinite(v)) throw std::runtime_error("codebook: non-finite entry");
  return cb;
}

}  // namespace itit
