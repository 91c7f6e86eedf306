#pragma once

// Tokenized view of a manifest and counter-based batch composition.

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "itit/config.hpp"
#include "itit/synthdata.hpp"
#include "itit/vq.hpp"

namespace itit {

/// A manifest record with its image tokens and caption tokens.
struct TokenizedRecord {
  std::string id;
  Split split = Split::kPaired;
  SceneSpec scene;           // scene of the image
  ImageTokens image{};
  std::vector<int> caption;  // caption tokens + EOS (may describe another scene if corrupted)
};

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path);
  return read_manifest(in);
}

inline Codebook load_codebook(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open codebook " + path);
  return read_codebook(in);
}

/// Renders and encodes every record once.
inline std::vector<TokenizedRecord> tokenize(const DatasetManifest& m, const Codebook& cb) {
  std::vector<TokenizedRecord> out;
  out.reserve(m.records.size());
  for (const auto& r : m.records) {
    TokenizedRecord t;
    t.id = r.id;
    t.split = r.split;
    t.scene = scene_from_caption(r.scene);
    t.image = encode(render(t.scene), cb);
    t.caption = tokens_of(r.caption);
    out.push_back(std::move(t));
  }
  return out;
}

struct Batch {
  std::vector<const TokenizedRecord*> paired, unpaired_image, unpaired_text;
  std::vector<std::string> epoch_events;  // "split:epoch" for every epoch started by this batch
};

/// Splits of a tokenized dataset and the deterministic batch stream over it.
/// Record i of split s at global position q = step * quota + i is taken from
/// the epoch q / n, whose order is a fresh permutation seeded by (seed, s,
/// epoch). Any step's batch can therefore be rebuilt without history.
class BatchStream {
 public:
  BatchStream(const std::vector<TokenizedRecord>& records, BatchQuotas quotas, std::uint64_t seed)
      : quotas_(quotas), seed_(seed) {
    for (const auto& r : records) {
      if (quotas.reuse_paired && r.split != Split::kPaired) continue;
      pools_[static_cast<std::size_t>(r.split)].push_back(&r);
    }
    if (quotas.reuse_paired) pools_[1] = pools_[2] = pools_[0];
    const std::array<std::size_t, 3> q = {quotas.paired, quotas.unpaired_image, quotas.unpaired_text};
    for (std::size_t s = 0; s < 3; ++s)
      if (q[s] > 0 && pools_[s].empty())
        throw ConfigError("batch: quota " + std::to_string(q[s]) + " for split " +
                          std::string(split_name(static_cast<Split>(s))) + " but the manifest has no such records");
  }

  std::size_t pool_size(Split s) const { return pools_[static_cast<std::size_t>(s)].size(); }

  Batch at(std::size_t step) {
    Batch b;
    fill(b.paired, Split::kPaired, quotas_.paired, step, b);
    fill(b.unpaired_image, Split::kUnpairedImage, quotas_.unpaired_image, step, b);
    fill(b.unpaired_text, Split::kUnpairedText, quotas_.unpaired_text, step, b);
    return b;
  }

 private:
  const std::vector<std::size_t>& permutation(std::size_t s, std::size_t epoch) {
    auto& cache = perms_[s];
    if (!cache || cache->first != epoch) {
      std::vector<std::size_t> p(pools_[s].size());
      for (std::size_t i = 0; i < p.size(); ++i) p[i] = i;
      Rng rng = Rng::derive(seed_, {0x6261746368ULL, s, epoch});
      rng.shuffle(p.begin(), p.end());
      cache = std::make_pair(epoch, std::move(p));
    }
    return cache->second;
  }

  void fill(std::vector<const TokenizedRecord*>& out, Split split, std::size_t quota, std::size_t step, Batch& b) {
    const auto s = static_cast<std::size_t>(split);
    const std::size_t n = pools_[s].size();
    for (std::size_t i = 0; i < quota; ++i) {
      const std::size_t q = step * quota + i;
      const std::size_t epoch = q / n, pos = q % n;
      if (pos == 0) b.epoch_events.push_back(std::string(split_name(split)) + ":" + std::to_string(epoch));
      out.push_back(pools_[s][permutation(s, epoch)[pos]]);
    }
  }

  BatchQuotas quotas_;
  std::uint64_t seed_;
  std::array<std::vector<const TokenizedRecord*>, 3> pools_;
  std::array<std::optional<std::pair<std::size_t, std::vector<std::size_t>>>, 3> perms_;
};

}  // namespace itit
