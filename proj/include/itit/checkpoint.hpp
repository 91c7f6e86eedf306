#pragma once

// Checkpoint file: "ITCK", version, model config echo, step, seeds, then every
// parameter (name, shape, floats) with its two Adam moments, then an FNV-1a
// checksum over everything before it. Streams are counter-derived from
// (seed, step), so the seeds and step are the complete random state.

#include <cstdio>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "itit/binary_io.hpp"
#include "itit/config.hpp"
#include "itit/model.hpp"
#include "itit/optimizer.hpp"

namespace itit {

inline constexpr char kCheckpointMagic[4] = {'I', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainingState {
  Model<float> model;
  AdamState adam;
  std::size_t step = 0;  // next step to run
  SeedConfig seeds;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_model_config(ByteWriter& w, const ModelConfig& c) {
  for (auto v : {c.d_model, c.n_heads, c.encoder_layers, c.text_decoder_layers, c.image_decoder_layers, c.image_tokens,
                 c.max_text, c.image_vocab, c.text_vocab, c.mlp_ratio})
    w.put<std::uint64_t>(v);
  w.put<double>(c.dropout);
}

inline ModelConfig get_model_config(ByteReader& r) {
  ModelConfig c;
  for (auto* f : {&c.d_model, &c.n_heads, &c.encoder_layers, &c.text_decoder_layers, &c.image_decoder_layers,
                  &c.image_tokens, &c.max_text, &c.image_vocab, &c.text_vocab, &c.mlp_ratio})
    *f = r.get<std::uint64_t>();
  c.dropout = r.get<double>();
  return c;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const TrainingState& s) {
  ByteWriter w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  detail::put_model_config(w, s.model.cfg);
  w.put<std::uint64_t>(s.step);
  w.put<std::uint64_t>(s.seeds.data);
  w.put<std::uint64_t>(s.seeds.init);
  w.put<std::uint64_t>(s.seeds.train);
  w.put<std::uint64_t>(s.adam.step);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.model.params.size()));
  const bool has_moments = s.adam.m.size() == s.model.params.size();
  std::size_t i = 0;
  for (auto& [name, t] : s.model.params) {
    w.put_string(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.put<std::uint64_t>(d);
    w.put_bytes(t.values().data(), t.size() * sizeof(float));
    if (has_moments) {
      w.put_span(s.adam.m[i]);
      w.put_span(s.adam.v[i]);
    } else {
      std::vector<float> zero(t.size(), 0.0f);
      w.put_span(zero);
      w.put_span(zero);
    }
    ++i;
  }
  w.put<std::uint64_t>(fnv1a64(w.bytes().data(), w.bytes().size()));
  return std::move(w.bytes());
}

/// Parses and verifies a checkpoint. Nothing is returned unless the checksum
/// and structure are valid. When `expect` is given the stored model config
/// must match it.
inline TrainingState deserialize_checkpoint(const std::vector<std::uint8_t>& bytes,
                                            const ModelConfig* expect = nullptr) {
  if (bytes.size() < 4 + 8) throw CheckpointError("checkpoint: file too short (" + std::to_string(bytes.size()) + " bytes)");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, 8);
  const std::uint64_t actual = fnv1a64(bytes.data(), body);
  if (stored != actual) throw CheckpointError("checkpoint: checksum mismatch (file truncated or corrupted)");
  ByteReader r(bytes.data(), body, "checkpoint");
  char magic[4];
  r.get_bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kCheckpointMagic)) throw CheckpointError("checkpoint: bad magic");
  if (auto v = r.get<std::uint32_t>(); v != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(v));
  ModelConfig cfg = detail::get_model_config(r);
  if (expect && !(cfg == *expect))
    throw CheckpointError("checkpoint: model config mismatch (file d_model=" + std::to_string(cfg.d_model) +
                          " layers=" + std::to_string(cfg.encoder_layers) + "/" + std::to_string(cfg.text_decoder_layers) +
                          "/" + std::to_string(cfg.image_decoder_layers) + ", expected d_model=" +
                          std::to_string(expect->d_model) + " layers=" + std::to_string(expect->encoder_layers) + "/" +
                          std::to_string(expect->text_decoder_layers) + "/" + std::to_string(expect->image_decoder_layers) +
                          ")");
  TrainingState s;
  s.step = r.get<std::uint64_t>();
  s.seeds.data = r.get<std::uint64_t>();
  s.seeds.init = r.get<std::uint64_t>();
  s.seeds.train = r.get<std::uint64_t>();
  s.adam.step = r.get<std::uint64_t>();
  // Build the expected parameter layout, then fill it.
  s.model = init_model<float>(cfg, 0);
  const auto n = r.get<std::uint32_t>();
  if (n != s.model.params.size())
    throw CheckpointError("checkpoint: " + std::to_string(n) + " parameters, model defines " +
                          std::to_string(s.model.params.size()));
  for (auto& [name, t] : s.model.params) {
    auto stored_name = r.get_string();
    if (stored_name != name) throw CheckpointError("checkpoint: expected parameter " + name + ", found " + stored_name);
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    if (shape != t.shape())
      throw CheckpointError("checkpoint: parameter " + name + " has shape " + to_string(shape) + ", expected " +
                            to_string(t.shape()));
    r.get_bytes(t.mutable_values().data(), t.size() * sizeof(float));
    std::vector<float> m(t.size()), v(t.size());
    r.get_bytes(m.data(), m.size() * sizeof(float));
    r.get_bytes(v.data(), v.size() * sizeof(float));
    s.adam.m.push_back(std::move(m));
    s.adam.v.push_back(std::move(v));
  }
  if (r.remaining() != 0) throw CheckpointError("checkpoint: trailing bytes");
  return s;
}

inline void save_checkpoint(const TrainingState& s, const std::string& path) {
  auto bytes = serialize_checkpoint(s);
  // Write to a sibling file first so a crash never leaves a half-written checkpoint.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw CheckpointError("cannot rename " + tmp + " to " + path);
}

inline TrainingState load_checkpoint(const std::string& path, const ModelConfig* expect = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, expect);
}

}  // namespace itit
