#pragma once

// Joint image-text encoder with an autoregressive text decoder and a
// parallel (bidirectional) image decoder. All passes are batched: tensors are
// [batch, sequence, d_model].

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "itit/geometry.hpp"
#include "itit/rng.hpp"
#include "itit/tensor.hpp"

namespace itit {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t encoder_layers = 4;
  std::size_t text_decoder_layers = 2;
  std::size_t image_decoder_layers = 2;
  std::size_t image_tokens = kImageTokens;     // K
  std::size_t max_text = 24;                   // L
  std::size_t image_vocab = 128;               // V_img
  std::size_t text_vocab = kTextVocab;         // V_txt
  double dropout = 0.1;
  std::size_t mlp_ratio = 4;

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
      throw std::invalid_argument("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                  std::to_string(n_heads));
    if (max_text < kMaxCaptionTokens + 1)
      throw std::invalid_argument("model config: max_text " + std::to_string(max_text) + " < longest caption " +
                                  std::to_string(kMaxCaptionTokens + 1));
    if (image_tokens != kImageTokens) throw std::invalid_argument("model config: image_tokens must equal the VQ grid");
    if (text_vocab != kTextVocab) throw std::invalid_argument("model config: text_vocab must equal the caption vocabulary");
    if (image_vocab < 2) throw std::invalid_argument("model config: image_vocab too small");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("model config: dropout must lie in [0, 1)");
    if (encoder_layers == 0 || text_decoder_layers == 0 || image_decoder_layers == 0)
      throw std::invalid_argument("model config: every stack needs at least one layer");
  }
  std::size_t mask_id() const { return image_vocab; }
  bool operator==(const ModelConfig&) const = default;
};

/// Closed, ordered set of named parameters.
template <class T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Shape shape) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, Tensor<T>::zeros(std::move(shape), true)});
    return entries_.back().second;
  }
  const Tensor<T>& operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
    return entries_[it->second].second;
  }
  Tensor<T>& operator[](const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
    return entries_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  void zero_grad() {
    for (auto& [n, t] : entries_) t.zero_grad();
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : entries_) n += t.size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
struct Model {
  ModelConfig cfg;
  ParamStore<T> params;
};

namespace detail {

inline double truncated_normal(Rng& rng, double std) {
  for (;;) {
    double v = rng.normal(0.0, 1.0);
    if (std::abs(v) <= 2.0) return v * std;
  }
}

template <class T>
void init_normal(Tensor<T>& t, Rng& rng) {
  for (auto& v : t.mutable_values()) v = static_cast<T>(truncated_normal(rng, 0.02));
}

template <class T>
void add_block(ParamStore<T>& p, const std::string& pre, std::size_t d, std::size_t hidden, Rng& rng) {
  for (const char* ln : {".ln1", ".ln2"}) {
    auto& g = p.add(pre + ln + ".g", {d});
    for (auto& v : g.mutable_values()) v = T(1);
    p.add(pre + ln + ".b", {d});
  }
  init_normal(p.add(pre + ".attn.qkv.w", {d, 3 * d}), rng);
  p.add(pre + ".attn.qkv.b", {3 * d});
  init_normal(p.add(pre + ".attn.out.w", {d, d}), rng);
  p.add(pre + ".attn.out.b", {d});
  init_normal(p.add(pre + ".mlp.fc1.w", {d, hidden}), rng);
  p.add(pre + ".mlp.fc1.b", {hidden});
  init_normal(p.add(pre + ".mlp.fc2.w", {hidden, d}), rng);
  p.add(pre + ".mlp.fc2.b", {d});
}

template <class T>
void add_final_norm(ParamStore<T>& p, const std::string& pre, std::size_t d) {
  auto& g = p.add(pre + ".ln.g", {d});
  for (auto& v : g.mutable_values()) v = T(1);
  p.add(pre + ".ln.b", {d});
}

}  // namespace detail

/// Truncated-normal(0.02) weights and embeddings, unit LayerNorm gains,
/// zero biases.
template <class T>
Model<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model<T> m;
  m.cfg = cfg;
  auto& p = m.params;
  Rng rng = Rng::derive(seed, {0x696e6974ULL});
  const std::size_t d = cfg.d_model, hidden = cfg.mlp_ratio * d;
  detail::init_normal(p.add("img_embed", {cfg.image_vocab + 1, d}), rng);
  detail::init_normal(p.add("txt_embed", {cfg.text_vocab, d}), rng);
  detail::init_normal(p.add("img_pos", {cfg.image_tokens, d}), rng);
  detail::init_normal(p.add("txt_pos", {cfg.max_text, d}), rng);
  for (std::size_t i = 0; i < cfg.encoder_layers; ++i) detail::add_block(p, "enc." + std::to_string(i), d, hidden, rng);
  detail::add_final_norm(p, "enc", d);
  detail::init_normal(p.add("tdec.pos", {cfg.max_text, d}), rng);
  for (std::size_t i = 0; i < cfg.text_decoder_layers; ++i)
    detail::add_block(p, "tdec." + std::to_string(i), d, hidden, rng);
  detail::add_final_norm(p, "tdec", d);
  detail::init_normal(p.add("tdec.head.w", {d, cfg.text_vocab}), rng);
  p.add("tdec.head.b", {cfg.text_vocab});
  detail::init_normal(p.add("idec.mask_token", {1, d}), rng);
  detail::init_normal(p.add("idec.pos", {cfg.image_tokens, d}), rng);
  for (std::size_t i = 0; i < cfg.image_decoder_layers; ++i)
    detail::add_block(p, "idec." + std::to_string(i), d, hidden, rng);
  detail::add_final_norm(p, "idec", d);
  detail::init_normal(p.add("idec.head.w", {d, cfg.image_vocab}), rng);
  p.add("idec.head.b", {cfg.image_vocab});
  return m;
}

// ---------------------------------------------------------------------------
// Masks.

enum class MaskPurpose { kT2I, kI2T };

/// normal(0.75, 0.25) resampled until it lands in [0.5, max]; max is 1.0 for
/// T2I and 0.75 for I2T.
inline double sample_mask_ratio(Rng& rng, MaskPurpose purpose) {
  const double hi = purpose == MaskPurpose::kT2I ? 1.0 : 0.75;
  for (;;) {
    double r = rng.normal(0.75, 0.25);
    if (r >= 0.5 && r <= hi) return r;
  }
}

struct MaskSpec {
  std::array<bool, kImageTokens> masked{};
  // Masked positions in the order they are dropped from the encoder input.
  std::vector<int> drop_order;

  std::size_t count() const {
    std::size_t n = 0;
    for (bool b : masked) n += b;
    return n;
  }
  double ratio() const { return static_cast<double>(count()) / static_cast<double>(kImageTokens); }

  static MaskSpec none() { return {}; }
  static MaskSpec all() {
    MaskSpec m;
    m.masked.fill(true);
    for (int k = 0; k < static_cast<int>(kImageTokens); ++k) m.drop_order.push_back(k);
    return m;
  }
  /// Masks exactly the listed positions, dropping them in the given order.
  static MaskSpec of(const std::vector<int>& positions) {
    MaskSpec m;
    for (int k : positions) {
      if (k < 0 || k >= static_cast<int>(kImageTokens) || m.masked[static_cast<std::size_t>(k)])
        throw std::invalid_argument("mask: bad or repeated position " + std::to_string(k));
      m.masked[static_cast<std::size_t>(k)] = true;
      m.drop_order.push_back(k);
    }
    return m;
  }
};

inline std::size_t masked_count_for(double ratio) {
  auto n = static_cast<long>(std::lround(ratio * static_cast<double>(kImageTokens)));
  return static_cast<std::size_t>(std::clamp<long>(n, 1, static_cast<long>(kImageTokens)));
}

/// Random mask with round(ratio*K) positions (clamped to [1, K]).
inline MaskSpec random_mask(Rng& rng, std::size_t n_masked) {
  std::array<int, kImageTokens> perm;
  for (std::size_t k = 0; k < kImageTokens; ++k) perm[k] = static_cast<int>(k);
  rng.shuffle(perm.begin(), perm.end());
  return MaskSpec::of(std::vector<int>(perm.begin(), perm.begin() + static_cast<long>(n_masked)));
}

inline MaskSpec sample_mask(Rng& rng, MaskPurpose purpose) {
  return random_mask(rng, masked_count_for(sample_mask_ratio(rng, purpose)));
}

// ---------------------------------------------------------------------------
// Inputs.

/// A batch of images given either as token ids or as (possibly straight-
/// through) one-hot rows [B*K, V_img] that are multiplied into the embedding
/// table so that gradients reach whatever produced them.
template <class T>
struct ImageInput {
  std::vector<std::array<int, kImageTokens>> ids;
  Tensor<T> onehot;
  std::size_t batch() const { return onehot ? onehot.dim(0) / kImageTokens : ids.size(); }
};

/// A batch of encoder texts. Each entry is a token list (caption + EOS) or
/// the single EMPTY token. `onehot`, when set, holds rows [B*Lmax, V_txt] in
/// padded layout and replaces the id lookup.
template <class T>
struct TextInput {
  std::vector<std::vector<int>> ids;
  Tensor<T> onehot;
  std::size_t batch() const { return ids.size(); }
  std::size_t max_len() const {
    std::size_t n = 0;
    for (auto& t : ids) n = std::max(n, t.size());
    return n;
  }
  static TextInput empty(std::size_t batch) { return {std::vector<std::vector<int>>(batch, {kEmpty}), {}}; }
};

struct ForwardOptions {
  Rng* dropout = nullptr;  // null disables dropout
};

template <class T>
struct EncoderOutput {
  Tensor<T> features;                  // [B, T, d]
  std::size_t kept_image = 0;          // image rows per example (rows 0..kept_image-1)
  std::vector<std::vector<int>> kept;  // per example: image position of each kept row
  std::vector<std::size_t> text_len;   // per example
  std::vector<MaskSpec> masks;
  std::size_t batch() const { return kept.size(); }
  std::size_t seq() const { return features.dim(1); }
  bool valid(std::size_t b, std::size_t row) const { return row < kept_image + text_len[b]; }
};

// ---------------------------------------------------------------------------
// Transformer pieces.

namespace detail {

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng* rng) {
  if (rng == nullptr || p <= 0.0) return x;
  std::vector<T> keep(x.size());
  const T scale = T(1.0 / (1.0 - p));
  for (auto& v : keep) v = rng->uniform() < p ? T(0) : scale;
  return mul(x, Tensor<T>(x.shape(), std::move(keep)));
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const ParamStore<T>& p, const std::string& name) {
  return add(matmul(x, p[name + ".w"]), p[name + ".b"]);
}

/// Multi-head self attention over x [B, S, d] with an additive bias
/// [B*H, S, S] (0 or a large negative value).
template <class T>
Tensor<T> attention(const Tensor<T>& x, const Tensor<T>& bias, const ParamStore<T>& p, const std::string& pre,
                    std::size_t heads) {
  const std::size_t B = x.dim(0), S = x.dim(1), d = x.dim(2), dh = d / heads;
  auto qkv = linear(x, p, pre + ".qkv");                 // [B, S, 3d]
  qkv = permute(reshape(qkv, {B, S, 3, heads, dh}), {2, 0, 3, 1, 4});  // [3, B, H, S, dh]
  auto q = reshape(slice(qkv, 0, 0, 1), {B * heads, S, dh});
  auto k = reshape(slice(qkv, 0, 1, 2), {B * heads, S, dh});
  auto v = reshape(slice(qkv, 0, 2, 3), {B * heads, S, dh});
  auto scores = scale(matmul(q, transpose(k, 1, 2)), T(1.0 / std::sqrt(static_cast<double>(dh))));
  auto attn = softmax(add(scores, bias));
  auto ctx = matmul(attn, v);  // [B*H, S, dh]
  ctx = reshape(permute(reshape(ctx, {B, heads, S, dh}), {0, 2, 1, 3}), {B, S, d});
  return linear(ctx, p, pre + ".out");
}

template <class T>
Tensor<T> block(const Tensor<T>& x, const Tensor<T>& bias, const ParamStore<T>& p, const std::string& pre,
                const ModelConfig& cfg, const ForwardOptions& opt) {
  auto h = layer_norm(x, p[pre + ".ln1.g"], p[pre + ".ln1.b"]);
  auto y = add(x, dropout(attention(h, bias, p, pre + ".attn", cfg.n_heads), cfg.dropout, opt.dropout));
  auto h2 = layer_norm(y, p[pre + ".ln2.g"], p[pre + ".ln2.b"]);
  auto mlp = linear(gelu(linear(h2, p, pre + ".mlp.fc1")), p, pre + ".mlp.fc2");
  return add(y, dropout(mlp, cfg.dropout, opt.dropout));
}

template <class T>
Tensor<T> stack(Tensor<T> x, const Tensor<T>& bias, const ParamStore<T>& p, const std::string& pre,
                std::size_t layers, const ModelConfig& cfg, const ForwardOptions& opt) {
  for (std::size_t i = 0; i < layers; ++i) x = block(x, bias, p, pre + "." + std::to_string(i), cfg, opt);
  return layer_norm(x, p[pre + ".ln.g"], p[pre + ".ln.b"]);
}

inline constexpr double kMaskedScore = -1e9;

/// bias[b*H + h][i][j] = 0 if allowed(b, i, j) else a large negative value.
template <class T, class F>
Tensor<T> attention_bias(std::size_t B, std::size_t heads, std::size_t S, F allowed) {
  std::vector<T> v(B * heads * S * S);
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<T> one(S * S);
    for (std::size_t i = 0; i < S; ++i)
      for (std::size_t j = 0; j < S; ++j) one[i * S + j] = allowed(b, i, j) ? T(0) : T(kMaskedScore);
    for (std::size_t h = 0; h < heads; ++h) std::copy(one.begin(), one.end(), v.begin() + (b * heads + h) * S * S);
  }
  return Tensor<T>(Shape{B * heads, S, S}, std::move(v));
}

}  // namespace detail

/// Runs the joint encoder. Masked image positions carry the MASK embedding;
/// the first min(K/2, m) entries of each mask's drop order (m = smallest
/// masked count in the batch) are removed from the sequence entirely.
template <class T>
EncoderOutput<T> encode(const Model<T>& model, const ImageInput<T>& image, const std::vector<MaskSpec>& masks,
                        const TextInput<T>& text, const ForwardOptions& opt = {}) {
  const auto& cfg = model.cfg;
  const auto& p = model.params;
  const std::size_t B = image.batch(), K = cfg.image_tokens, d = cfg.d_model;
  if (masks.size() != B || text.batch() != B)
    throw ShapeError("encode: batch sizes differ (image " + std::to_string(B) + ", masks " +
                     std::to_string(masks.size()) + ", text " + std::to_string(text.batch()) + ")");
  if (B == 0) throw ShapeError("encode: empty batch");
  std::size_t min_masked = K;
  for (auto& m : masks) min_masked = std::min(min_masked, m.count());
  const std::size_t n_drop = std::min(K / 2, min_masked);
  const std::size_t kept = K - n_drop;
  const std::size_t Lt = text.max_len();
  if (Lt > cfg.max_text)
    throw std::invalid_argument("encode: text of length " + std::to_string(Lt) + " exceeds L=" +
                                std::to_string(cfg.max_text));
  for (auto& t : text.ids)
    if (t.empty()) throw std::invalid_argument("encode: empty text; use the EMPTY token");
  const std::size_t S = kept + Lt;

  // Source rows: [image rows (B*K) | MASK | text rows (B*Lt) | zero].
  Tensor<T> img_rows;
  if (image.onehot) {
    if (image.onehot.rank() != 2 || image.onehot.dim(1) != cfg.image_vocab)
      throw ShapeError("encode: one-hot image rows " + to_string(image.onehot.shape()));
    img_rows = matmul(image.onehot, slice(p["img_embed"], 0, 0, cfg.image_vocab));
  } else {
    std::vector<int> ids;
    ids.reserve(B * K);
    for (auto& row : image.ids)
      for (int t : row) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.image_vocab)
          throw std::out_of_range("encode: image token " + std::to_string(t));
        ids.push_back(t);
      }
    img_rows = embedding(p["img_embed"], ids);
  }
  Tensor<T> mask_row = slice(p["img_embed"], 0, cfg.image_vocab, cfg.image_vocab + 1);
  Tensor<T> txt_rows;
  if (text.onehot) {
    if (text.onehot.rank() != 2 || text.onehot.dim(0) != B * Lt || text.onehot.dim(1) != cfg.text_vocab)
      throw ShapeError("encode: one-hot text rows " + to_string(text.onehot.shape()));
    txt_rows = matmul(text.onehot, p["txt_embed"]);
  } else {
    std::vector<int> ids(B * Lt, kPad);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t l = 0; l < text.ids[b].size(); ++l) ids[b * Lt + l] = text.ids[b][l];
    txt_rows = embedding(p["txt_embed"], ids);
  }
  Tensor<T> zero = Tensor<T>::zeros({1, d});
  Tensor<T> source = concat<T>({img_rows, mask_row, txt_rows, zero}, 0);
  Tensor<T> pos_source = concat<T>({p["img_pos"], p["txt_pos"], zero}, 0);
  const std::size_t mask_at = B * K, txt_at = B * K + 1, zero_at = B * K + 1 + B * Lt;
  const std::size_t pos_txt = K, pos_zero = K + cfg.max_text;

  EncoderOutput<T> out;
  out.kept_image = kept;
  out.masks = masks;
  std::vector<std::size_t> rows, pos_rows;
  rows.reserve(B * S);
  pos_rows.reserve(B * S);
  for (std::size_t b = 0; b < B; ++b) {
    std::array<bool, kImageTokens> dropped{};
    if (masks[b].drop_order.size() < n_drop) throw std::invalid_argument("encode: mask drop order too short");
    for (std::size_t i = 0; i < n_drop; ++i) {
      int k = masks[b].drop_order[i];
      if (!masks[b].masked[static_cast<std::size_t>(k)]) throw std::invalid_argument("encode: dropping an unmasked position");
      dropped[static_cast<std::size_t>(k)] = true;
    }
    std::vector<int> kept_pos;
    for (std::size_t k = 0; k < K; ++k) {
      if (dropped[k]) continue;
      kept_pos.push_back(static_cast<int>(k));
      rows.push_back(masks[b].masked[k] ? mask_at : b * K + k);
      pos_rows.push_back(k);
    }
    const std::size_t len = text.ids[b].size();
    for (std::size_t l = 0; l < Lt; ++l) {
      rows.push_back(l < len ? txt_at + b * Lt + l : zero_at);
      pos_rows.push_back(l < len ? pos_txt + l : pos_zero);
    }
    out.kept.push_back(std::move(kept_pos));
    out.text_len.push_back(len);
  }
  Tensor<T> x = add(gather_rows(source, rows), gather_rows(pos_source, pos_rows));
  x = reshape(x, {B, S, d});
  auto bias = detail::attention_bias<T>(B, cfg.n_heads, S, [&](std::size_t b, std::size_t, std::size_t j) {
    return j < kept + out.text_len[b];
  });
  out.features = detail::stack(x, bias, p, "enc", cfg.encoder_layers, cfg, opt);
  return out;
}

/// Gradient multiplier applied to encoder features entering the text decoder.
inline constexpr double kTextDecoderGradScale = 0.1;

/// Teacher-forced text decoding. `prefix[b]` starts with BOS; returns logits
/// [B, P, V_txt] (P = longest prefix). Position l sees the encoder features
/// and prefix tokens 0..l. With `context` absent the decoder runs on text
/// alone.
template <class T>
Tensor<T> decode_text(const Model<T>& model, const EncoderOutput<T>* context, const std::vector<std::vector<int>>& prefix,
                      const ForwardOptions& opt = {}) {
  const auto& cfg = model.cfg;
  const auto& p = model.params;
  const std::size_t B = prefix.size(), d = cfg.d_model;
  if (B == 0) throw ShapeError("decode_text: empty batch");
  if (context && context->batch() != B) throw ShapeError("decode_text: context batch differs from prefix batch");
  std::size_t P = 0;
  for (auto& t : prefix) {
    if (t.empty() || t[0] != kBos) throw std::invalid_argument("decode_text: prefix must begin with BOS");
    P = std::max(P, t.size());
  }
  if (P > cfg.max_text)
    throw std::invalid_argument("decode_text: prefix of length " + std::to_string(P) + " exceeds L=" +
                                std::to_string(cfg.max_text));
  std::vector<int> ids(B * P, kPad);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < prefix[b].size(); ++l) ids[b * P + l] = prefix[b][l];
  Tensor<T> txt = reshape(embedding(p["txt_embed"], ids), {B, P, d});
  txt = add(txt, slice(p["tdec.pos"], 0, 0, P));
  const std::size_t C = context ? context->seq() : 0;
  Tensor<T> x = txt;
  if (context) x = concat<T>({scale_gradient(context->features, T(kTextDecoderGradScale)), txt}, 1);
  const std::size_t S = C + P;
  auto bias = detail::attention_bias<T>(B, cfg.n_heads, S, [&](std::size_t b, std::size_t i, std::size_t j) {
    if (j < C) return context->valid(b, j);
    if (i < C) return false;
    return j <= i;
  });
  auto h = detail::stack(x, bias, p, "tdec", cfg.text_decoder_layers, cfg, opt);
  if (C > 0) h = slice(h, 1, C, S);
  return detail::linear(h, p, "tdec.head");
}

/// Image decoder over all K positions: kept encoder rows return to their
/// grid positions and dropped positions receive the learned mask token.
/// Returns logits [B, K, V_img].
template <class T>
Tensor<T> decode_image(const Model<T>& model, const EncoderOutput<T>& enc, const ForwardOptions& opt = {}) {
  const auto& cfg = model.cfg;
  const auto& p = model.params;
  const std::size_t B = enc.batch(), K = cfg.image_tokens, d = cfg.d_model, S = enc.seq();
  Tensor<T> source = concat<T>({reshape(enc.features, {B * S, d}), p["idec.mask_token"]}, 0);
  std::vector<std::size_t> rows(B * K, B * S);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < enc.kept[b].size(); ++r) rows[b * K + static_cast<std::size_t>(enc.kept[b][r])] = b * S + r;
  Tensor<T> x = reshape(gather_rows(source, rows), {B, K, d});
  x = add(x, p["idec.pos"]);
  auto bias = Tensor<T>::zeros({B * cfg.n_heads, K, K});
  auto h = detail::stack(x, bias, p, "idec", cfg.image_decoder_layers, cfg, opt);
  return detail::linear(h, p, "idec.head");
}

/// Teacher-forcing prefix (BOS + caption without its last token) for a
/// caption that ends in EOS.
inline std::vector<int> prefix_of(const std::vector<int>& caption) {
  std::vector<int> pre{kBos};
  pre.insert(pre.end(), caption.begin(), caption.end() - (caption.empty() ? 0 : 1));
  return pre;
}

}  // namespace itit
