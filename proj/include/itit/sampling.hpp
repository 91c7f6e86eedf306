#pragma once

// Inference: iterative parallel decoding with classifier-free guidance for
// text-to-image, greedy and beam search decoding for image-to-text.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "itit/model.hpp"
#include "itit/synthdata.hpp"
#include "itit/vq.hpp"

namespace itit {

enum class RevealRule { kCategorical, kTopK };

struct SamplerConfig {
  std::size_t steps = 8;          // S
  double guidance = 2.0;          // tau
  double temperature0 = 4.5;      // confidence noise at step 0, annealed linearly to 0
  std::size_t beam = 4;
  RevealRule reveal = RevealRule::kCategorical;
  bool force_unconditional = false;  // run the EMPTY-text pass even when tau == 0

  void validate() const {
    if (steps < 1) throw std::invalid_argument("sampler: steps must be >= 1");
    if (guidance < 0.0) throw std::invalid_argument("sampler: guidance must be >= 0");
    if (beam < 1) throw std::invalid_argument("sampler: beam must be >= 1");
    if (temperature0 < 0.0) throw std::invalid_argument("sampler: temperature must be >= 0");
  }
};

/// Number of positions still masked after step s of S: floor(K cos(pi/2 (s+1)/S)),
/// lowered where needed so that every step reveals at least one token, and 0
/// after the last step.
inline std::size_t cosine_masked_count(std::size_t s, std::size_t S, std::size_t K) {
  if (S == 0 || s >= S) throw std::invalid_argument("cosine_masked_count: step out of range");
  std::size_t m = K;
  for (std::size_t i = 0; i <= s; ++i) {
    if (i + 1 == S) return 0;
    const double c = std::cos(std::numbers::pi / 2.0 * static_cast<double>(i + 1) / static_cast<double>(S));
    const auto f = static_cast<std::size_t>(std::floor(static_cast<double>(K) * c));
    m = m > 0 ? std::min(f, m - 1) : 0;
  }
  return m;
}

/// l_g = (1 + tau) l_c - tau l_u.
template <class T>
std::vector<T> cfg_mix(std::span<const T> lc, std::span<const T> lu, double tau) {
  if (lc.size() != lu.size())
    throw ShapeError("cfg_mix: conditional logits [" + std::to_string(lc.size()) + "] vs unconditional [" +
                     std::to_string(lu.size()) + "]");
  std::vector<T> out(lc.size());
  const T a = static_cast<T>(1.0 + tau), b = static_cast<T>(tau);
  for (std::size_t i = 0; i < lc.size(); ++i) out[i] = a * lc[i] - b * lu[i];
  return out;
}

struct DecodeStep {
  std::vector<int> masked_before;  // positions masked when the step began
  std::vector<int> revealed;       // positions committed in this step
  std::vector<int> tokens;         // token chosen for each revealed position
  std::vector<double> confidence;  // confidence of each revealed position
};

struct DecodeTrace {
  std::vector<DecodeStep> steps;
  void write(std::ostream& os) const {
    for (std::size_t s = 0; s < steps.size(); ++s) {
      const auto& st = steps[s];
      os << "step=" << s << " masked=" << st.masked_before.size() << " reveal=";
      for (std::size_t i = 0; i < st.revealed.size(); ++i)
        os << (i ? "," : "") << st.revealed[i] << ':' << st.tokens[i] << '@' << st.confidence[i];
      os << '\n';
    }
  }
};

struct ParallelDecodeResult {
  std::vector<ImageTokens> images;
  std::vector<DecodeTrace> traces;
};

namespace detail {

inline std::vector<double> softmax_row(const float* x, std::size_t n) {
  std::vector<double> p(n);
  double mx = *std::max_element(x, x + n);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += (p[j] = std::exp(static_cast<double>(x[j]) - mx));
  for (auto& v : p) v /= s;
  return p;
}

inline std::vector<double> log_softmax_row(const float* x, std::size_t n) {
  double mx = *std::max_element(x, x + n);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(static_cast<double>(x[j]) - mx);
  const double lse = mx + std::log(s);
  std::vector<double> lp(n);
  for (std::size_t j = 0; j < n; ++j) lp[j] = static_cast<double>(x[j]) - lse;
  return lp;
}

}  // namespace detail

/// Text-to-image generation for a batch of prompts (caption + EOS, or the
/// single EMPTY token). Every step predicts all masked positions, samples a
/// token for each, and commits the most confident ones; committed tokens are
/// never revisited.
inline ParallelDecodeResult parallel_decode(const Model<float>& model, const std::vector<std::vector<int>>& texts,
                                            const SamplerConfig& cfg, Rng& rng) {
  cfg.validate();
  NoGradScope<float> no_grad;
  const std::size_t B = texts.size(), K = model.cfg.image_tokens, V = model.cfg.image_vocab;
  ParallelDecodeResult res;
  res.images.assign(B, ImageTokens{});
  res.traces.assign(B, DecodeTrace{});
  if (B == 0) return res;
  std::vector<std::array<bool, kImageTokens>> masked(B);
  for (auto& m : masked) m.fill(true);
  TextInput<float> cond{texts, {}};
  TextInput<float> uncond = TextInput<float>::empty(B);
  const bool use_uncond = cfg.guidance > 0.0 || cfg.force_unconditional;
  std::size_t remaining = K;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const std::size_t target = cosine_masked_count(s, cfg.steps, K);
    std::vector<MaskSpec> masks(B);
    ImageInput<float> input;
    input.ids = res.images;
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<int> pos;
      for (std::size_t k = 0; k < K; ++k)
        if (masked[b][k]) pos.push_back(static_cast<int>(k));
      rng.shuffle(pos.begin(), pos.end());
      masks[b] = MaskSpec::of(pos);
    }
    auto lc = decode_image(model, encode(model, input, masks, cond));
    std::vector<float> logits(lc.values().begin(), lc.values().end());
    if (use_uncond) {
      auto lu = decode_image(model, encode(model, input, masks, uncond));
      logits = cfg_mix<float>(lc.values(), lu.values(), cfg.guidance);
    }
    const double temp = cfg.temperature0 * (1.0 - static_cast<double>(s) / static_cast<double>(cfg.steps));
    const std::size_t reveal = remaining - target;
    for (std::size_t b = 0; b < B; ++b) {
      DecodeStep step;
      std::vector<std::pair<int, double>> cand;  // position, confidence
      std::vector<int> choice(K, -1);
      for (std::size_t k = 0; k < K; ++k) {
        if (!masked[b][k]) continue;
        step.masked_before.push_back(static_cast<int>(k));
        auto p = detail::softmax_row(logits.data() + (b * K + k) * V, V);
        std::size_t tok;
        if (cfg.reveal == RevealRule::kCategorical)
          tok = rng.categorical<double>(p);
        else
          tok = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
        choice[k] = static_cast<int>(tok);
        cand.emplace_back(static_cast<int>(k), p[tok] + temp * rng.gumbel());
      }
      std::stable_sort(cand.begin(), cand.end(), [](auto& a, auto& c) { return a.second > c.second; });
      for (std::size_t i = 0; i < reveal && i < cand.size(); ++i) {
        auto k = static_cast<std::size_t>(cand[i].first);
        masked[b][k] = false;
        res.images[b][k] = choice[k];
        step.revealed.push_back(cand[i].first);
        step.tokens.push_back(choice[k]);
        step.confidence.push_back(cand[i].second);
      }
      res.traces[b].steps.push_back(std::move(step));
    }
    remaining = target;
  }
  return res;
}

/// Tokens the text decoder may never emit.
inline bool banned_output(int tok) { return tok == kBos || tok == kPad || tok == kEmpty; }

/// Caption-side encoder pass: unmasked image, EMPTY text.
inline EncoderOutput<float> encode_for_caption(const Model<float>& model, const std::vector<ImageTokens>& images) {
  ImageInput<float> in;
  in.ids = images;
  return encode(model, in, std::vector<MaskSpec>(images.size(), MaskSpec::none()), TextInput<float>::empty(images.size()));
}

/// Batched greedy decoding. Each caption ends with EOS unless it reached the
/// length limit L.
inline std::vector<std::vector<int>> greedy_captions(const Model<float>& model, const std::vector<ImageTokens>& images) {
  NoGradScope<float> no_grad;
  const std::size_t B = images.size(), L = model.cfg.max_text, V = model.cfg.text_vocab;
  std::vector<std::vector<int>> out(B);
  if (B == 0) return out;
  auto enc = encode_for_caption(model, images);
  std::vector<std::vector<int>> prefix(B, std::vector<int>{kBos});
  std::vector<bool> done(B, false);
  for (std::size_t l = 0; l < L; ++l) {
    auto logits = decode_text(model, &enc, prefix);
    const std::size_t P = prefix[0].size();
    bool all = true;
    for (std::size_t b = 0; b < B; ++b) {
      const float* row = logits.values().data() + (b * P + (P - 1)) * V;
      int best = -1;
      for (std::size_t v = 0; v < V; ++v) {
        if (banned_output(static_cast<int>(v))) continue;
        if (best < 0 || row[v] > row[best]) best = static_cast<int>(v);
      }
      prefix[b].push_back(done[b] ? kPad : best);
      if (!done[b]) {
        out[b].push_back(best);
        if (best == kEos) done[b] = true;
      }
      all = all && done[b];
    }
    if (all) break;
  }
  return out;
}

/// Length-normalized beam search for one image: hypotheses are ranked by
/// mean log-probability per emitted token. Candidates are ordered by score,
/// then lower token index, then lower beam index. Each step keeps the best
/// `beam` candidates; those ending in EOS (or reaching L) are set aside as
/// finished.
inline std::vector<int> caption_beam(const Model<float>& model, const ImageTokens& image, std::size_t beam) {
  if (beam < 1) throw std::invalid_argument("caption_beam: beam must be >= 1");
  NoGradScope<float> no_grad;
  const std::size_t L = model.cfg.max_text, V = model.cfg.text_vocab;
  auto enc1 = encode_for_caption(model, {image});
  struct Hyp {
    std::vector<int> tokens;
    double logp = 0.0;
    double score() const { return tokens.empty() ? 0.0 : logp / static_cast<double>(tokens.size()); }
  };
  std::vector<Hyp> live{Hyp{}}, finished;
  for (std::size_t l = 0; l < L && !live.empty(); ++l) {
    // Repeat the single-image context across the live hypotheses.
    EncoderOutput<float> enc = enc1;
    const std::size_t H = live.size(), S = enc1.seq(), d = model.cfg.d_model;
    std::vector<float> rep;
    rep.reserve(H * S * d);
    for (std::size_t h = 0; h < H; ++h) rep.insert(rep.end(), enc1.features.values().begin(), enc1.features.values().end());
    enc.features = Tensor<float>(Shape{H, S, d}, std::move(rep));
    enc.kept.assign(H, enc1.kept[0]);
    enc.text_len.assign(H, enc1.text_len[0]);
    enc.masks.assign(H, enc1.masks[0]);
    std::vector<std::vector<int>> prefix;
    for (auto& h : live) {
      std::vector<int> p{kBos};
      p.insert(p.end(), h.tokens.begin(), h.tokens.end());
      prefix.push_back(std::move(p));
    }
    auto logits = decode_text(model, &enc, prefix);
    const std::size_t P = prefix[0].size();
    struct Cand {
      double score;
      int token;
      std::size_t from;
      double logp;
    };
    std::vector<Cand> cands;
    for (std::size_t h = 0; h < H; ++h) {
      auto lp = detail::log_softmax_row(logits.values().data() + (h * P + P - 1) * V, V);
      for (std::size_t v = 0; v < V; ++v) {
        if (banned_output(static_cast<int>(v))) continue;
        double total = live[h].logp + lp[v];
        cands.push_back({total / static_cast<double>(live[h].tokens.size() + 1), static_cast<int>(v), h, total});
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.token != b.token) return a.token < b.token;
      return a.from < b.from;
    });
    std::vector<Hyp> next;
    for (std::size_t i = 0; i < cands.size() && i < beam; ++i) {
      Hyp h{live[cands[i].from].tokens, cands[i].logp};
      h.tokens.push_back(cands[i].token);
      if (cands[i].token == kEos || h.tokens.size() == L)
        finished.push_back(std::move(h));
      else
        next.push_back(std::move(h));
    }
    live = std::move(next);
  }
  for (auto& h : live) finished.push_back(h);
  const Hyp* best = nullptr;
  for (auto& h : finished)
    if (!best || h.score() > best->score()) best = &h;
  return best ? best->tokens : std::vector<int>{};
}

/// Captions for a batch: greedy for beam 1, beam search otherwise.
inline std::vector<std::vector<int>> caption_images(const Model<float>& model, const std::vector<ImageTokens>& images,
                                                    std::size_t beam) {
  if (beam == 1) return greedy_captions(model, images);
  std::vector<std::vector<int>> out;
  out.reserve(images.size());
  for (auto& img : images) out.push_back(caption_beam(model, img, beam));
  return out;
}

// ---------------------------------------------------------------------------
// Cycle chains.

struct ChainLink {
  std::string kind;  // "caption" or "image"
  std::vector<int> caption;
  ImageTokens image{};
  double retention = 0.0;
  DecodeTrace trace;  // image links made by parallel_decode
};

struct ChainResult {
  std::vector<ChainLink> links;          // start artifact first
  std::vector<double> round_retention;   // index r: after r full cycles (0 = start)
};

/// Alternates text-to-image and image-to-text for `rounds` full cycles,
/// starting from a caption. Every artifact is scored against the starting
/// scene through the oracles (pixels via the codebook and extract_scene;
/// captions via parse_caption with partial credit).
inline ChainResult cycle_chain(const Model<float>& model, const Codebook& cb, const std::vector<int>& start_caption,
                               std::size_t rounds, const SamplerConfig& cfg, Rng& rng) {
  ChainResult res;
  auto parsed = parse_caption(start_caption);
  if (!parsed.ok()) throw std::invalid_argument("cycle_chain: start caption does not parse");
  const SceneSpec truth = *parsed.scene;
  res.links.push_back({"caption", start_caption, {}, 1.0, {}});
  res.round_retention.push_back(1.0);
  std::vector<int> text = start_caption;
  for (std::size_t r = 0; r < rounds; ++r) {
    auto gen = parallel_decode(model, {text}, cfg, rng);
    ImageTokens img = gen.images[0];
    double img_ret = attribute_score(as_partial(extract_scene(decode(img, cb))), truth);
    res.links.push_back({"image", {}, img, img_ret, std::move(gen.traces[0])});
    text = caption_beam(model, img, cfg.beam);
    double txt_ret = attribute_score(parse_caption(text).partial, truth);
    res.links.push_back({"caption", text, {}, txt_ret, {}});
    res.round_retention.push_back(txt_ret);
    // The next round needs a prompt the encoder accepts.
    if (text.empty()) text = {kEmpty};
  }
  return res;
}

/// Same chain starting from an image.
inline ChainResult cycle_chain(const Model<float>& model, const Codebook& cb, const ImageTokens& start_image,
                               const SceneSpec& truth, std::size_t rounds, const SamplerConfig& cfg, Rng& rng) {
  ChainResult res;
  res.links.push_back({"image", {}, start_image, attribute_score(as_partial(extract_scene(decode(start_image, cb))), truth), {}});
  res.round_retention.push_back(1.0);
  ImageTokens img = start_image;
  for (std::size_t r = 0; r < rounds; ++r) {
    auto text = caption_beam(model, img, cfg.beam);
    res.links.push_back({"caption", text, {}, attribute_score(parse_caption(text).partial, truth), {}});
    if (text.empty()) text = {kEmpty};
    auto gen = parallel_decode(model, {text}, cfg, rng);
    img = gen.images[0];
    double ret = attribute_score(as_partial(extract_scene(decode(img, cb))), truth);
    res.links.push_back({"image", {}, img, ret, std::move(gen.traces[0])});
    res.round_retention.push_back(ret);
  }
  return res;
}

}  // namespace itit
