#pragma once

// Training losses: paired I2T / T2I, the unconditional I2I branch, the T2T
// ablation, and the two cycle losses with half / full gradient modes.
//
// Randomness is drawn from streams derived from a per-call seed and a fixed
// purpose tag. The last leg of each cycle uses the same tags as the paired
// loss it mirrors, so substituting ground truth reproduces that loss exactly.

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "itit/model.hpp"
#include "itit/sampling.hpp"

namespace itit {

enum class CycleMode { kOff, kHalf, kFull };

inline std::string_view cycle_mode_name(CycleMode m) {
  switch (m) {
    case CycleMode::kOff: return "off";
    case CycleMode::kHalf: return "half";
    case CycleMode::kFull: return "full";
  }
  return "?";
}

inline CycleMode parse_cycle_mode(std::string_view s) {
  if (s == "off") return CycleMode::kOff;
  if (s == "half") return CycleMode::kHalf;
  if (s == "full") return CycleMode::kFull;
  throw std::invalid_argument("unknown cycle mode '" + std::string(s) + "' (expected off, half or full)");
}

inline constexpr std::array<std::string_view, 6> kObjectiveNames = {"i2t", "t2i", "i2i", "t2t", "t2i2t", "i2t2i"};

struct ObjectiveMode {
  bool i2t = true;
  bool t2i = true;
  bool i2i = true;
  bool t2t = false;
  CycleMode t2i2t = CycleMode::kOff;
  CycleMode i2t2i = CycleMode::kOff;
  std::map<std::string, double> weights = {{"i2t", 1.0}, {"t2i", 1.0}, {"i2i", 1.0},
                                           {"t2t", 1.0}, {"t2i2t", 1.0}, {"i2t2i", 1.0}};
  // Full I2T2I: scale on the gradient that reaches the text decoder through
  // the straight-through text. At full strength the captioner drifts toward
  // a private code that serves image reconstruction.
  double i2t2i_text_grad_scale = 0.1;
  // Cycles contribute nothing before this step, so the paired losses first
  // give both directions usable outputs to cycle through.
  std::size_t cycle_start = 0;

  bool enabled(std::string_view name) const {
    if (name == "i2t") return i2t;
    if (name == "t2i") return t2i;
    if (name == "i2i") return i2i;
    if (name == "t2t") return t2t;
    if (name == "t2i2t") return t2i2t != CycleMode::kOff;
    if (name == "i2t2i") return i2t2i != CycleMode::kOff;
    throw std::invalid_argument("unknown objective " + std::string(name));
  }
  double weight(std::string_view name) const { return weights.at(std::string(name)); }

  void validate() const {
    if (!(i2t2i_text_grad_scale >= 0.0)) throw std::invalid_argument("objective mode: i2t2i_text_grad_scale must be >= 0");
    bool any = false;
    for (auto n : kObjectiveNames) any = any || enabled(n);
    if (!any) throw std::invalid_argument("objective mode: no objective enabled");
    for (auto& [n, w] : weights) {
      if (!(w >= 0.0)) throw std::invalid_argument("objective mode: weight of " + n + " must be >= 0");
      bool known = false;
      for (auto k : kObjectiveNames) known = known || k == n;
      if (!known) throw std::invalid_argument("objective mode: unknown weight " + n);
    }
  }
  bool operator==(const ObjectiveMode&) const = default;
};

/// A scalar loss and the number of target tokens that produced it.
template <class T>
struct LossTerm {
  Tensor<T> value;
  std::size_t tokens = 0;
};

struct LossReport {
  std::map<std::string, double> losses;
  std::map<std::string, std::size_t> tokens;
  std::map<std::string, double> weights;
  double total = 0.0;
  std::size_t skipped = 0;  // cycle records dropped because synthesis failed
};

namespace streams {
inline constexpr std::uint64_t kMask = 1;
inline constexpr std::uint64_t kDropout = 2;
inline constexpr std::uint64_t kSynthesis = 3;
inline constexpr std::uint64_t kReconMask = 4;
inline constexpr std::uint64_t kReconDropout = 5;
inline constexpr std::uint64_t kGumbel = 6;
}  // namespace streams

inline constexpr double kTextSmoothing = 0.1;
inline constexpr double kGumbelStrength = 1.0;

namespace detail {

template <class T>
std::vector<MaskSpec> sample_masks(std::size_t n, MaskPurpose purpose, Rng& rng) {
  std::vector<MaskSpec> m;
  m.reserve(n);
  for (std::size_t i = 0; i < n; ++i) m.push_back(sample_mask(rng, purpose));
  return m;
}

/// Smoothed next-token cross entropy over the real (non-pad) positions of
/// `logits` [B, P, V], with targets = caption tokens (ending in EOS).
template <class T>
LossTerm<T> caption_ce(const Tensor<T>& logits, const std::vector<std::vector<int>>& captions) {
  const std::size_t B = logits.dim(0), P = logits.dim(1), V = logits.dim(2);
  std::vector<std::size_t> rows;
  std::vector<int> targets;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < captions[b].size(); ++l) {
      rows.push_back(b * P + l);
      targets.push_back(captions[b][l]);
    }
  auto picked = gather_rows(reshape(logits, {B * P, V}), rows);
  return {cross_entropy_smoothed(picked, targets, T(kTextSmoothing)), targets.size()};
}

template <class T>
void check_captions(const std::vector<std::vector<int>>& captions, const ModelConfig& cfg) {
  for (auto& c : captions)
    if (c.empty() || c.size() > cfg.max_text)
      throw std::invalid_argument("loss: caption length " + std::to_string(c.size()) + " outside [1, L]");
}

}  // namespace detail

/// I2T leg shared by loss_i2t and the last leg of cycle_t2i2t: I2T-ratio mask
/// on the image, EMPTY text, teacher-forced caption, smoothed CE.
template <class T>
LossTerm<T> i2t_leg(const Model<T>& model, const ImageInput<T>& image, const std::vector<std::vector<int>>& captions,
                    std::uint64_t seed, bool train = true) {
  detail::check_captions<T>(captions, model.cfg);
  const std::size_t B = image.batch();
  Rng mask_rng = Rng::derive(seed, {streams::kMask});
  Rng drop_rng = Rng::derive(seed, {streams::kDropout});
  ForwardOptions opt{train ? &drop_rng : nullptr};
  auto masks = detail::sample_masks<T>(B, MaskPurpose::kI2T, mask_rng);
  auto enc = encode(model, image, masks, TextInput<T>::empty(B), opt);
  std::vector<std::vector<int>> prefix;
  for (auto& c : captions) prefix.push_back(prefix_of(c));
  auto logits = decode_text(model, &enc, prefix, opt);
  return detail::caption_ce(logits, captions);
}

/// T2I leg shared by loss_t2i, loss_i2i and the last leg of cycle_i2t2i:
/// T2I-ratio mask, conditioning text, CE on masked positions only.
template <class T>
LossTerm<T> t2i_leg(const Model<T>& model, const std::vector<ImageTokens>& images, const TextInput<T>& text,
                    std::uint64_t seed, bool train = true) {
  const std::size_t B = images.size(), K = model.cfg.image_tokens, V = model.cfg.image_vocab;
  Rng mask_rng = Rng::derive(seed, {streams::kMask});
  Rng drop_rng = Rng::derive(seed, {streams::kDropout});
  ForwardOptions opt{train ? &drop_rng : nullptr};
  auto masks = detail::sample_masks<T>(B, MaskPurpose::kT2I, mask_rng);
  ImageInput<T> in;
  in.ids = images;
  auto enc = encode(model, in, masks, text, opt);
  auto logits = decode_image(model, enc, opt);
  std::vector<std::size_t> rows;
  std::vector<int> targets;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k)
      if (masks[b].masked[k]) {
        rows.push_back(b * K + k);
        targets.push_back(images[b][k]);
      }
  auto picked = gather_rows(reshape(logits, {B * K, V}), rows);
  return {cross_entropy_smoothed(picked, targets, T(0)), targets.size()};
}

template <class T>
LossTerm<T> loss_i2t(const Model<T>& model, const std::vector<ImageTokens>& images,
                     const std::vector<std::vector<int>>& captions, std::uint64_t seed, bool train = true) {
  ImageInput<T> in;
  in.ids = images;
  return i2t_leg(model, in, captions, seed, train);
}

template <class T>
LossTerm<T> loss_t2i(const Model<T>& model, const std::vector<ImageTokens>& images,
                     const std::vector<std::vector<int>>& captions, std::uint64_t seed, bool train = true) {
  detail::check_captions<T>(captions, model.cfg);
  return t2i_leg(model, images, TextInput<T>{captions, {}}, seed, train);
}

/// loss_t2i with every text replaced by EMPTY.
template <class T>
LossTerm<T> loss_i2i(const Model<T>& model, const std::vector<ImageTokens>& images, std::uint64_t seed,
                     bool train = true) {
  return t2i_leg(model, images, TextInput<T>::empty(images.size()), seed, train);
}

/// Language modelling on captions with no image context.
template <class T>
LossTerm<T> loss_t2t(const Model<T>& model, const std::vector<std::vector<int>>& captions, std::uint64_t seed,
                     bool train = true) {
  detail::check_captions<T>(captions, model.cfg);
  Rng drop_rng = Rng::derive(seed, {streams::kDropout});
  ForwardOptions opt{train ? &drop_rng : nullptr};
  std::vector<std::vector<int>> prefix;
  for (auto& c : captions) prefix.push_back(prefix_of(c));
  auto logits = decode_text<T>(model, nullptr, prefix, opt);
  return detail::caption_ce(logits, captions);
}

struct CycleOptions {
  CycleMode mode = CycleMode::kFull;
  SamplerConfig synthesis{8, 0.0, 4.5, 1, RevealRule::kCategorical, false};
  bool train = true;
  double text_grad_scale = 1.0;  // I2T2I only, see ObjectiveMode
};

/// Text -> image -> text. (a) synthesize I' from the caption without
/// gradients; (b) mask I' and reconstruct it with one T2I pass whose encoder
/// output is frozen; (c) discretize the masked positions with straight-through
/// Gumbel softmax (stop-gradient in half mode) and keep I' elsewhere;
/// (d) I2T loss on the result against the original caption.
/// `counterpart` replaces the result of (a)-(c) (used by reduction tests).
inline LossTerm<float> cycle_t2i2t(const Model<float>& model, const std::vector<std::vector<int>>& captions,
                                   std::uint64_t seed, const CycleOptions& opt,
                                   const std::vector<ImageTokens>* counterpart = nullptr) {
  if (opt.mode == CycleMode::kOff) throw std::invalid_argument("cycle_t2i2t: mode is off");
  detail::check_captions<float>(captions, model.cfg);
  const std::size_t B = captions.size(), K = model.cfg.image_tokens, V = model.cfg.image_vocab;
  ImageInput<float> recon;
  if (counterpart) {
    std::vector<int> ids;
    for (auto& img : *counterpart) ids.insert(ids.end(), img.begin(), img.end());
    recon.onehot = one_hot<float>(ids, V);
  } else {
    std::vector<ImageTokens> synth;
    {
      Rng rng = Rng::derive(seed, {streams::kSynthesis});
      synth = parallel_decode(model, captions, opt.synthesis, rng).images;
    }
    Rng mask_rng = Rng::derive(seed, {streams::kReconMask});
    Rng drop_rng = Rng::derive(seed, {streams::kReconDropout});
    Rng gumbel_rng = Rng::derive(seed, {streams::kGumbel});
    ForwardOptions fo{opt.train ? &drop_rng : nullptr};
    auto masks = detail::sample_masks<float>(B, MaskPurpose::kT2I, mask_rng);
    ImageInput<float> in;
    in.ids = synth;
    std::vector<int> ids;
    for (auto& img : synth) ids.insert(ids.end(), img.begin(), img.end());
    std::vector<std::size_t> masked_rows;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k)
        if (masks[b].masked[k]) masked_rows.push_back(b * K + k);
    auto reconstruct = [&]() {
      EncoderOutput<float> enc;
      {
        NoGradScope<float> frozen;
        enc = encode(model, in, masks, TextInput<float>{captions, {}}, fo);
      }
      auto logits = decode_image(model, enc, fo);
      auto rows = gather_rows(reshape(logits, {B * K, V}), masked_rows);
      return gumbel_softmax(rows, float(kGumbelStrength), gumbel_rng);
    };
    Tensor<float> st;
    if (opt.mode == CycleMode::kHalf) {
      NoGradScope<float> frozen;
      st = reconstruct();
    } else {
      st = reconstruct();
    }
    // Masked rows come from the straight-through output, the rest stay I'.
    std::vector<std::size_t> pick(B * K);
    const std::size_t n_st = masked_rows.size();
    for (std::size_t r = 0; r < B * K; ++r) pick[r] = n_st + r;
    for (std::size_t i = 0; i < n_st; ++i) pick[masked_rows[i]] = i;
    recon.onehot = gather_rows(concat<float>({st, one_hot<float>(ids, V)}, 0), pick);
  }
  return i2t_leg(model, recon, captions, seed, opt.train);
}

/// Image -> text -> image. (a) greedy-caption the image without gradients;
/// (b) teacher-force that caption once through the text decoder on a frozen
/// encoder pass; (c) straight-through one-hot of the decoder's softmax
/// (stop-gradient in half mode); (d) T2I loss on the original image tokens
/// with the one-hot text embedded through the embedding table.
/// `counterpart` replaces the text produced by (a)-(c).
inline LossTerm<float> cycle_i2t2i(const Model<float>& model, const std::vector<ImageTokens>& images,
                                   std::uint64_t seed, const CycleOptions& opt,
                                   const std::vector<std::vector<int>>* counterpart = nullptr) {
  if (opt.mode == CycleMode::kOff) throw std::invalid_argument("cycle_i2t2i: mode is off");
  const std::size_t B = images.size(), Vt = model.cfg.text_vocab;
  TextInput<float> text;
  if (counterpart) {
    detail::check_captions<float>(*counterpart, model.cfg);
    text.ids = *counterpart;
  } else {
    auto synth = greedy_captions(model, images);
    for (auto& c : synth)
      if (c.empty()) c.push_back(kEos);
    Rng drop_rng = Rng::derive(seed, {streams::kReconDropout});
    ForwardOptions fo{opt.train ? &drop_rng : nullptr};
    auto teacher = [&]() {
      EncoderOutput<float> enc;
      {
        NoGradScope<float> frozen;
        enc = encode_for_caption(model, images);
      }
      std::vector<std::vector<int>> prefix;
      for (auto& c : synth) prefix.push_back(prefix_of(c));
      auto logits = decode_text(model, &enc, prefix, fo);
      const std::size_t P = logits.dim(1);
      std::vector<std::size_t> rows;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < synth[b].size(); ++l) rows.push_back(b * P + l);
      auto st = straight_through_onehot(softmax(gather_rows(reshape(logits, {B * P, Vt}), rows)));
      return opt.text_grad_scale == 1.0 ? st : scale_gradient(st, float(opt.text_grad_scale));
    };
    Tensor<float> st;
    if (opt.mode == CycleMode::kHalf) {
      NoGradScope<float> frozen;
      st = teacher();
    } else {
      st = teacher();
    }
    // Token ids of the discretized text give lengths and padding layout.
    auto hard = argmax_rows(st);
    std::size_t r = 0;
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<int> t(hard.begin() + static_cast<long>(r), hard.begin() + static_cast<long>(r + synth[b].size()));
      r += synth[b].size();
      text.ids.push_back(std::move(t));
    }
    const std::size_t Lt = text.max_len();
    std::vector<std::size_t> pick(B * Lt, st.dim(0));
    r = 0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t l = 0; l < text.ids[b].size(); ++l) pick[b * Lt + l] = r++;
    text.onehot = gather_rows(concat<float>({st, Tensor<float>::zeros({1, Vt})}, 0), pick);
    return t2i_leg(model, images, text, seed, opt.train);
  }
  // Ground-truth substitution still goes through the one-hot embedding path.
  const std::size_t Lt = text.max_len();
  std::vector<int> ids;
  std::vector<std::size_t> pad_rows;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < Lt; ++l) ids.push_back(l < text.ids[b].size() ? text.ids[b][l] : kPad);
  auto hot = one_hot<float>(ids, Vt);
  // Padding rows carry no embedding.
  auto hv = hot.mutable_values();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = text.ids[b].size(); l < Lt; ++l) hv[(b * Lt + l) * Vt + kPad] = 0.0f;
  text.onehot = hot;
  return t2i_leg(model, images, text, seed, opt.train);
}

}  // namespace itit
