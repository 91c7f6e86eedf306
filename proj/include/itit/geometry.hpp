#pragma once

// Shared constants for the synthetic world: image geometry, token grid and
// the closed caption vocabulary. Every other module reads these from here.

#include <array>
#include <cstddef>
#include <string_view>

namespace itit {

inline constexpr std::size_t kImageSize = 32;
inline constexpr std::size_t kChannels = 3;
inline constexpr std::size_t kPatch = 8;
inline constexpr std::size_t kGrid = kImageSize / kPatch;        // 4
inline constexpr std::size_t kImageTokens = kGrid * kGrid;       // K = 16
inline constexpr std::size_t kPatchDim = kPatch * kPatch * kChannels;  // 192
inline constexpr std::size_t kPixels = kImageSize * kImageSize * kChannels;

// 3x3 zones. Each zone window is 8x8 pixels; the outer windows coincide with
// patch cells, the middle window straddles the two central patch columns/rows.
inline constexpr std::size_t kZoneRows = 3;
inline constexpr std::size_t kZones = kZoneRows * kZoneRows;
inline constexpr std::size_t kZoneWindow = 8;
inline constexpr std::array<std::size_t, 3> kZoneOrigin = {0, 12, 24};

inline constexpr std::size_t kShapes = 4;
inline constexpr std::size_t kColors = 6;
inline constexpr std::size_t kSizes = 2;
inline constexpr std::size_t kMaxObjects = 3;

// Caption vocabulary. Specials first.
enum Token : int {
  kPad = 0,
  kBos,
  kEos,
  kEmpty,
  kA,
  kAt,
  kAnd,
  kSmall,
  kLarge,
  kRed,
  kGreen,
  kBlue,
  kYellow,
  kMagenta,
  kCyan,
  kCircle,
  kSquare,
  kTriangle,
  kCross,
  kTop,
  kMiddle,
  kBottom,
  kLeft,
  kCenter,
  kRight,
  kVocabSize
};

inline constexpr std::size_t kTextVocab = kVocabSize;  // 25

inline constexpr std::array<std::string_view, kTextVocab> kWords = {
    "<pad>", "<bos>", "<eos>", "<empty>", "a",       "at",     "and",    "small",  "large",
    "red",   "green", "blue",  "yellow",  "magenta", "cyan",   "circle", "square", "triangle",
    "cross", "top",   "middle", "bottom", "left",    "center", "right"};

inline constexpr std::size_t kClauseTokens = 7;  // a SIZE COLOR SHAPE at ROW COL
inline constexpr std::size_t kMaxCaptionTokens = kMaxObjects * kClauseTokens + (kMaxObjects - 1);  // 23

}  // namespace itit
