#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "icrit/tensor.hpp"

namespace icrit {

enum class TaskKind : std::uint8_t { kCopy = 0, kRecolor = 1, kErase = 2, kMirror = 3, kMove = 4 };

inline constexpr int kTaskKinds = 5;

const char* task_kind_name(TaskKind kind);
/// Parses "copy", "recolor", "erase", "mirror-region" / "mirror", "move-shape" / "move".
TaskKind parse_task_kind(const std::string& name);

struct ImageSpec {
  int height = 16;
  int width = 16;
  int channels = 3;
  int patch = 2;
  /// Side of the square edit region, in tokens.
  int region_tokens = 3;

  int grid_h() const { return height / patch; }
  int grid_w() const { return width / patch; }
  int tokens() const { return grid_h() * grid_w(); }
  int token_dim() const { return patch * patch * channels; }
  std::size_t pixels() const { return std::size_t(height) * std::size_t(width) * std::size_t(channels); }
  void validate() const;
  bool operator==(const ImageSpec&) const = default;
};

/// Instruction as four discrete slots: kind, region centre x, region centre y, payload.
struct Instruction {
  TaskKind kind = TaskKind::kCopy;
  int center_x = 0;  // token column of the region centre
  int center_y = 0;  // token row of the region centre
  int payload = 0;   // palette index (recolor) or direction (move)

  std::vector<int> codes() const { return {int(kind), center_x, center_y, payload}; }
  bool operator==(const Instruction&) const = default;
};

/// Images are row-major [height x width x channels] with values in [-1, 1].
struct EditTask {
  Tensor<float> source;
  Tensor<float> target;
  Instruction instruction;
  /// Token-grid mask of the edit region (grid_h x grid_w, 0/1). Empty region for copy.
  std::vector<std::uint8_t> mask;

  bool operator==(const EditTask&) const = default;
};

inline constexpr int kPaletteSize = 8;
/// Background is always palette entry 0.
const std::array<std::array<float, 3>, kPaletteSize>& palette();

/// Applies `instruction` to `source`; pure and deterministic.
Tensor<float> apply_instruction(const Tensor<float>& source, const Instruction& instruction, const ImageSpec& spec);

/// Token mask of the region addressed by `instruction` (all zero for copy).
std::vector<std::uint8_t> region_mask(const Instruction& instruction, const ImageSpec& spec);

EditTask generate_task(Rng& rng, TaskKind kind, const ImageSpec& spec = {});

using KindMix = std::array<double, kTaskKinds>;

/// 20% copy, the rest split evenly over the four region edits.
KindMix default_mix();
/// Throws ConfigError unless entries are non-negative and sum to 1 (within 1e-9).
void validate_mix(const KindMix& mix);
/// Parses "copy=0.2,recolor=0.2,..." or five comma-separated numbers.
KindMix parse_mix(const std::string& text);

/// Task i is drawn from Rng(seed).fork(i), so datasets are prefix-stable in size.
std::vector<EditTask> make_dataset(std::uint64_t seed, std::size_t size, const KindMix& mix,
                                   const ImageSpec& spec = {});

/// Non-overlapping patch flatten: [H x W x C] -> [(H/p)(W/p) x p*p*C].
Tensor<float> tokenize(const Tensor<float>& image, int patch);
Tensor<float> detokenize(const Tensor<float>& tokens, int height, int width, int channels, int patch);

}  // namespace icrit
