#include "icrit/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "icrit/errors.hpp"

namespace icrit {

const char* task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::kCopy:
      return "copy";
    case TaskKind::kRecolor:
      return "recolor";
    case TaskKind::kErase:
      return "erase";
    case TaskKind::kMirror:
      return "mirror-region";
    case TaskKind::kMove:
      return "move-shape";
  }
  return "?";
}

TaskKind parse_task_kind(const std::string& name) {
  if (name == "copy") return TaskKind::kCopy;
  if (name == "recolor") return TaskKind::kRecolor;
  if (name == "erase") return TaskKind::kErase;
  if (name == "mirror-region" || name == "mirror") return TaskKind::kMirror;
  if (name == "move-shape" || name == "move") return TaskKind::kMove;
  throw ConfigError("unknown task kind '" + name + "'");
}

void ImageSpec::validate() const {
  if (height < 1 || width < 1 || channels < 1 || patch < 1) throw ConfigError("image spec: non-positive dimension");
  if (height % patch != 0 || width % patch != 0) {
    throw DimensionError("image " + std::to_string(height) + "x" + std::to_string(width) +
                         " not divisible by patch " + std::to_string(patch));
  }
  if (region_tokens < 1 || region_tokens > std::min(grid_h(), grid_w())) {
    throw ConfigError("image spec: region does not fit the token grid");
  }
}

const std::array<std::array<float, 3>, kPaletteSize>& palette() {
  static const std::array<std::array<float, 3>, kPaletteSize> colors{{
      {-0.8f, -0.8f, -0.8f},
      {0.9f, -0.7f, -0.7f},
      {-0.7f, 0.9f, -0.7f},
      {-0.7f, -0.7f, 0.9f},
      {0.9f, 0.9f, -0.7f},
      {0.9f, -0.7f, 0.9f},
      {-0.7f, 0.9f, 0.9f},
      {0.9f, 0.9f, 0.9f},
  }};
  return colors;
}

namespace {

struct PixelBox {
  int x0, y0, x1, y1;  // half-open
};

PixelBox region_box(const Instruction& ins, const ImageSpec& spec) {
  const int half = spec.region_tokens / 2;
  const int tx = ins.center_x - half, ty = ins.center_y - half;
  if (tx < 0 || ty < 0 || tx + spec.region_tokens > spec.grid_w() || ty + spec.region_tokens > spec.grid_h()) {
    throw DomainError("instruction region centred at (" + std::to_string(ins.center_x) + ", " +
                      std::to_string(ins.center_y) + ") leaves the token grid");
  }
  return {tx * spec.patch, ty * spec.patch, (tx + spec.region_tokens) * spec.patch,
          (ty + spec.region_tokens) * spec.patch};
}

float* pixel(Tensor<float>& img, const ImageSpec& spec, int x, int y) {
  return img.ptr() + (std::size_t(y) * std::size_t(spec.width) + std::size_t(x)) * std::size_t(spec.channels);
}
const float* pixel(const Tensor<float>& img, const ImageSpec& spec, int x, int y) {
  return img.ptr() + (std::size_t(y) * std::size_t(spec.width) + std::size_t(x)) * std::size_t(spec.channels);
}

void set_color(float* px, int color, int channels) {
  const auto& c = palette()[std::size_t(color)];
  for (int k = 0; k < channels; ++k) px[k] = c[std::size_t(k % 3)];
}

bool is_background(const float* px, int channels) {
  const auto& bg = palette()[0];
  for (int k = 0; k < channels; ++k)
    if (px[k] != bg[std::size_t(k % 3)]) return false;
  return true;
}

}  // namespace

std::vector<std::uint8_t> region_mask(const Instruction& ins, const ImageSpec& spec) {
  std::vector<std::uint8_t> mask(std::size_t(spec.tokens()), 0);
  if (ins.kind == TaskKind::kCopy) return mask;
  const PixelBox b = region_box(ins, spec);
  for (int ty = b.y0 / spec.patch; ty < b.y1 / spec.patch; ++ty)
    for (int tx = b.x0 / spec.patch; tx < b.x1 / spec.patch; ++tx) mask[std::size_t(ty * spec.grid_w() + tx)] = 1;
  return mask;
}

Tensor<float> apply_instruction(const Tensor<float>& source, const Instruction& ins, const ImageSpec& spec) {
  if (source.shape() != Shape{std::size_t(spec.height), std::size_t(spec.width), std::size_t(spec.channels)}) {
    throw DimensionError("apply_instruction: image shape " + shape_str(source.shape()));
  }
  if (ins.payload < 0 || ins.payload >= kPaletteSize) throw DomainError("instruction payload out of range");
  Tensor<float> out = source;
  if (ins.kind == TaskKind::kCopy) return out;
  const PixelBox b = region_box(ins, spec);
  const int c = spec.channels;
  switch (ins.kind) {
    case TaskKind::kRecolor:
      for (int y = b.y0; y < b.y1; ++y)
        for (int x = b.x0; x < b.x1; ++x)
          if (!is_background(pixel(source, spec, x, y), c)) set_color(pixel(out, spec, x, y), ins.payload, c);
      break;
    case TaskKind::kErase:
      for (int y = b.y0; y < b.y1; ++y)
        for (int x = b.x0; x < b.x1; ++x) set_color(pixel(out, spec, x, y), 0, c);
      break;
    case TaskKind::kMirror:
      for (int y = b.y0; y < b.y1; ++y)
        for (int x = b.x0; x < b.x1; ++x)
          std::copy_n(pixel(source, spec, b.x1 - 1 - (x - b.x0), y), c, pixel(out, spec, x, y));
      break;
    case TaskKind::kMove: {
      // Shift region content by one patch: 0 right, 1 left, 2 down, 3 up.
      const int dir = ins.payload % 4;
      const int dx = dir == 0 ? spec.patch : dir == 1 ? -spec.patch : 0;
      const int dy = dir == 2 ? spec.patch : dir == 3 ? -spec.patch : 0;
      for (int y = b.y0; y < b.y1; ++y)
        for (int x = b.x0; x < b.x1; ++x) {
          const int sx = x - dx, sy = y - dy;
          if (sx >= b.x0 && sx < b.x1 && sy >= b.y0 && sy < b.y1) {
            std::copy_n(pixel(source, spec, sx, sy), c, pixel(out, spec, x, y));
          } else {
            set_color(pixel(out, spec, x, y), 0, c);
          }
        }
      break;
    }
    case TaskKind::kCopy:
      break;
  }
  return out;
}

EditTask generate_task(Rng& rng, TaskKind kind, const ImageSpec& spec) {
  spec.validate();
  Tensor<float> img({std::size_t(spec.height), std::size_t(spec.width), std::size_t(spec.channels)});
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x) set_color(pixel(img, spec, x, y), 0, spec.channels);

  const int shapes = 1 + int(rng.below(3));
  int anchor_x = 0, anchor_y = 0, anchor_color = 1;
  for (int s = 0; s < shapes; ++s) {
    const int color = 1 + int(rng.below(kPaletteSize - 1));
    const int size = 3 + int(rng.below(4));
    const int x0 = int(rng.below(std::uint64_t(spec.width - size + 1)));
    const int y0 = int(rng.below(std::uint64_t(spec.height - size + 1)));
    const bool circle = rng.below(2) == 1;
    const double cx = x0 + (size - 1) / 2.0, cy = y0 + (size - 1) / 2.0, r = size / 2.0;
    for (int y = y0; y < y0 + size; ++y)
      for (int x = x0; x < x0 + size; ++x) {
        if (circle && (x - cx) * (x - cx) + (y - cy) * (y - cy) > r * r) continue;
        set_color(pixel(img, spec, x, y), color, spec.channels);
      }
    if (s == 0) {
      anchor_x = int(cx);
      anchor_y = int(cy);
      anchor_color = color;
    }
  }

  Instruction ins;
  ins.kind = kind;
  if (kind != TaskKind::kCopy) {
    const int half = spec.region_tokens / 2;
    auto place = [&](int px, int grid) {
      const int jitter = int(rng.below(3)) - 1;
      return std::clamp(px / spec.patch + jitter, half, grid - spec.region_tokens + half);
    };
    ins.center_x = place(anchor_x, spec.grid_w());
    ins.center_y = place(anchor_y, spec.grid_h());
    if (kind == TaskKind::kRecolor) {
      ins.payload = 1 + int(rng.below(kPaletteSize - 2));
      if (ins.payload >= anchor_color) ++ins.payload;
    } else if (kind == TaskKind::kMove) {
      ins.payload = int(rng.below(4));
    }
  }
  EditTask task;
  task.target = apply_instruction(img, ins, spec);
  task.source = std::move(img);
  task.instruction = ins;
  task.mask = region_mask(ins, spec);
  return task;
}

KindMix default_mix() { return {0.2, 0.2, 0.2, 0.2, 0.2}; }

void validate_mix(const KindMix& mix) {
  double total = 0;
  for (double p : mix) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw ConfigError("kind mix entries must be finite and non-negative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("kind mix sums to " + std::to_string(total) + ", not 1");
}

KindMix parse_mix(const std::string& text) {
  KindMix mix{};
  std::stringstream ss(text);
  std::string item;
  std::vector<std::string> items;
  while (std::getline(ss, item, ',')) items.push_back(item);
  auto number = [](const std::string& s) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw ConfigError("bad number '" + s + "' in kind mix");
      return v;
    } catch (const std::logic_error&) {
      throw ConfigError("bad number '" + s + "' in kind mix");
    }
  };
  const bool named = !items.empty() && items[0].find('=') != std::string::npos;
  if (named) {
    for (const auto& it : items) {
      const auto eq = it.find('=');
      if (eq == std::string::npos) throw ConfigError("kind mix entry '" + it + "' lacks '='");
      mix[std::size_t(parse_task_kind(it.substr(0, eq)))] = number(it.substr(eq + 1));
    }
  } else {
    if (items.size() != std::size_t(kTaskKinds)) throw ConfigError("kind mix needs 5 entries");
    for (std::size_t i = 0; i < items.size(); ++i) mix[i] = number(items[i]);
  }
  validate_mix(mix);
  return mix;
}

std::vector<EditTask> make_dataset(std::uint64_t seed, std::size_t size, const KindMix& mix, const ImageSpec& spec) {
  validate_mix(mix);
  spec.validate();
  std::vector<EditTask> out;
  out.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    Rng rng = Rng(seed).fork(i);
    const double u = rng.uniform();
    double acc = 0;
    int kind = kTaskKinds - 1;
    for (int k = 0; k < kTaskKinds; ++k) {
      acc += mix[std::size_t(k)];
      if (u < acc) {
        kind = k;
        break;
      }
    }
    while (mix[std::size_t(kind)] == 0.0 && kind > 0) --kind;
    out.push_back(generate_task(rng, TaskKind(kind), spec));
  }
  return out;
}

Tensor<float> tokenize(const Tensor<float>& image, int patch) {
  if (image.rank() != 3 || patch < 1) throw DimensionError("tokenize: expected H x W x C image");
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2), p = std::size_t(patch);
  if (h % p != 0 || w % p != 0) {
    throw DimensionError("tokenize: " + shape_str(image.shape()) + " not divisible by patch " + std::to_string(patch));
  }
  const std::size_t gw = w / p, dim = p * p * c;
  Tensor<float> out({(h / p) * gw, dim});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t tok = (y / p) * gw + x / p;
      const std::size_t off = ((y % p) * p + x % p) * c;
      std::copy_n(image.ptr() + (y * w + x) * c, c, out.ptr() + tok * dim + off);
    }
  return out;
}

Tensor<float> detokenize(const Tensor<float>& tokens, int height, int width, int channels, int patch) {
  if (patch < 1 || height % patch != 0 || width % patch != 0) {
    throw DimensionError("detokenize: image not divisible by patch " + std::to_string(patch));
  }
  const std::size_t h = std::size_t(height), w = std::size_t(width), c = std::size_t(channels), p = std::size_t(patch);
  const std::size_t gw = w / p, dim = p * p * c;
  if (tokens.shape() != Shape{(h / p) * gw, dim}) {
    throw DimensionError("detokenize: tokens " + shape_str(tokens.shape()) + " do not match image");
  }
  Tensor<float> out({h, w, c});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t tok = (y / p) * gw + x / p;
      const std::size_t off = ((y % p) * p + x % p) * c;
      std::copy_n(tokens.ptr() + tok * dim + off, c, out.ptr() + (y * w + x) * c);
    }
  return out;
}

}  // namespace icrit
