#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "icrit/critic.hpp"
#include "icrit/spatial_map.hpp"
#include "icrit/taskgen.hpp"

namespace icrit {

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kMapVersion = 1;

struct Dataset {
  ImageSpec spec;
  std::vector<EditTask> tasks;
};

std::vector<std::uint8_t> encode_dataset(const Dataset& data);
Dataset decode_dataset(const std::vector<std::uint8_t>& bytes);
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

std::string model_config_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

/// Parameters are stored as little-endian float32 regardless of T.
template <class T>
std::vector<std::uint8_t> encode_checkpoint(Model<T>& model);
template <class T>
Model<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes);
template <class T>
void save_checkpoint(Model<T>& model, const std::filesystem::path& path);
template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path);

/// Raw map grid: "ICMP", version, height, width (u32 each), then float32 values.
std::vector<std::uint8_t> encode_map(const SpatialMap& map);
SpatialMap decode_map(const std::vector<std::uint8_t>& bytes);
void save_map(const SpatialMap& map, const std::filesystem::path& path);

/// Binary PPM (P6). Maps are min-max normalized per map and written as gray.
std::vector<std::uint8_t> map_ppm(const SpatialMap& map);
/// RGB image in [-1, 1], H x W x 3.
std::vector<std::uint8_t> image_ppm(const Tensor<float>& image);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace icrit
