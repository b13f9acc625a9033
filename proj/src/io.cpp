#include "icrit/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "json.hpp"

namespace icrit {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

using json = nlohmann::json;
using Reason = IntegrityError::Reason;

namespace {

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}

  template <class U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out_.insert(out_.end(), p, p + sizeof(U));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  void magic(const char (&m)[5]) { bytes(m, 4); }
  /// FNV-1a of bytes [from, end).
  void checksum_from(std::size_t from) {
    put<std::uint64_t>(fnv1a(std::as_bytes(std::span(out_.data() + from, out_.size() - from))));
  }
  std::size_t size() const { return out_.size(); }

 private:
  std::vector<std::uint8_t>& out_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& in, const char* what) : in_(in), what_(what) {}

  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) {
      throw IntegrityError(Reason::kTruncated, std::string(what_) + ": truncated at byte " + std::to_string(pos_));
    }
  }
  template <class U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, in_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  void bytes(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, in_.data() + pos_, n);
    pos_ += n;
  }
  void magic(const char (&m)[5]) {
    if (in_.size() < 4 || std::memcmp(in_.data(), m, 4) != 0) {
      throw IntegrityError(Reason::kBadMagic, std::string(what_) + ": bad magic, expected '" + m + "'");
    }
    pos_ = 4;
  }
  void version(std::uint32_t expected) {
    const auto v = get<std::uint32_t>();
    if (v != expected) {
      throw IntegrityError(Reason::kVersion, std::string(what_) + ": unsupported format version " + std::to_string(v) +
                                                 " (this build reads version " + std::to_string(expected) + ")");
    }
  }
  /// Reads a stored checksum and compares it with bytes [from, current).
  void verify_from(std::size_t from, const std::string& label) {
    const std::uint64_t actual = fnv1a(std::as_bytes(std::span(in_.data() + from, pos_ - from)));
    const auto stored = get<std::uint64_t>();
    if (stored != actual) throw IntegrityError(Reason::kChecksum, std::string(what_) + ": checksum mismatch in " + label);
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& in_;
  const char* what_;
  std::size_t pos_ = 0;
};

std::size_t record_bytes(const ImageSpec& spec) {
  const std::size_t raw = 8 + 2 * spec.pixels() * sizeof(float) + std::size_t(spec.tokens());
  return (raw + 7) / 8 * 8 + 8;
}

}  // namespace

// ---------------------------------------------------------------------------
// Dataset: "ICDS" | u32 version | u64 count | u32 h, w, c, patch, region | u32 0 | u64 header checksum
//          then `count` records: u8 kind, cx, cy, payload | u32 0 | f32 source[] | f32 target[] |
//          u8 mask[tokens] | zero pad to 8 | u64 record checksum

std::vector<std::uint8_t> encode_dataset(const Dataset& data) {
  data.spec.validate();
  std::vector<std::uint8_t> out;
  out.reserve(48 + data.tasks.size() * record_bytes(data.spec));
  Writer w(out);
  w.magic("ICDS");
  w.put<std::uint32_t>(kDatasetVersion);
  w.put<std::uint64_t>(data.tasks.size());
  for (int v : {data.spec.height, data.spec.width, data.spec.channels, data.spec.patch, data.spec.region_tokens})
    w.put<std::uint32_t>(std::uint32_t(v));
  w.put<std::uint32_t>(0);
  w.checksum_from(0);
  const Shape img{std::size_t(data.spec.height), std::size_t(data.spec.width), std::size_t(data.spec.channels)};
  for (const EditTask& t : data.tasks) {
    if (t.source.shape() != img || t.target.shape() != img || t.mask.size() != std::size_t(data.spec.tokens())) {
      throw DimensionError("encode_dataset: task does not match the dataset image spec");
    }
    const std::size_t start = w.size();
    const Instruction& ins = t.instruction;
    for (int v : {int(ins.kind), ins.center_x, ins.center_y, ins.payload}) w.put<std::uint8_t>(std::uint8_t(v));
    w.put<std::uint32_t>(0);
    w.bytes(t.source.ptr(), t.source.size() * sizeof(float));
    w.bytes(t.target.ptr(), t.target.size() * sizeof(float));
    w.bytes(t.mask.data(), t.mask.size());
    while ((w.size() - start) % 8 != 0) w.put<std::uint8_t>(0);
    w.checksum_from(start);
  }
  return out;
}

Dataset decode_dataset(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes, "dataset");
  r.magic("ICDS");
  r.version(kDatasetVersion);
  const auto count = r.get<std::uint64_t>();
  Dataset data;
  int* dims[] = {&data.spec.height, &data.spec.width, &data.spec.channels, &data.spec.patch, &data.spec.region_tokens};
  for (int* d : dims) *d = int(r.get<std::uint32_t>());
  r.get<std::uint32_t>();
  r.verify_from(0, "header");
  try {
    data.spec.validate();
  } catch (const Error& e) {
    throw IntegrityError(Reason::kMalformed, std::string("dataset: invalid image spec: ") + e.what());
  }
  const std::size_t rec = record_bytes(data.spec);
  if (r.remaining() != count * rec) {
    throw IntegrityError(r.remaining() < count * rec ? Reason::kTruncated : Reason::kMalformed,
                         "dataset: payload is " + std::to_string(r.remaining()) + " bytes, expected " +
                             std::to_string(count * rec));
  }
  const Shape img{std::size_t(data.spec.height), std::size_t(data.spec.width), std::size_t(data.spec.channels)};
  data.tasks.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t start = r.pos();
    EditTask t;
    const int kind = r.get<std::uint8_t>();
    t.instruction.center_x = r.get<std::uint8_t>();
    t.instruction.center_y = r.get<std::uint8_t>();
    t.instruction.payload = r.get<std::uint8_t>();
    r.get<std::uint32_t>();
    t.source = Tensor<float>(img);
    t.target = Tensor<float>(img);
    r.bytes(t.source.ptr(), t.source.size() * sizeof(float));
    r.bytes(t.target.ptr(), t.target.size() * sizeof(float));
    t.mask.resize(std::size_t(data.spec.tokens()));
    r.bytes(t.mask.data(), t.mask.size());
    while ((r.pos() - start) % 8 != 0) r.get<std::uint8_t>();
    r.verify_from(start, "record " + std::to_string(i));
    if (kind >= kTaskKinds) throw IntegrityError(Reason::kMalformed, "dataset: record " + std::to_string(i) + " has kind " + std::to_string(kind));
    t.instruction.kind = TaskKind(kind);
    data.tasks.push_back(std::move(t));
  }
  return data;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) { write_file(path, encode_dataset(data)); }
Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

// ---------------------------------------------------------------------------

namespace {

json config_to_json(const ModelConfig& c) {
  return json{{"num_blocks", c.num_blocks},   {"hidden_dim", c.hidden_dim},   {"num_heads", c.num_heads},
              {"mlp_ratio", c.mlp_ratio},     {"grid_h", c.grid_h},           {"grid_w", c.grid_w},
              {"latent_dim", c.latent_dim},   {"cond_tokens", c.cond_tokens}, {"cond_vocab", c.cond_vocab},
              {"time_freqs", c.time_freqs},   {"probe_layers", c.probe_layers},
              {"critic_enabled", c.critic_enabled}, {"projection_dim", c.projection_dim}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  auto take = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  take("num_blocks", c.num_blocks);
  take("hidden_dim", c.hidden_dim);
  take("num_heads", c.num_heads);
  take("mlp_ratio", c.mlp_ratio);
  take("grid_h", c.grid_h);
  take("grid_w", c.grid_w);
  take("latent_dim", c.latent_dim);
  take("cond_tokens", c.cond_tokens);
  take("cond_vocab", c.cond_vocab);
  take("time_freqs", c.time_freqs);
  take("probe_layers", c.probe_layers);
  take("critic_enabled", c.critic_enabled);
  take("projection_dim", c.projection_dim);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!config_to_json(c).contains(it.key())) throw ConfigError("model config: unknown key '" + it.key() + "'");
  }
  c.validate();
  return c;
}

}  // namespace

std::string model_config_json(const ModelConfig& config) { return config_to_json(config).dump(2); }

ModelConfig model_config_from_json(const std::string& text) {
  try {
    return config_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

// Checkpoint: "ICKP" | u32 version | u64 n | JSON metadata[n] | u64 metadata checksum |
//             u64 m | f32 payload[m / 4] | u64 payload checksum

template <class T>
std::vector<std::uint8_t> encode_checkpoint(Model<T>& model) {
  std::vector<float> payload;
  json tensors = json::array();
  for (Parameter<T>* p : model.parameters()) {
    const std::size_t offset = payload.size();
    for (T v : p->value.data()) payload.push_back(float(v));
    tensors.push_back({{"name", p->name},
                       {"group", group_name(p->group)},
                       {"shape", p->value.shape()},
                       {"offset", offset},
                       {"size", p->value.size()},
                       {"checksum", checksum<float>(std::span<const float>(payload.data() + offset, p->value.size()))}});
  }
  json meta{{"stage", model.stage},
            {"critic_index", model.config().critic_index()},
            {"dtype", "float32"},
            {"model", config_to_json(model.config())},
            {"tensors", tensors}};
  const std::string text = meta.dump();

  std::vector<std::uint8_t> out;
  Writer w(out);
  w.magic("ICKP");
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(text.size());
  const std::size_t meta_start = w.size();
  w.bytes(text.data(), text.size());
  w.checksum_from(meta_start);
  w.put<std::uint64_t>(payload.size() * sizeof(float));
  const std::size_t payload_start = w.size();
  w.bytes(payload.data(), payload.size() * sizeof(float));
  w.checksum_from(payload_start);
  return out;
}

template <class T>
Model<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes, "checkpoint");
  r.magic("ICKP");
  r.version(kCheckpointVersion);
  const auto meta_len = r.get<std::uint64_t>();
  r.need(meta_len);
  const std::size_t meta_start = r.pos();
  std::string text(meta_len, '\0');
  r.bytes(text.data(), meta_len);
  r.verify_from(meta_start, "metadata");
  const auto payload_len = r.get<std::uint64_t>();
  if (payload_len % sizeof(float) != 0) throw IntegrityError(Reason::kMalformed, "checkpoint: ragged payload");
  r.need(payload_len);
  const std::size_t payload_start = r.pos();
  std::vector<float> payload(payload_len / sizeof(float));
  r.bytes(payload.data(), payload_len);
  r.verify_from(payload_start, "payload");
  if (r.remaining() != 0) throw IntegrityError(Reason::kMalformed, "checkpoint: trailing bytes");

  json meta;
  ModelConfig config;
  try {
    meta = json::parse(text);
    config = config_from_json(meta.at("model"));
  } catch (const json::exception& e) {
    throw IntegrityError(Reason::kMalformed, std::string("checkpoint: bad metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw IntegrityError(Reason::kMalformed, std::string("checkpoint: ") + e.what());
  }
  Model<T> model(config);
  try {
    model.stage = meta.at("stage").get<int>();
    if (meta.at("critic_index").get<int>() != config.critic_index()) {
      throw IntegrityError(Reason::kMalformed, "checkpoint: critic index disagrees with the model config");
    }
    std::map<std::string, Parameter<T>*> by_name;
    for (auto* p : model.parameters()) by_name[p->name] = p;
    std::size_t covered = 0;
    for (const auto& t : meta.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      auto it = by_name.find(name);
      if (it == by_name.end()) throw IntegrityError(Reason::kMalformed, "checkpoint: unknown tensor " + name);
      Parameter<T>& p = *it->second;
      const auto shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto size = t.at("size").get<std::size_t>();
      if (shape != p.value.shape() || size != p.value.size() || offset != covered || offset + size > payload.size()) {
        throw IntegrityError(Reason::kMalformed, "checkpoint: manifest entry for " + name + " does not fit");
      }
      std::span<const float> blob(payload.data() + offset, size);
      if (checksum<float>(blob) != t.at("checksum").get<std::uint64_t>()) {
        throw IntegrityError(Reason::kChecksum, "checkpoint: checksum mismatch in tensor " + name);
      }
      for (std::size_t i = 0; i < size; ++i) p.value[i] = T(blob[i]);
      covered += size;
      by_name.erase(it);
    }
    if (!by_name.empty()) throw IntegrityError(Reason::kMalformed, "checkpoint: missing tensor " + by_name.begin()->first);
    if (covered != payload.size()) throw IntegrityError(Reason::kMalformed, "checkpoint: manifest does not tile the payload");
  } catch (const json::exception& e) {
    throw IntegrityError(Reason::kMalformed, std::string("checkpoint: bad manifest: ") + e.what());
  }
  return model;
}

template <class T>
void save_checkpoint(Model<T>& model, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(model));
}

template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(read_file(path));
}

template std::vector<std::uint8_t> encode_checkpoint<float>(Model<float>&);
template std::vector<std::uint8_t> encode_checkpoint<double>(Model<double>&);
template Model<float> decode_checkpoint<float>(const std::vector<std::uint8_t>&);
template Model<double> decode_checkpoint<double>(const std::vector<std::uint8_t>&);
template void save_checkpoint<float>(Model<float>&, const std::filesystem::path&);
template void save_checkpoint<double>(Model<double>&, const std::filesystem::path&);
template Model<float> load_checkpoint<float>(const std::filesystem::path&);
template Model<double> load_checkpoint<double>(const std::filesystem::path&);

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_map(const SpatialMap& map) {
  std::vector<std::uint8_t> out;
  Writer w(out);
  w.magic("ICMP");
  w.put<std::uint32_t>(kMapVersion);
  w.put<std::uint32_t>(std::uint32_t(map.height));
  w.put<std::uint32_t>(std::uint32_t(map.width));
  for (double v : map.values) w.put<float>(float(v));
  return out;
}

SpatialMap decode_map(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes, "map");
  r.magic("ICMP");
  r.version(kMapVersion);
  const auto h = r.get<std::uint32_t>(), w = r.get<std::uint32_t>();
  if (r.remaining() != std::size_t(h) * w * sizeof(float)) {
    throw IntegrityError(Reason::kTruncated, "map: payload does not match " + std::to_string(h) + "x" + std::to_string(w));
  }
  SpatialMap map(h, w);
  for (auto& v : map.values) v = r.get<float>();
  return map;
}

void save_map(const SpatialMap& map, const std::filesystem::path& path) { write_file(path, encode_map(map)); }

std::vector<std::uint8_t> map_ppm(const SpatialMap& map) {
  const std::string header = "P6\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  double lo = 0, hi = 0;
  if (!map.values.empty()) {
    auto [a, b] = std::minmax_element(map.values.begin(), map.values.end());
    lo = *a;
    hi = *b;
  }
  for (double v : map.values) {
    const double u = hi > lo ? (v - lo) / (hi - lo) : 0.0;
    const auto g = std::uint8_t(std::lround(std::clamp(u, 0.0, 1.0) * 255.0));
    out.insert(out.end(), {g, g, g});
  }
  return out;
}

std::vector<std::uint8_t> image_ppm(const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("image_ppm: expected H x W x 3");
  const std::string header = "P6\n" + std::to_string(image.dim(1)) + " " + std::to_string(image.dim(0)) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (float v : image.data()) {
    const double u = std::clamp((double(v) + 1.0) / 2.0, 0.0, 1.0);
    out.push_back(std::uint8_t(std::lround(u * 255.0)));
  }
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw UsageError("short write to " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace icrit
