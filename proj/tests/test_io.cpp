#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "icrit/io.hpp"
#include "icrit/run_config.hpp"
#include "test_util.hpp"

using namespace icrit;

namespace {

IntegrityError::Reason reason_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const IntegrityError& e) {
    return e.reason();
  }
  ADD_FAILURE() << "no integrity error";
  return IntegrityError::Reason::kMalformed;
}

template <class T>
void expect_same_params(Model<T>& a, Model<T>& b) {
  auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->name, pb[i]->name);
    EXPECT_EQ(pa[i]->group, pb[i]->group);
    ASSERT_EQ(pa[i]->value.shape(), pb[i]->value.shape());
    EXPECT_EQ(std::memcmp(pa[i]->value.data().data(), pb[i]->value.data().data(), pa[i]->value.size() * sizeof(T)), 0)
        << pa[i]->name;
  }
}

std::filesystem::path temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / ("icrit_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()));
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(DatasetIO, RoundTripBitExact) {
  Dataset d{ImageSpec{}, make_dataset(4, 30, default_mix())};
  auto bytes = encode_dataset(d);
  Dataset back = decode_dataset(bytes);
  EXPECT_EQ(back.spec, d.spec);
  EXPECT_EQ(back.tasks, d.tasks);
  EXPECT_EQ(encode_dataset(back), bytes);
}

TEST(DatasetIO, EmptyDataset) {
  Dataset d{ImageSpec{}, {}};
  Dataset back = decode_dataset(encode_dataset(d));
  EXPECT_TRUE(back.tasks.empty());
}

TEST(DatasetIO, FileRoundTrip) {
  auto path = temp_dir() / "d.icds";
  Dataset d{ImageSpec{}, make_dataset(5, 8, default_mix())};
  save_dataset(d, path);
  EXPECT_EQ(load_dataset(path).tasks, d.tasks);
  std::filesystem::remove(path);
}

TEST(DatasetIO, CorruptionIsDetected) {
  Dataset d{ImageSpec{}, make_dataset(6, 5, default_mix())};
  const auto good = encode_dataset(d);
  auto bad = good;
  bad[0] = 'X';
  EXPECT_EQ(reason_of([&] { decode_dataset(bad); }), IntegrityError::Reason::kBadMagic);
  bad = good;
  bad[4] += 1;
  EXPECT_EQ(reason_of([&] { decode_dataset(bad); }), IntegrityError::Reason::kVersion);
  bad = good;
  bad[bad.size() / 2] ^= 0x40;
  EXPECT_EQ(reason_of([&] { decode_dataset(bad); }), IntegrityError::Reason::kChecksum);
  bad = good;
  bad.resize(bad.size() - 3);
  EXPECT_EQ(reason_of([&] { decode_dataset(bad); }), IntegrityError::Reason::kTruncated);
}

TEST(DatasetIO, EveryByteIsCovered) {
  Dataset d{ImageSpec{}, make_dataset(7, 2, default_mix())};
  const auto good = encode_dataset(d);
  for (std::size_t i = 0; i < good.size(); i += 37) {
    auto bad = good;
    bad[i] ^= 0x01;
    EXPECT_THROW(decode_dataset(bad), IntegrityError) << "byte " << i;
  }
}

TEST(ConfigJson, RoundTripAndUnknownKey) {
  ModelConfig c = ModelConfig::toy();
  EXPECT_EQ(model_config_from_json(model_config_json(c)), c);
  EXPECT_THROW(model_config_from_json(R"({"bogus": 1})"), ConfigError);
}

TEST(CheckpointIO, RoundTripBitExact) {
  Model<float> m(ModelConfig::toy(), 3);
  icrit::testing::randomize(m, 5);
  m.stage = 2;
  auto bytes = encode_checkpoint(m);
  Model<float> back = decode_checkpoint<float>(bytes);
  EXPECT_EQ(back.stage, 2);
  EXPECT_EQ(back.config(), m.config());
  expect_same_params(m, back);
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(CheckpointIO, FileRoundTrip) {
  auto path = temp_dir() / "m.ickp";
  Model<float> m(ModelConfig::micro(), 4);
  m.stage = 1;
  save_checkpoint(m, path);
  Model<float> back = load_checkpoint<float>(path);
  expect_same_params(m, back);
  std::filesystem::remove(path);
}

TEST(CheckpointIO, CorruptionIsDetected) {
  Model<float> m(ModelConfig::micro(), 4);
  const auto good = encode_checkpoint(m);
  auto bad = good;
  bad[1] = 'Z';
  EXPECT_EQ(reason_of([&] { decode_checkpoint<float>(bad); }), IntegrityError::Reason::kBadMagic);
  bad = good;
  bad.back() ^= 0x10;
  EXPECT_EQ(reason_of([&] { decode_checkpoint<float>(bad); }), IntegrityError::Reason::kChecksum);
  bad = good;
  bad[bad.size() - 20] ^= 0x10;  // payload byte
  EXPECT_EQ(reason_of([&] { decode_checkpoint<float>(bad); }), IntegrityError::Reason::kChecksum);
  bad = good;
  bad.resize(good.size() / 2);
  EXPECT_THROW(decode_checkpoint<float>(bad), IntegrityError);
}

TEST(CheckpointIO, VersionErrorNamesBothVersions) {
  Model<float> m(ModelConfig::micro(), 4);
  auto bad = encode_checkpoint(m);
  bad[4] += 1;
  try {
    decode_checkpoint<float>(bad);
    FAIL();
  } catch (const IntegrityError& e) {
    EXPECT_EQ(e.reason(), IntegrityError::Reason::kVersion);
    const std::string what = e.what();
    EXPECT_NE(what.find(std::to_string(kCheckpointVersion)), std::string::npos);
    EXPECT_NE(what.find(std::to_string(kCheckpointVersion + 1)), std::string::npos);
  }
}

TEST(MapIO, RoundTripAndPpm) {
  SpatialMap map(3, 4, MapTag::kDerived);
  for (std::size_t i = 0; i < map.size(); ++i) map.values[i] = double(i) * 0.5f;
  SpatialMap back = decode_map(encode_map(map));
  EXPECT_EQ(back.height, 3u);
  EXPECT_EQ(back.width, 4u);
  EXPECT_EQ(back.values, map.values);
  auto ppm = map_ppm(map);
  const std::string head = "P6\n4 3\n255\n";
  ASSERT_GE(ppm.size(), head.size());
  EXPECT_EQ(std::string(ppm.begin(), ppm.begin() + long(head.size())), head);
  EXPECT_EQ(ppm.size(), head.size() + 3 * 4 * 3);
  auto bad = encode_map(map);
  bad[0] = 'Q';
  EXPECT_THROW(decode_map(bad), IntegrityError);
}

TEST(RunConfigJson, RoundTripAndOverlay) {
  RunConfig c = run_config_from_json(R"({"seed": 4, "stages": {"2": {"peak_lr": 0.005}}, "analysis": {"steps": 8}})");
  EXPECT_EQ(c.seed, 4u);
  EXPECT_DOUBLE_EQ(c.stage(2).peak_lr, 0.005);
  EXPECT_DOUBLE_EQ(c.stage(1).peak_lr, StageConfig::toy(1).peak_lr);
  EXPECT_EQ(c.analysis.steps, 8);
  RunConfig back = run_config_from_json(run_config_json(c));
  EXPECT_EQ(run_config_json(back), run_config_json(c));
  for (int s = 0; s < 4; ++s) EXPECT_EQ(back.stage(s).seed, c.stage(s).seed);
}

TEST(RunConfigJson, Errors) {
  EXPECT_THROW(run_config_from_json(R"({"sed": 4})"), ConfigError);
  EXPECT_THROW(run_config_from_json(R"({"stages": {"1": {"lr": 1}}})"), ConfigError);
  EXPECT_THROW(run_config_from_json(R"({"precision": "float16"})"), ConfigError);
  EXPECT_THROW(run_config_from_json(R"({"make_data": {"mix": [0.5, 0.5, 0.5, 0, 0]}})"), ConfigError);
  EXPECT_THROW(run_config_from_json("{"), ConfigError);
}
