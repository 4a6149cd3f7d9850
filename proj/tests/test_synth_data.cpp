#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "idol/dataset.hpp"
#include "idol/diagnostics.hpp"

namespace fs = std::filesystem;
using namespace idol;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("idol_synth_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

bool same_stored_fields(const synth::TCSample& a, const synth::TCSample& b) {
  return a.ir == b.ir && a.dev == b.dev && a.cor == b.cor && a.labels == b.labels && a.storm_id == b.storm_id &&
         a.timestamp == b.timestamp;
}

data::DatasetConfig small_config(std::size_t train, std::size_t valid, std::size_t test) {
  data::DatasetConfig c;
  c.generator.grid = 16;
  c.counts = {{"train", train}, {"valid", valid}, {"test", test}};
  return c;
}

}  // namespace

TEST(SynthData, SampleIsDeterministic) {
  synth::GeneratorConfig cfg;
  cfg.seed = 7;
  const auto a = synth::generate_sample(cfg, {}, 3, 2);
  const auto b = synth::generate_sample(cfg, {}, 3, 2);
  ASSERT_EQ(a.ir.size(), b.ir.size());
  EXPECT_EQ(std::memcmp(a.ir.data(), b.ir.data(), a.ir.size() * sizeof(float)), 0);
  EXPECT_TRUE(same_stored_fields(a, b));
  const auto c = synth::generate_sample(cfg, {}, 4, 2);
  EXPECT_NE(a.ir, c.ir);
}

TEST(SynthData, FullnessFromRadii) {
  synth::GeneratorConfig cfg;
  const holland::HollandParams p{std::pow(120.0, 1.5) * -std::log1p(-0.1), 1.5, 1010.0, 950.0};
  const auto field = synth::render_field(p, cfg, {});
  synth::Labels l{30.0, 950.0, 30.0, 120.0};
  EXPECT_DOUBLE_EQ(synth::correlation_factors(field, l, cfg.pixel_km())[0], 0.75);
}

TEST(SynthData, SampleInvariantsAndOuterRadiusInversion) {
  synth::GeneratorConfig cfg;
  cfg.grid = 16;
  double worst = 0;
  for (std::int64_t storm = 0; storm < 125; ++storm)
    for (std::int64_t t = 0; t < 8; ++t) {
      const auto s = synth::generate_sample(cfg, {}, storm, t);
      const auto& p = s.params;
      const double reference = p.ambient_hpa - synth::kOuterDeficitFraction * p.deficit();
      const double r = holland::radius_from_pressure(p, reference);
      worst = std::max(worst, std::abs(r - s.labels[synth::kRo]) / r);
      EXPECT_LT(s.labels[synth::kRi], s.labels[synth::kRo]);
      EXPECT_GT(s.labels[synth::kP], 880.0f);
      EXPECT_LT(s.labels[synth::kP], 1015.0f);
      EXPECT_GT(s.labels[synth::kV], 0.0f);
      EXPECT_NEAR(s.labels[synth::kV], 3.92 * std::sqrt(p.deficit()), 1e-4);
      EXPECT_GE(s.dev[0], 0.0f);
      EXPECT_LE(s.dev[0], 5.0f);
      EXPECT_GE(s.dev[1], 0.0f);
      for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_GT(s.cor[k], 0.0f);
        EXPECT_LE(s.cor[k], 1.0f);
      }
      EXPECT_GT(s.cor[3], 0.0f);
      for (float v : s.ir) {
        ASSERT_GE(v, 0.0f);
        ASSERT_LE(v, 1.0f);
      }
    }
  EXPECT_LT(worst, 1e-6);
}

TEST(SynthData, ConceptShiftChangesOnlyWindConstant) {
  synth::GeneratorConfig cfg;
  cfg.grid = 16;
  const auto base = synth::generate_sample(cfg, {}, 1, 3);
  const auto shifted = synth::generate_sample(cfg, {synth::ShiftKind::kConcept, 1.0, 0}, 1, 3);
  EXPECT_NEAR(shifted.labels[synth::kV] / base.labels[synth::kV], 1.3, 1e-5);
  EXPECT_EQ(base.labels[synth::kP], shifted.labels[synth::kP]);
  EXPECT_EQ(base.ir, shifted.ir);
}

TEST(SynthData, DatasetSplitsAreDisjointAndLoadRoundTrips) {
  auto cfg = small_config(48, 16, 16);
  const auto dir = scratch("roundtrip");
  const auto manifest = data::generate_dataset(cfg, dir);
  EXPECT_EQ(manifest.splits.size(), 3u);
  const auto ds = data::load_dataset(dir);
  std::set<std::int64_t> train_ids, test_ids;
  for (std::size_t i = 0; i < ds.split("train").count; ++i) train_ids.insert(ds.split("train").storm_id(i));
  for (std::size_t i = 0; i < ds.split("test").count; ++i) test_ids.insert(ds.split("test").storm_id(i));
  for (auto id : test_ids) EXPECT_EQ(train_ids.count(id), 0u);

  const auto& test = ds.split("test");
  for (std::size_t i = 0; i < test.count; ++i) {
    const auto loaded = test.sample(i);
    const auto fresh = synth::generate_sample(cfg.generator, cfg.shift_for("test"), loaded.storm_id, loaded.timestamp);
    EXPECT_TRUE(same_stored_fields(loaded, fresh)) << "sample " << i;
  }
  fs::remove_all(dir);
}

TEST(SynthData, RegenerationIsByteIdentical) {
  auto cfg = small_config(24, 8, 8);
  const auto a = scratch("det_a"), b = scratch("det_b");
  data::generate_dataset(cfg, a);
  data::generate_dataset(cfg, b);
  for (const auto& entry : fs::directory_iterator(a)) {
    const auto name = entry.path().filename();
    EXPECT_EQ(slurp(a / name), slurp(b / name)) << name;
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(SynthData, TruncatedArrayNamesFile) {
  auto cfg = small_config(16, 8, 8);
  const auto dir = scratch("truncated");
  data::generate_dataset(cfg, dir);
  const auto victim = dir / "valid_labels.f32";
  fs::resize_file(victim, fs::file_size(victim) - 4);
  try {
    data::load_dataset(dir);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("valid_labels.f32"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(SynthData, CorruptManifestIsRejected) {
  auto cfg = small_config(8, 8, 8);
  const auto dir = scratch("corrupt");
  data::generate_dataset(cfg, dir);
  std::ofstream(dir / "manifest.json") << "{\"format_version\": 1";
  EXPECT_THROW(data::load_dataset(dir), FormatError);
  fs::remove_all(dir);
}

TEST(SynthData, ShuffleOrderIsSeededAndPreservesMultiset) {
  const auto a = data::batch_indices(100, 16, 5);
  const auto b = data::batch_indices(100, 16, 5);
  const auto c = data::batch_indices(100, 16, 6);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_EQ(a.size(), 7u);
  EXPECT_EQ(a.back().size(), 4u);
  std::multiset<std::size_t> ma, mc;
  for (const auto& batch : a) ma.insert(batch.begin(), batch.end());
  for (const auto& batch : c) mc.insert(batch.begin(), batch.end());
  EXPECT_EQ(ma, mc);
  EXPECT_EQ(ma.size(), 100u);

  auto cfg = small_config(40, 8, 8);
  const auto dir = scratch("shuffle");
  data::generate_dataset(cfg, dir);
  const auto ds = data::load_dataset(dir);
  const auto& train = ds.split("train");
  std::multiset<std::int64_t> s1, s2;
  for (const auto& batch : data::load_batches(train, 16, 11))
    for (const auto& s : batch) s1.insert(s.storm_id);
  for (const auto& batch : data::load_batches(train, 16, 12))
    for (const auto& s : batch) s2.insert(s.storm_id);
  EXPECT_EQ(s1, s2);
  fs::remove_all(dir);
}

TEST(SynthData, ConfigRejectsUnknownKeys) {
  EXPECT_THROW(data::dataset_config_from_json({{"grid", 16}, {"gird", 3}}), ValidationError);
  const auto c = data::dataset_config_from_json(
      {{"grid", 32}, {"counts", {{"train", 10}}}, {"shift", {{"test", {{"kind", "label"}, {"magnitude", 0.5}}}}}});
  EXPECT_EQ(c.generator.grid, 32u);
  EXPECT_EQ(c.shift_for("test").kind, synth::ShiftKind::kLabel);
  EXPECT_THROW(data::dataset_config_from_json({{"shift", {{"test", {{"kind", "sideways"}}}}}}), ValidationError);
}

TEST(SynthData, LabelShiftJsdIncreasesWithMagnitude) {
  for (std::uint64_t seed : {7u, 8u, 9u}) {
    std::vector<double> jsds;
    for (double m : {0.0, 0.5, 1.0}) {
      auto cfg = small_config(512, 0, 512);
      cfg.generator.seed = seed;
      cfg.shifts["test"] = {synth::ShiftKind::kLabel, m, 0};
      const auto train = data::generate_split(cfg, {}, 0, 512);
      const auto test = data::generate_split(cfg, cfg.shift_for("test"), 1000, 512);
      double total = 0;
      for (std::size_t task = 0; task < 4; ++task) {
        std::vector<double> a, b;
        for (const auto& s : train) a.push_back(s.labels[task]);
        for (const auto& s : test) b.push_back(s.labels[task]);
        total += diag::jsd(a, b, 32);
      }
      jsds.push_back(total / 4);
    }
    EXPECT_LT(jsds[0], jsds[1]) << "seed " << seed;
    EXPECT_LT(jsds[1], jsds[2]) << "seed " << seed;
  }
}
