#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "idol/report.hpp"

using namespace idol;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("idol_report_" + name);
  fs::remove_all(p);
  return p;
}

data::Dataset make_data(const std::string& name, std::size_t train, std::size_t test, synth::ShiftSpec shift = {}) {
  data::DatasetConfig dc;
  dc.generator.grid = 16;
  dc.generator.seed = 8;
  dc.counts = {{"train", train}, {"valid", 16}, {"test", test}};
  dc.shifts["test"] = shift;
  const auto dir = scratch(name);
  data::generate_dataset(dc, dir);
  return data::load_dataset(dir);
}

const data::Dataset& small_data() {
  static const auto ds = make_data("small", 48, 40);
  return ds;
}

const train::LoadedRun<float>& tiny_run() {
  static const train::LoadedRun<float> run = [] {
    const auto& ds = small_data();
    train::TrainConfig c;
    c.model.n = 8;
    c.model.k = 2;
    c.model.graph_width = 6;
    c.model.attention_heads = 2;
    c.epochs = 1;
    c.batch_size = 8;
    c.lr = 1e-3;
    const auto out = scratch("run");
    train::train(c, ds, out);
    return train::load_checkpoint<float>(out / train::kCheckpointFile);
  }();
  return run;
}

json schema() {
  std::ifstream in(fs::path(IDOL_SOURCE_DIR) / "schemas" / "report.schema.json");
  return json::parse(in);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(LabelJsd, NoShiftIsSmallAndLabelShiftIsLarger) {
  const auto none = make_data("none", 1024, 512);
  for (double v : diag::label_jsd(none.split("train"), none.split("test"))) EXPECT_LT(v, 0.05);
  const auto shifted = make_data("shifted", 1024, 512, {synth::ShiftKind::kLabel, 1.0, 3});
  const auto a = diag::label_jsd(none.split("train"), none.split("test"));
  const auto b = diag::label_jsd(shifted.split("train"), shifted.split("test"));
  EXPECT_GT(b[0], a[0]);
  EXPECT_GT(b[1], a[1]);
}

TEST(StandardizedVariance, ScaleFreeAndZeroForIdenticalDomains) {
  Rng rng(1);
  std::vector<std::vector<std::vector<double>>> doms(3);
  for (auto& d : doms)
    for (int i = 0; i < 20; ++i) d.push_back({rng.normal(), rng.normal()});
  auto scaled = doms;
  for (auto& d : scaled)
    for (auto& r : d) r[0] *= 1000.0;
  const auto a = diag::standardized_domain_variance(doms), b = diag::standardized_domain_variance(scaled);
  EXPECT_NEAR(a.mean, b.mean, 1e-12);
  std::vector<std::vector<std::vector<double>>> same{doms[0], doms[0]};
  EXPECT_NEAR(diag::standardized_domain_variance(same).mean, 0.0, 1e-20);
  EXPECT_THROW(diag::standardized_domain_variance({doms[0]}), ValidationError);
}

TEST(SchemaValidator, CatchesTypeRangeAndMissingKeys) {
  const json s = {{"type", "object"},
                  {"required", {"a"}},
                  {"additionalProperties", false},
                  {"properties", {{"a", {{"type", "number"}, {"minimum", 0}}}, {"b", {{"type", "array"}, {"items", {{"type", "string"}}}}}}}};
  EXPECT_TRUE(diag::validate_schema(json{{"a", 1}, {"b", {"x"}}}, s).empty());
  EXPECT_EQ(diag::validate_schema(json{{"b", {"x"}}}, s).size(), 1u);
  EXPECT_EQ(diag::validate_schema(json{{"a", -1}}, s).size(), 1u);
  EXPECT_EQ(diag::validate_schema(json{{"a", 1}, {"c", 2}}, s).size(), 1u);
  EXPECT_EQ(diag::validate_schema(json{{"a", 1}, {"b", {3}}}, s).size(), 1u);
  EXPECT_EQ(diag::validate_schema(json{{"a", "x"}}, s).size(), 1u);
}

TEST(ShiftReport, ValidatesAgainstSchemaAndHasEveryTable) {
  const auto rep = diag::shift_report(tiny_run(), small_data());
  const auto errors = diag::validate_schema(rep.doc, schema());
  for (const auto& e : errors) ADD_FAILURE() << e;
  EXPECT_EQ(rep.doc["mutual_information"].size(), 4u + 6u + 4u + 4u);
  EXPECT_TRUE(rep.doc["variance"]["tables"].contains("identity"));
  EXPECT_TRUE(rep.doc["variance"]["tables"].contains("backbone"));
  EXPECT_EQ(rep.doc["variance"]["domains"].size(), 3u);
  EXPECT_EQ(rep.doc["jsd"]["per_batch_input"].size(), 2u);
  for (const char* t : synth::kLabelNames) {
    const auto& k = rep.doc["kde"][t];
    const auto x = k["x"].get<std::vector<double>>(), y = k["truth"].get<std::vector<double>>();
    EXPECT_NEAR(diag::trapezoid(x, y), 1.0, 0.05) << t;
  }
}

TEST(ShiftReport, MetricsMatchEvaluate) {
  const auto& run = tiny_run();
  const auto rep = diag::shift_report(run, small_data());
  const auto ev = train::evaluate(run.model, run.standardizer, small_data().split("test"), run.config.lambda);
  for (std::size_t t = 0; t < 4; ++t)
    EXPECT_NEAR(rep.doc["metrics"][synth::kLabelNames[t]]["MAE"].get<double>(), ev.metrics[t].mae, 1e-9);
}

TEST(ShiftReport, DeterministicFiles) {
  const auto a = scratch("out_a"), b = scratch("out_b");
  diag::write_report(diag::shift_report(tiny_run(), small_data()), a);
  diag::write_report(diag::shift_report(tiny_run(), small_data()), b);
  EXPECT_EQ(slurp(a / "report.json"), slurp(b / "report.json"));
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a / "series")) {
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(b / "series" / e.path().filename()));
    EXPECT_EQ(slurp(e.path()).rfind("x,y\n", 0), 0u);
  }
  EXPECT_EQ(files, 4u + 8u + 1u);
}

TEST(ShiftReport, AblatedModelOmitsIdentityTables) {
  const auto& ds = small_data();
  train::TrainConfig c = tiny_run().config;
  c.model.flags.no_id_sp = c.model.flags.no_id_sh = true;
  const auto out = scratch("run_bare");
  train::train(c, ds, out);
  const auto run = train::load_checkpoint<float>(out / train::kCheckpointFile);
  const auto rep = diag::shift_report(run, ds);
  EXPECT_TRUE(diag::validate_schema(rep.doc, schema()).empty());
  EXPECT_FALSE(rep.doc["variance"]["tables"].contains("identity"));
  EXPECT_EQ(rep.doc["mutual_information"].size(), 4u);
}
