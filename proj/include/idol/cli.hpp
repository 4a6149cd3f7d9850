#pragma once

// Command-line front end. `run` returns the process exit code:
// 0 success, 1 validation error (including bad flags), 2 runtime failure.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "idol/report.hpp"
#include "idol/trainer.hpp"

namespace idol::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kCommandFile = "command.json";

inline json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ValidationError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(p.string() + ": " + e.what());
  }
}

inline void write_json_file(const fs::path& p, const json& j) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

// Everything needed to rerun a command from its output directory.
inline void write_command_echo(const fs::path& out, const std::string& sub, const json& args) {
  write_json_file(out / kCommandFile, {{"command", sub}, {"args", args}});
}

inline fs::path resolve_data(const std::string& data, const fs::path& run) {
  if (!data.empty()) return data;
  const auto echo = run / kCommandFile;
  if (fs::exists(echo)) {
    const auto j = read_json_file(echo);
    if (j.contains("args") && j["args"].contains("data")) return j["args"]["data"].get<std::string>();
  }
  throw ValidationError("--data is required (no dataset recorded in " + run.string() + ")");
}

inline train::TrainConfig load_train_config(const std::string& path, std::optional<std::uint64_t> seed, bool random_dk) {
  train::TrainConfig c = path.empty() ? train::TrainConfig{} : train::train_config_from_json(read_json_file(path));
  if (seed) c.seed = *seed;
  if (random_dk) c.model.flags.random_dk_graph = true;
  c.validate();
  return c;
}

inline void dump_graph(const train::TrainConfig& c, const fs::path& out) {
  const auto m = c.model.flags.random_dk_graph ? model::randomized_dark_knowledge(c.model.graph_seed) : model::kDarkKnowledge;
  write_json_file(out / "graph.json", model::DarkKnowledgeGraph::from_matrix(m).to_json());
}

inline std::string one_line(std::string s) {
  for (auto& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Identity-oriented tropical cyclone estimation", "idol"};
  app.require_subcommand(1);

  std::string config, data, out_dir, grid, split = "test", run_dir;
  std::optional<std::uint64_t> seed;
  bool random_dk = false, want_graph = false;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--config", config, "Dataset config JSON")->check(CLI::ExistingFile);
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--seed", seed, "Generator seed (overrides the config)");

  auto* tr = app.add_subcommand("train", "Train one model");
  tr->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--config", config, "Training config JSON")->check(CLI::ExistingFile);
  tr->add_option("--out", out_dir, "Run directory")->required();
  tr->add_option("--seed", seed, "Training seed (overrides the config)");
  tr->add_flag("--random-dk-graph", random_dk, "Use a randomized dark-knowledge graph");
  tr->add_flag("--dump-graph", want_graph, "Write the graph used to graph.json");

  auto* ev = app.add_subcommand("eval", "Evaluate a trained run; prints metrics JSON");
  ev->add_option("--run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--data", data, "Dataset directory (default: the one the run was trained on)");
  ev->add_option("--split", split, "Split to evaluate")->check(CLI::IsMember({"train", "valid", "test"}));
  ev->add_option("--out", out_dir, "Also write metrics_<split>.json here");
  ev->add_option("--seed", seed, "Accepted for uniformity; evaluation is deterministic");

  auto* ab = app.add_subcommand("ablate", "Train every cell of a preset grid");
  ab->add_option("--grid", grid, "Preset grid: table2, table5, table3, fig9")->required();
  ab->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ab->add_option("--config", config, "Base training config JSON")->check(CLI::ExistingFile);
  ab->add_option("--out", out_dir, "Output directory")->required();
  ab->add_option("--seed", seed, "Training seed (overrides the config)");
  ab->add_flag("--random-dk-graph", random_dk, "Use a randomized dark-knowledge graph in every cell");
  ab->add_flag("--dump-graph", want_graph, "Write the base graph to graph.json");

  auto* dg = app.add_subcommand("diagnose", "Shift report: JSD, KDE, mutual information, variance");
  dg->add_option("--run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  dg->add_option("--data", data, "Dataset directory (default: the one the run was trained on)");
  dg->add_option("--split", split, "Split compared against train")->check(CLI::IsMember({"valid", "test"}));
  dg->add_option("--out", out_dir, "Report directory")->required();
  dg->add_option("--seed", seed, "Accepted for uniformity; the report is deterministic");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "idol: " << one_line(e.what()) << '\n';
    return 1;
  }

  try {
    if (gen->parsed()) {
      data::DatasetConfig dc = config.empty() ? data::DatasetConfig{} : data::dataset_config_from_json(read_json_file(config));
      if (seed) dc.generator.seed = *seed;
      const auto m = data::generate_dataset(dc, out_dir);
      out << "wrote " << (fs::path(out_dir) / "manifest.json").string() << '\n';
      (void)m;
    } else if (tr->parsed()) {
      const auto c = load_train_config(config, seed, random_dk);
      const auto ds = data::load_dataset(data);
      fs::create_directories(out_dir);
      write_command_echo(out_dir, "train", {{"data", fs::absolute(data).string()}, {"config", train::to_json(c)}});
      if (want_graph) dump_graph(c, out_dir);
      const auto r = train::train(c, ds, fs::path(out_dir));
      out << json{{"best_epoch", r.record.best_epoch}, {"test", train::metrics_json(r.record.test)}}.dump() << '\n';
    } else if (ev->parsed()) {
      const auto loaded = train::load_checkpoint<float>(fs::path(run_dir) / train::kCheckpointFile);
      const auto ds = data::load_dataset(resolve_data(data, run_dir));
      const auto e = train::evaluate(loaded.model, loaded.standardizer, ds.split(split), loaded.config.lambda);
      const json j{{"split", split}, {"loss", e.loss}, {"metrics", train::metrics_json(e.metrics)}};
      if (!out_dir.empty()) write_json_file(fs::path(out_dir) / ("metrics_" + split + ".json"), j);
      out << j.dump(2) << '\n';
    } else if (ab->parsed()) {
      const auto cells = train::preset_grid(grid);
      const auto c = load_train_config(config, seed, random_dk);
      const auto ds = data::load_dataset(data);
      fs::create_directories(out_dir);
      write_command_echo(out_dir, "ablate",
                         {{"data", fs::absolute(data).string()}, {"grid", grid}, {"config", train::to_json(c)}});
      if (want_graph) dump_graph(c, out_dir);
      train::ablate(c, cells, ds, fs::path(out_dir));
      out << "wrote " << (fs::path(out_dir) / "ablation.csv").string() << '\n';
    } else if (dg->parsed()) {
      const auto loaded = train::load_checkpoint<float>(fs::path(run_dir) / train::kCheckpointFile);
      const auto ds = data::load_dataset(resolve_data(data, run_dir));
      diag::write_report(diag::shift_report(loaded, ds, split), out_dir);
      out << "wrote " << (fs::path(out_dir) / "report.json").string() << '\n';
    }
  } catch (const ValidationError& e) {
    err << "idol: invalid input: " << one_line(e.what()) << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "idol: error: " << one_line(e.what()) << '\n';
    return 2;
  }
  return 0;
}

}  // namespace idol::cli
