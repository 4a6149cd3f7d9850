#pragma once

// Training, evaluation and ablation harness. All randomness (init, data
// order, identity draws) derives from TrainConfig::seed.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "idol/autodiff/checkpoint.hpp"
#include "idol/dataset.hpp"
#include "idol/model.hpp"

namespace idol::train {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr double kKmPerNmi = 1.852;
inline constexpr const char* kCheckpointFile = "best.safetensors";

struct TrainConfig {
  double lr = 1e-4;
  std::size_t epochs = 10;
  std::size_t max_steps = 0;      // 0: no cap beyond epochs
  std::size_t batch_size = 16;
  std::size_t eval_batch_size = 64;
  std::size_t train_samples = 0;  // 0: whole train split
  double lambda = model::kDefaultLambda;
  std::uint64_t seed = 0;
  model::ModelConfig model;       // grid is overwritten from the dataset

  void validate() const {
    if (!(lr > 0)) throw ValidationError("lr must be > 0");
    if (batch_size == 0 || eval_batch_size == 0) throw ValidationError("batch sizes must be > 0");
    if (!(lambda >= 0)) throw ValidationError("lambda must be >= 0");
    model.validate();
  }
};

inline json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"epochs", c.epochs},
          {"max_steps", c.max_steps},
          {"batch_size", c.batch_size},
          {"eval_batch_size", c.eval_batch_size},
          {"train_samples", c.train_samples},
          {"lambda", c.lambda},
          {"seed", c.seed},
          {"n", c.model.n},
          {"k", c.model.k},
          {"R", c.model.max_iterations},
          {"tau", c.model.tolerance},
          {"graph_width", c.model.graph_width},
          {"attention_heads", c.model.attention_heads},
          {"graph_seed", c.model.graph_seed},
          {"id_ratio", c.model.id_ratio.str()},
          {"flags", model::to_json(c.model.flags)}};
}

inline TrainConfig train_config_from_json(const json& j) {
  data::detail::reject_unknown(j,
                               {"lr", "epochs", "max_steps", "batch_size", "eval_batch_size", "train_samples", "lambda",
                                "seed", "n", "k", "R", "tau", "graph_width", "attention_heads", "graph_seed", "id_ratio",
                                "flags"},
                               "train config");
  TrainConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.eval_batch_size = j.value("eval_batch_size", c.eval_batch_size);
    c.train_samples = j.value("train_samples", c.train_samples);
    c.lambda = j.value("lambda", c.lambda);
    c.seed = j.value("seed", c.seed);
    c.model.n = j.value("n", c.model.n);
    c.model.k = j.value("k", c.model.k);
    c.model.max_iterations = j.value("R", c.model.max_iterations);
    c.model.tolerance = j.value("tau", c.model.tolerance);
    c.model.graph_width = j.value("graph_width", c.model.graph_width);
    c.model.attention_heads = j.value("attention_heads", c.model.attention_heads);
    c.model.graph_seed = j.value("graph_seed", c.model.graph_seed);
    if (j.contains("id_ratio")) c.model.id_ratio = model::IdRatio::parse(j["id_ratio"].get<std::string>());
    if (j.contains("flags")) {
      const auto& f = j["flags"];
      data::detail::reject_unknown(f, {"no_id_sp", "no_id_sh", "linear_id_sp", "noisy_prior", "random_dk_graph"}, "flags");
      auto& fl = c.model.flags;
      fl.no_id_sp = f.value("no_id_sp", false);
      fl.no_id_sh = f.value("no_id_sh", false);
      fl.linear_id_sp = f.value("linear_id_sp", false);
      fl.noisy_prior = f.value("noisy_prior", false);
      fl.random_dk_graph = f.value("random_dk_graph", false);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

// Per-column z-scoring fitted on the train split only.
struct Standardizer {
  std::array<double, 2> dev_mean{}, dev_std{};
  std::array<double, 4> cor_mean{}, cor_std{};
  std::array<double, 4> label_mean{}, label_std{};

  template <std::size_t N>
  static void fit_columns(const std::vector<float>& a, std::size_t rows, std::array<double, N>& mean,
                          std::array<double, N>& sd) {
    for (std::size_t c = 0; c < N; ++c) {
      double m = 0, v = 0;
      for (std::size_t r = 0; r < rows; ++r) m += a[r * N + c];
      m /= static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) v += (a[r * N + c] - m) * (a[r * N + c] - m);
      v /= static_cast<double>(rows);
      mean[c] = m;
      sd[c] = v > 1e-12 ? std::sqrt(v) : 1.0;
    }
  }

  static Standardizer fit(const data::SplitData& train, std::size_t rows) {
    if (rows == 0) throw ValidationError("cannot standardize an empty train split");
    Standardizer s;
    fit_columns(train.arrays.at("dev"), rows, s.dev_mean, s.dev_std);
    fit_columns(train.arrays.at("cor"), rows, s.cor_mean, s.cor_std);
    fit_columns(train.arrays.at("labels"), rows, s.label_mean, s.label_std);
    return s;
  }

  double label_to_physical(double z, std::size_t task) const { return z * label_std[task] + label_mean[task]; }

  json to_json() const {
    return {{"dev_mean", dev_mean},     {"dev_std", dev_std},     {"cor_mean", cor_mean},
            {"cor_std", cor_std},       {"label_mean", label_mean}, {"label_std", label_std}};
  }
  static Standardizer from_json(const json& j) {
    Standardizer s;
    s.dev_mean = j.at("dev_mean");
    s.dev_std = j.at("dev_std");
    s.cor_mean = j.at("cor_mean");
    s.cor_std = j.at("cor_std");
    s.label_mean = j.at("label_mean");
    s.label_std = j.at("label_std");
    return s;
  }
};

template <typename T>
model::Batch<T> make_batch(const data::SplitData& split, const std::vector<std::size_t>& idx, const Standardizer& st) {
  const std::size_t b = idx.size(), g = split.grid;
  const std::size_t ir_n = 4 * g * g;
  std::vector<T> ir(b * ir_n), dev(b * 2), cor(b * 4), lab(b * 4);
  for (std::size_t r = 0; r < b; ++r) {
    const std::size_t i = idx[r];
    std::copy_n(split.row("ir", i), ir_n, ir.begin() + static_cast<std::ptrdiff_t>(r * ir_n));
    for (std::size_t c = 0; c < 2; ++c) dev[r * 2 + c] = static_cast<T>((split.row("dev", i)[c] - st.dev_mean[c]) / st.dev_std[c]);
    for (std::size_t c = 0; c < 4; ++c) {
      cor[r * 4 + c] = static_cast<T>((split.row("cor", i)[c] - st.cor_mean[c]) / st.cor_std[c]);
      lab[r * 4 + c] = static_cast<T>((split.row("labels", i)[c] - st.label_mean[c]) / st.label_std[c]);
    }
  }
  return {ad::Tensor<T>::constant({b, 2, 2, g, g}, std::move(ir)), ad::Tensor<T>::constant({b, 2}, std::move(dev)),
          ad::Tensor<T>::constant({b, 4}, std::move(cor)), ad::Tensor<T>::constant({b, 4}, std::move(lab))};
}

struct TaskMetrics {
  double mae = 0, rmse = 0, std = 0;
};

// STD is the population standard deviation of the absolute errors.
inline TaskMetrics compute_metrics(const std::vector<double>& pred, const std::vector<double>& truth) {
  if (pred.size() != truth.size() || pred.empty()) throw ShapeError("metrics need equal, non-empty prediction and truth");
  TaskMetrics m;
  double sq = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = std::abs(pred[i] - truth[i]);
    m.mae += e;
    sq += e * e;
  }
  const double n = static_cast<double>(pred.size());
  m.mae /= n;
  m.rmse = std::sqrt(sq / n);
  m.std = std::sqrt(std::max(0.0, sq / n - m.mae * m.mae));
  return m;
}

inline json metrics_json(const std::array<TaskMetrics, 4>& m) {
  json j = json::object();
  for (std::size_t t = 0; t < 4; ++t) {
    json e = {{"MAE", m[t].mae}, {"RMSE", m[t].rmse}, {"STD", m[t].std}, {"unit", t == 0 ? "m/s" : t == 1 ? "hPa" : "km"}};
    if (t >= 2) e["MAE_nmi"] = m[t].mae / kKmPerNmi;
    j[synth::kLabelNames[t]] = e;
  }
  return j;
}

struct EvalOutput {
  std::array<TaskMetrics, 4> metrics{};
  std::vector<std::array<double, 4>> pred, truth;  // physical units
  double loss = 0;                                  // mean L_total in eval mode
};

template <typename T>
EvalOutput evaluate(const model::IdolModel<T>& m, const Standardizer& st, const data::SplitData& split, double lambda,
                    std::size_t batch_size = 64) {
  ad::NoGradGuard guard;
  EvalOutput out;
  double loss_sum = 0;
  for (const auto& idx : data::batch_indices(split.count, batch_size)) {
    const auto batch = make_batch<T>(split, idx, st);
    const auto f = m.forward(batch, false, nullptr);
    loss_sum += m.loss(f, batch, lambda).total_value * static_cast<double>(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto& p = out.pred.emplace_back();
      auto& y = out.truth.emplace_back();
      for (std::size_t t = 0; t < 4; ++t) {
        p[t] = st.label_to_physical(static_cast<double>(f.pred[r * 4 + t]), t);
        y[t] = split.label(idx[r], t);
      }
    }
  }
  if (out.pred.empty()) throw ValidationError("cannot evaluate an empty split '" + split.name + "'");
  out.loss = loss_sum / static_cast<double>(out.pred.size());
  for (std::size_t t = 0; t < 4; ++t) {
    std::vector<double> p, y;
    for (std::size_t i = 0; i < out.pred.size(); ++i) {
      p.push_back(out.pred[i][t]);
      y.push_back(out.truth[i][t]);
    }
    out.metrics[t] = compute_metrics(p, y);
  }
  return out;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double valid_loss = 0;
  std::vector<std::size_t> iterations_ri, iterations_ro;  // histogram over 1..R
};

struct RunRecord {
  TrainConfig config;
  std::uint64_t data_seed = 0;
  std::size_t steps = 0;
  double initial_train_loss = 0;  // eval-mode L_total over the train subset before any step
  double final_train_loss = 0;    // same after the last step
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> epochs;
  std::array<TaskMetrics, 4> test{};
  std::string checkpoint;
  double wall_time_s = 0;

  json to_json() const {
    json ep = json::array();
    for (const auto& e : epochs)
      ep.push_back({{"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"valid_loss", e.valid_loss},
                    {"iterations_ri", e.iterations_ri},
                    {"iterations_ro", e.iterations_ro}});
    return {{"config", train::to_json(config)},
            {"data_seed", data_seed},
            {"steps", steps},
            {"initial_train_loss", initial_train_loss},
            {"final_train_loss", final_train_loss},
            {"best_epoch", best_epoch},
            {"epochs", ep},
            {"test", metrics_json(test)},
            {"checkpoint", checkpoint},
            {"wall_time_s", wall_time_s}};
  }
};

template <typename T>
struct TrainResult {
  RunRecord record;
  model::IdolModel<T> model;  // best-valid weights
  Standardizer standardizer;
};

inline json checkpoint_metadata(const TrainConfig& c, const Standardizer& st) {
  return {{"train_config", to_json(c)}, {"model_config", model::to_json(c.model)}, {"standardizer", st.to_json()}};
}

template <typename T>
struct LoadedRun {
  TrainConfig config;
  Standardizer standardizer;
  model::IdolModel<T> model;
};

template <typename T>
LoadedRun<T> load_checkpoint(const fs::path& path) {
  const auto ck = ad::read_checkpoint(path);
  const auto& h = ck.hyperparameters;
  if (!h.contains("train_config") || !h.contains("model_config") || !h.contains("standardizer"))
    throw FormatError("checkpoint " + path.string() + " lacks run metadata");
  LoadedRun<T> r;
  try {
    r.config = train_config_from_json(h["train_config"]);
    r.config.model = model::model_config_from_json(h["model_config"]);
    r.standardizer = Standardizer::from_json(h["standardizer"]);
  } catch (const json::exception& e) {
    throw FormatError("checkpoint metadata: " + std::string(e.what()));
  }
  r.model = model::IdolModel<T>(r.config.model, r.config.seed);
  auto params = r.model.parameters();
  ad::restore(ck, params);
  return r;
}

namespace detail {

inline void dump_bad_batch(const fs::path& path, const data::SplitData& split, const std::vector<std::size_t>& idx,
                           std::size_t step, const json& losses) {
  json rows = json::array();
  for (auto i : idx) {
    const auto s = split.sample(i);
    rows.push_back({{"index", i}, {"storm_id", s.storm_id}, {"timestamp", s.timestamp}, {"dev", s.dev}, {"cor", s.cor},
                    {"labels", s.labels}});
  }
  std::ofstream(path) << json{{"step", step}, {"losses", losses}, {"samples", rows}}.dump(2) << '\n';
}

inline json loss_json(const std::array<double, 4>& task, const std::array<double, 5>& identity, double total) {
  json t = json::object(), id = json::object();
  for (std::size_t i = 0; i < 4; ++i) t[synth::kLabelNames[i]] = task[i];
  for (std::size_t i = 0; i < 5; ++i) id[model::kIdentityNames[i]] = identity[i];
  return {{"total", total}, {"task", t}, {"identity", id}};
}

inline bool finite_params(const ad::ParamList<float>& p) {
  for (const auto& t : p)
    for (float v : t.tensor.values())
      if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace detail

// Trains on `train`, selects the best epoch on `valid`, reports on `test`.
// With an output directory, writes train_log.jsonl, best.safetensors and
// run.json there.
inline TrainResult<float> train(TrainConfig cfg, const data::Dataset& ds, const std::optional<fs::path>& out_dir = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& tr = ds.split("train");
  const auto& va = ds.split("valid");
  cfg.model.grid = tr.grid;
  cfg.validate();
  const std::size_t n_train = cfg.train_samples ? std::min(cfg.train_samples, tr.count) : tr.count;
  if (n_train == 0) throw ValidationError("train split is empty");

  TrainResult<float> res;
  res.standardizer = Standardizer::fit(tr, n_train);
  const auto& st = res.standardizer;
  res.model = model::IdolModel<float>(cfg.model, cfg.seed);
  auto& m = res.model;
  auto params = m.parameters();
  ad::Adam<float> opt(params, cfg.lr);

  RunRecord& rec = res.record;
  rec.config = cfg;
  rec.data_seed = ds.manifest.generator.value("seed", std::uint64_t{0});

  std::ofstream log;
  if (out_dir) {
    fs::create_directories(*out_dir);
    log.open(*out_dir / "train_log.jsonl");
  }

  data::SplitData train_view = tr;  // restricted to the first n_train rows
  if (n_train < tr.count) {
    train_view.count = n_train;
    for (auto& [name, a] : train_view.arrays) a.resize(a.size() / tr.count * n_train);
  }
  rec.initial_train_loss = evaluate(m, st, train_view, cfg.lambda, cfg.eval_batch_size).loss;

  ad::Checkpoint best = ad::snapshot(params, checkpoint_metadata(cfg, st));
  double best_valid = va.count ? evaluate(m, st, va, cfg.lambda, cfg.eval_batch_size).loss : rec.initial_train_loss;

  Rng draw(hash_seed({cfg.seed, 0x1D5ULL}));
  std::size_t step = 0;
  const bool capped = cfg.max_steps > 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs && !(capped && step >= cfg.max_steps); ++epoch) {
    EpochRecord er;
    er.epoch = epoch;
    er.iterations_ri.assign(cfg.model.max_iterations + 1, 0);
    er.iterations_ro.assign(cfg.model.max_iterations + 1, 0);
    double loss_sum = 0;
    std::size_t seen = 0;
    for (const auto& idx : data::batch_indices(n_train, cfg.batch_size, hash_seed({cfg.seed, epoch}))) {
      if (capped && step >= cfg.max_steps) break;
      const auto batch = make_batch<float>(train_view, idx, st);
      opt.zero_grad();
      const auto out = m.forward(batch, true, &draw);
      const auto l = m.loss(out, batch, cfg.lambda);
      const auto lj = detail::loss_json(l.task, l.identity, l.total_value);
      if (!std::isfinite(l.total_value)) {
        const fs::path dump = (out_dir ? *out_dir : fs::temp_directory_path()) / "nan_batch.json";
        detail::dump_bad_batch(dump, train_view, idx, step, lj);
        throw NumericalError("non-finite loss at step " + std::to_string(step) + "; batch dumped to " + dump.string());
      }
      l.total.backward();
      opt.step();
      ++step;
      loss_sum += l.total_value * static_cast<double>(idx.size());
      seen += idx.size();
      if (!cfg.model.flags.no_id_sp && cfg.model.prior_mode() != model::PriorMode::kLinear) {
        ++er.iterations_ri[out.flow.iterations_ri];
        ++er.iterations_ro[out.flow.iterations_ro];
      }
      if (log) {
        json line = lj;
        line["step"] = step;
        line["epoch"] = epoch;
        line["iterations_ri"] = out.flow.iterations_ri;
        line["iterations_ro"] = out.flow.iterations_ro;
        line["clamped"] = out.flow.clamped;
        log << line.dump() << '\n';
      }
    }
    if (!detail::finite_params(params)) throw NumericalError("non-finite parameters after epoch " + std::to_string(epoch));
    er.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    er.valid_loss = va.count ? evaluate(m, st, va, cfg.lambda, cfg.eval_batch_size).loss : er.train_loss;
    if (er.valid_loss < best_valid) {
      best_valid = er.valid_loss;
      rec.best_epoch = epoch;
      best = ad::snapshot(params, checkpoint_metadata(cfg, st));
    }
    if (log)
      log << json{{"epoch", epoch}, {"train_loss", er.train_loss}, {"valid_loss", er.valid_loss},
                  {"iterations_ri", er.iterations_ri}, {"iterations_ro", er.iterations_ro}}
                 .dump()
          << '\n';
    rec.epochs.push_back(std::move(er));
  }
  rec.steps = step;
  rec.final_train_loss = evaluate(m, st, train_view, cfg.lambda, cfg.eval_batch_size).loss;

  ad::restore(best, params);
  if (out_dir) {
    ad::write_checkpoint(*out_dir / kCheckpointFile, best);
    rec.checkpoint = (*out_dir / kCheckpointFile).string();
  }
  if (ds.splits.count("test") && ds.split("test").count)
    rec.test = evaluate(m, st, ds.split("test"), cfg.lambda, cfg.eval_batch_size).metrics;
  rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (out_dir) std::ofstream(*out_dir / "run.json") << rec.to_json().dump(2) << '\n';
  return res;
}

// ---- ablation ----

struct AblationCell {
  std::string name;
  model::AblationFlags flags;
  model::IdRatio ratio;
};

inline std::vector<AblationCell> preset_grid(const std::string& name) {
  using F = model::AblationFlags;
  if (name == "table2")
    return {{"backbone", F{true, true, false, false, false}, {}},
            {"backbone+id_sp", F{false, true, false, false, false}, {}},
            {"backbone+id_sp+id_sh", F{}, {}}};
  if (name == "table5")
    return {{"holland", F{}, {}}, {"linear_id_sp", F{false, false, true, false, false}, {}},
            {"noisy_prior", F{false, false, false, true, false}, {}}};
  if (name == "table3") {
    std::vector<AblationCell> cells;
    for (const char* r : {"1:1", "1:2", "1:3", "2:1", "3:1"}) {
      std::string tag = std::string("ratio_") + r;
      tag[tag.find(':')] = '-';
      cells.push_back({tag, F{}, model::IdRatio::parse(r)});
    }
    return cells;
  }
  if (name == "fig9") return {{"real_dk", F{}, {}}, {"random_dk", F{false, false, false, false, true}, {}}};
  if (name == "empty") return {};
  throw ValidationError("unknown ablation grid '" + name + "' (expected table2, table5, table3, fig9 or empty)");
}

struct AblationRow {
  AblationCell cell;
  RunRecord record;
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string s = "cell,no_id_sp,no_id_sh,linear_id_sp,noisy_prior,random_dk_graph,id_ratio,task,MAE,RMSE,STD\n";
  char buf[128];
  for (const auto& r : rows) {
    const auto& f = r.cell.flags;
    for (std::size_t t = 0; t < 4; ++t) {
      const auto& m = r.record.test[t];
      std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f", m.mae, m.rmse, m.std);
      s += r.cell.name + "," + std::to_string(f.no_id_sp) + "," + std::to_string(f.no_id_sh) + "," +
           std::to_string(f.linear_id_sp) + "," + std::to_string(f.noisy_prior) + "," + std::to_string(f.random_dk_graph) +
           "," + r.cell.ratio.str() + "," + synth::kLabelNames[t] + "," + buf + "\n";
    }
  }
  return s;
}

// One run per cell, all on the same dataset and seed.
inline std::vector<AblationRow> ablate(const TrainConfig& base, const std::vector<AblationCell>& cells, const data::Dataset& ds,
                                       const std::optional<fs::path>& out_dir = {}) {
  std::vector<AblationRow> rows;
  for (const auto& cell : cells) {
    TrainConfig c = base;
    c.model.flags = cell.flags;
    c.model.flags.random_dk_graph = cell.flags.random_dk_graph || base.model.flags.random_dk_graph;
    c.model.id_ratio = cell.ratio;
    std::optional<fs::path> dir;
    if (out_dir) dir = *out_dir / cell.name;
    rows.push_back({cell, train(c, ds, dir).record});
  }
  if (out_dir) {
    fs::create_directories(*out_dir);
    std::ofstream(*out_dir / "ablation.csv") << ablation_csv(rows);
  }
  return rows;
}

}  // namespace idol::train
