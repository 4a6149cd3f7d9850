#pragma once

// Shift report: every diagnostic for one checkpoint on one dataset, as a
// single JSON document plus plot-ready CSV series.

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "idol/diagnostics.hpp"
#include "idol/trainer.hpp"

namespace idol::diag {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr std::size_t kReportBins = 32;
inline constexpr std::size_t kKdePoints = 256;
inline constexpr std::size_t kReportBatch = 32;
inline constexpr std::size_t kInputReferenceSamples = 64;

// Eval-mode representations, one row per sample.
struct Representations {
  std::vector<std::vector<double>> backbone;             // token-mean of F_emb
  std::vector<std::vector<double>> shared;               // empty when disabled
  std::array<std::vector<std::vector<double>>, 4> specific;
  std::vector<std::array<double, 4>> labels;
  std::vector<std::array<double, 4>> pred;               // physical units

  // Shared token followed by the four specific tokens, per sample.
  std::vector<std::vector<double>> identity_concat() const {
    std::vector<std::vector<double>> out(backbone.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (!shared.empty()) out[i] = shared[i];
      for (const auto& s : specific)
        if (!s.empty()) out[i].insert(out[i].end(), s[i].begin(), s[i].end());
    }
    return out;
  }
};

template <typename T>
Representations collect_representations(const model::IdolModel<T>& m, const train::Standardizer& st,
                                         const data::SplitData& split, std::size_t batch_size = 64) {
  ad::NoGradGuard guard;
  Representations r;
  auto rows = [](const ad::Tensor<T>& t, std::vector<std::vector<double>>& dst) {
    const std::size_t b = t.dim(0), w = t.size() / b;
    for (std::size_t i = 0; i < b; ++i) dst.emplace_back(t.values().begin() + i * w, t.values().begin() + (i + 1) * w);
  };
  for (const auto& idx : data::batch_indices(split.count, batch_size)) {
    const auto batch = train::make_batch<T>(split, idx, st);
    const auto out = m.forward(batch, false, nullptr);
    rows(ad::mean_axis(out.f_emb, 1), r.backbone);
    if (out.shared.defined()) rows(out.shared, r.shared);
    for (std::size_t t = 0; t < 4; ++t)
      if (out.specific[t].defined()) rows(out.specific[t], r.specific[t]);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto& y = r.labels.emplace_back();
      auto& p = r.pred.emplace_back();
      for (std::size_t t = 0; t < 4; ++t) {
        y[t] = split.label(idx[i], t);
        p[t] = st.label_to_physical(static_cast<double>(out.pred[i * 4 + t]), t);
      }
    }
  }
  return r;
}

// Cross-domain variance after z-scoring every dimension over the pooled
// samples, so representations of different scale are comparable.
inline VarianceSummary standardized_domain_variance(const std::vector<std::vector<std::vector<double>>>& domains) {
  if (domains.size() < 2) throw ValidationError("identity_variance needs at least two domains");
  const std::size_t dim = domains.front().empty() ? 0 : domains.front().front().size();
  if (dim == 0) throw ValidationError("identity_variance: empty domain or zero-width tokens");
  std::vector<double> mean(dim, 0.0), var(dim, 0.0);
  std::size_t n = 0;
  for (const auto& d : domains)
    for (const auto& row : d) {
      if (row.size() != dim) throw ShapeError("identity_variance: token width differs between samples");
      for (std::size_t k = 0; k < dim; ++k) mean[k] += row[k];
      ++n;
    }
  for (auto& v : mean) v /= static_cast<double>(n);
  for (const auto& d : domains)
    for (const auto& row : d)
      for (std::size_t k = 0; k < dim; ++k) var[k] += (row[k] - mean[k]) * (row[k] - mean[k]);
  std::vector<std::vector<double>> means;
  for (const auto& d : domains) {
    if (d.empty()) throw ValidationError("identity_variance: empty domain");
    std::vector<double> m(dim, 0.0);
    for (const auto& row : d)
      for (std::size_t k = 0; k < dim; ++k) {
        const double sd = std::sqrt(var[k] / static_cast<double>(n));
        m[k] += sd > 0 ? (row[k] - mean[k]) / sd : 0.0;
      }
    for (auto& v : m) v /= static_cast<double>(d.size());
    means.push_back(std::move(m));
  }
  return identity_variance(means, dim);
}

inline json summary_json(const VarianceSummary& s) {
  return {{"mean", s.mean}, {"max", s.max}, {"per_dim", s.per_dim}};
}

struct KdeCurve {
  std::vector<double> x, density;
};

inline KdeCurve kde_curve(const std::vector<double>& samples, double lo, double hi) {
  KdeCurve c;
  c.x = linspace(lo, hi, kKdePoints);
  c.density = kde(samples, c.x);
  return c;
}

inline std::vector<double> column(const std::vector<std::array<double, 4>>& rows, std::size_t t) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(r[t]);
  return out;
}

inline std::vector<double> flatten(const std::vector<std::vector<double>>& rows) {
  std::vector<double> out;
  for (const auto& r : rows) out.insert(out.end(), r.begin(), r.end());
  return out;
}

// Channel-0 pixel values of the last frame for the given samples.
inline std::vector<double> input_pixels(const data::SplitData& s, std::size_t begin, std::size_t end) {
  const std::size_t plane = s.grid * s.grid;
  std::vector<double> out;
  for (std::size_t i = begin; i < end; ++i) {
    const float* ir = s.row("ir", i) + 2 * plane;  // frame 1, channel 0
    out.insert(out.end(), ir, ir + plane);
  }
  return out;
}

inline std::vector<double> label_column(const data::SplitData& s, std::size_t t) {
  std::vector<double> out;
  out.reserve(s.count);
  for (std::size_t i = 0; i < s.count; ++i) out.push_back(s.label(i, t));
  return out;
}

// Per-task JSD between the label marginals of two splits.
inline std::array<double, 4> label_jsd(const data::SplitData& ref, const data::SplitData& s, std::size_t bins = kReportBins) {
  std::array<double, 4> out{};
  for (std::size_t t = 0; t < 4; ++t) out[t] = jsd(label_column(ref, t), label_column(s, t), bins);
  return out;
}

struct ShiftReport {
  json doc;
  std::map<std::string, std::vector<std::pair<double, double>>> series;  // name -> (x, y)
};

template <typename T>
ShiftReport shift_report(const train::LoadedRun<T>& run, const data::Dataset& ds, const std::string& eval_split = "test") {
  const auto& tr = ds.split("train");
  const auto& te = ds.split(eval_split);
  if (tr.count < 2 || te.count < 2) throw ValidationError("shift report needs at least two samples in train and " + eval_split);
  ShiftReport rep;
  json& d = rep.doc;
  d["split"] = eval_split;
  d["counts"] = {{"train", tr.count}, {eval_split, te.count}};

  // label and input shift
  json jsd_task = json::object(), per_batch_label = json::object();
  const auto batches = data::batch_indices(te.count, kReportBatch);
  const auto split_jsd = label_jsd(tr, te);
  for (std::size_t t = 0; t < 4; ++t) {
    const auto a = label_column(tr, t);
    jsd_task[synth::kLabelNames[t]] = split_jsd[t];
    std::vector<double> per;
    for (const auto& idx : batches) {
      if (idx.size() < 2) continue;
      std::vector<double> q;
      for (auto i : idx) q.push_back(te.label(i, t));
      per.push_back(jsd(a, q, kReportBins));
      rep.series[std::string("jsd_label_") + synth::kLabelNames[t]].push_back({static_cast<double>(per.size() - 1), per.back()});
    }
    per_batch_label[synth::kLabelNames[t]] = per;
  }
  const auto ref_pixels = input_pixels(tr, 0, std::min(tr.count, kInputReferenceSamples));
  std::vector<double> per_batch_input;
  for (const auto& idx : batches) {
    if (idx.size() < 2) continue;
    per_batch_input.push_back(jsd(ref_pixels, input_pixels(te, idx.front(), idx.back() + 1), kReportBins));
    rep.series["jsd_input"].push_back({static_cast<double>(per_batch_input.size() - 1), per_batch_input.back()});
  }
  d["jsd"] = {{"train_vs_split", jsd_task}, {"per_batch_label", per_batch_label}, {"per_batch_input", per_batch_input},
              {"bins", kReportBins}, {"batch_size", kReportBatch}};

  // predictions and KDE alignment
  const auto reps = collect_representations(run.model, run.standardizer, te);
  std::array<train::TaskMetrics, 4> metrics;
  json kde_j = json::object();
  for (std::size_t t = 0; t < 4; ++t) {
    const auto y = column(reps.labels, t), p = column(reps.pred, t);
    metrics[t] = train::compute_metrics(p, y);
    double lo = std::min(*std::min_element(y.begin(), y.end()), *std::min_element(p.begin(), p.end()));
    double hi = std::max(*std::max_element(y.begin(), y.end()), *std::max_element(p.begin(), p.end()));
    const double pad = 3.0 * std::max({scott_bandwidth(y), scott_bandwidth(p), 1e-6});
    const auto ct = kde_curve(y, lo - pad, hi + pad), cp = kde_curve(p, lo - pad, hi + pad);
    const std::string name = synth::kLabelNames[t];
    kde_j[name] = {{"x", ct.x}, {"truth", ct.density}, {"pred", cp.density}};
    for (std::size_t i = 0; i < ct.x.size(); ++i) {
      rep.series["kde_" + name + "_truth"].push_back({ct.x[i], ct.density[i]});
      rep.series["kde_" + name + "_pred"].push_back({cp.x[i], cp.density[i]});
    }
  }
  d["metrics"] = train::metrics_json(metrics);
  d["kde"] = kde_j;

  // mutual information: each specific token with its attribute, token pairs, shared with each attribute
  json mi = json::array();
  const std::size_t n = reps.labels.size();
  if (n >= kMutualInfoMinSamples) {
    for (std::size_t t = 0; t < 4; ++t) {
      if (reps.specific[t].empty()) break;
      const auto y = column(reps.labels, t);
      const std::size_t w = reps.specific[t][0].size();
      mi.push_back({{"x", std::string("id_sp_") + synth::kLabelNames[t]},
                    {"y", synth::kLabelNames[t]},
                    {"nats", mutual_information(flatten(reps.specific[t]), w, y, 1)}});
    }
    for (std::size_t a = 0; a < 4; ++a)
      for (std::size_t b = a + 1; b < 4; ++b) {
        if (reps.specific[a].empty()) break;
        const std::size_t w = reps.specific[a][0].size();
        mi.push_back({{"x", std::string("id_sp_") + synth::kLabelNames[a]},
                      {"y", std::string("id_sp_") + synth::kLabelNames[b]},
                      {"nats", mutual_information(flatten(reps.specific[a]), w, flatten(reps.specific[b]), w)}});
      }
    if (!reps.shared.empty())
      for (std::size_t t = 0; t < 4; ++t)
        mi.push_back({{"x", "id_sh"},
                      {"y", synth::kLabelNames[t]},
                      {"nats", mutual_information(flatten(reps.shared), reps.shared[0].size(), column(reps.labels, t), 1)}});
    const std::size_t bw = reps.backbone[0].size();
    for (std::size_t t = 0; t < 4; ++t)
      mi.push_back({{"x", "backbone"},
                    {"y", synth::kLabelNames[t]},
                    {"nats", mutual_information(flatten(reps.backbone), bw, column(reps.labels, t), 1)}});
  }
  d["mutual_information"] = mi;

  // cross-domain variance with every split as one domain
  std::vector<Representations> by_split;
  std::vector<std::string> domain_names;
  for (const auto& [name, s] : ds.splits) {
    if (s.count == 0) continue;
    by_split.push_back(name == eval_split ? reps : collect_representations(run.model, run.standardizer, s));
    domain_names.push_back(name);
  }
  json var = json::object();
  if (by_split.size() >= 2) {
    auto gather = [&](auto get) {
      std::vector<std::vector<std::vector<double>>> doms;
      for (const auto& r : by_split) doms.push_back(get(r));
      return doms;
    };
    var["backbone"] = summary_json(standardized_domain_variance(gather([](const Representations& r) { return r.backbone; })));
    if (!by_split[0].shared.empty() || !by_split[0].specific[0].empty())
      var["identity"] =
          summary_json(standardized_domain_variance(gather([](const Representations& r) { return r.identity_concat(); })));
    if (!by_split[0].shared.empty())
      var["id_sh"] = summary_json(standardized_domain_variance(gather([](const Representations& r) { return r.shared; })));
    for (std::size_t t = 0; t < 4; ++t)
      if (!by_split[0].specific[t].empty())
        var[std::string("id_sp_") + synth::kLabelNames[t]] =
            summary_json(standardized_domain_variance(gather([t](const Representations& r) { return r.specific[t]; })));
  }
  d["variance"] = {{"domains", domain_names}, {"tables", var}};
  d["config"] = train::to_json(run.config);
  return rep;
}

inline void write_report(const ShiftReport& rep, const fs::path& out_dir) {
  fs::create_directories(out_dir / "series");
  std::ofstream(out_dir / "report.json") << rep.doc.dump(2) << '\n';
  char buf[64];
  for (const auto& [name, pts] : rep.series) {
    std::ofstream out(out_dir / "series" / (name + ".csv"));
    out << "x,y\n";
    for (const auto& [x, y] : pts) {
      std::snprintf(buf, sizeof buf, "%.9g,%.9g\n", x, y);
      out << buf;
    }
  }
}

// ---- JSON schema subset: type, required, properties, additionalProperties,
// items, minimum, maximum, minItems, enum ----

inline bool schema_type_matches(const json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "number") return v.is_number();
  if (type == "integer") return v.is_number_integer();
  if (type == "boolean") return v.is_boolean();
  if (type == "null") return v.is_null();
  throw ValidationError("unsupported schema type '" + type + "'");
}

inline void validate_schema(const json& v, const json& schema, const std::string& path, std::vector<std::string>& errors) {
  if (schema.contains("type")) {
    const auto& t = schema["type"];
    bool ok = false;
    if (t.is_array()) {
      for (const auto& x : t) ok = ok || schema_type_matches(v, x.get<std::string>());
    } else {
      ok = schema_type_matches(v, t.get<std::string>());
    }
    if (!ok) {
      errors.push_back(path + ": expected type " + t.dump());
      return;
    }
  }
  if (schema.contains("enum") && std::find(schema["enum"].begin(), schema["enum"].end(), v) == schema["enum"].end())
    errors.push_back(path + ": value not in enum");
  if (v.is_number()) {
    if (schema.contains("minimum") && v.get<double>() < schema["minimum"].get<double>())
      errors.push_back(path + ": below minimum");
    if (schema.contains("maximum") && v.get<double>() > schema["maximum"].get<double>())
      errors.push_back(path + ": above maximum");
  }
  if (v.is_object()) {
    if (schema.contains("required"))
      for (const auto& r : schema["required"])
        if (!v.contains(r.get<std::string>())) errors.push_back(path + ": missing required '" + r.get<std::string>() + "'");
    const json props = schema.value("properties", json::object());
    for (const auto& [key, val] : v.items()) {
      if (props.contains(key)) {
        validate_schema(val, props[key], path + "/" + key, errors);
      } else if (schema.contains("additionalProperties")) {
        const auto& ap = schema["additionalProperties"];
        if (ap.is_boolean() && !ap.get<bool>()) errors.push_back(path + ": unexpected key '" + key + "'");
        if (ap.is_object()) validate_schema(val, ap, path + "/" + key, errors);
      }
    }
  }
  if (v.is_array()) {
    if (schema.contains("minItems") && v.size() < schema["minItems"].get<std::size_t>())
      errors.push_back(path + ": fewer than minItems");
    if (schema.contains("items"))
      for (std::size_t i = 0; i < v.size(); ++i) validate_schema(v[i], schema["items"], path + "/" + std::to_string(i), errors);
  }
}

inline std::vector<std::string> validate_schema(const json& v, const json& schema) {
  std::vector<std::string> errors;
  validate_schema(v, schema, "", errors);
  return errors;
}

}  // namespace idol::diag
