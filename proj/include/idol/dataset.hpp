#pragma once

// On-disk dataset: manifest.json plus little-endian float32 arrays named
// <split>_<array>.f32 (row-major, shapes recorded only in the manifest).

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "idol/errors.hpp"
#include "idol/rng.hpp"
#include "idol/synth_data.hpp"

namespace idol::data {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kFormatVersion = 1;
inline constexpr std::array<const char*, 3> kSplitNames{"train", "valid", "test"};
inline constexpr std::array<const char*, 6> kArrayNames{"ir", "dev", "cor", "labels", "meta", "holland"};

struct DatasetConfig {
  synth::GeneratorConfig generator;
  std::map<std::string, std::size_t> counts{{"train", 512}, {"valid", 64}, {"test", 64}};
  std::map<std::string, synth::ShiftSpec> shifts;  // missing split -> no shift

  synth::ShiftSpec shift_for(const std::string& split) const {
    auto it = shifts.find(split);
    return it == shifts.end() ? synth::ShiftSpec{} : it->second;
  }

  void validate() const {
    generator.validate();
    for (const auto& [name, n] : counts) {
      if (std::find_if(kSplitNames.begin(), kSplitNames.end(), [&](const char* s) { return name == s; }) ==
          kSplitNames.end())
        throw ValidationError("unknown split '" + name + "'");
      (void)n;
    }
    for (const auto& [name, s] : shifts) s.validate();
  }
};

namespace detail {
inline void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end())
      throw ValidationError("unknown key '" + key + "' in " + where);
  }
}
}  // namespace detail

inline synth::ShiftSpec shift_from_json(const json& j) {
  detail::reject_unknown(j, {"kind", "magnitude", "seed"}, "shift spec");
  synth::ShiftSpec s;
  s.kind = synth::shift_kind_from_string(j.value("kind", std::string("none")));
  s.magnitude = j.value("magnitude", 0.0);
  s.seed = j.value("seed", std::uint64_t{0});
  s.validate();
  return s;
}

inline json shift_to_json(const synth::ShiftSpec& s) {
  return {{"kind", synth::to_string(s.kind)}, {"magnitude", s.magnitude}, {"seed", s.seed}};
}

inline DatasetConfig dataset_config_from_json(const json& j) {
  detail::reject_unknown(j, {"seed", "grid", "km_per_pixel", "timestamps_per_storm", "wind_coefficient", "counts", "shift"},
                         "data config");
  DatasetConfig c;
  try {
    c.generator.seed = j.value("seed", c.generator.seed);
    c.generator.grid = j.value("grid", c.generator.grid);
    c.generator.km_per_pixel = j.value("km_per_pixel", c.generator.km_per_pixel);
    c.generator.timestamps_per_storm = j.value("timestamps_per_storm", c.generator.timestamps_per_storm);
    c.generator.wind_coefficient = j.value("wind_coefficient", c.generator.wind_coefficient);
    if (j.contains("counts")) {
      c.counts.clear();
      for (const auto& [k, v] : j["counts"].items()) c.counts[k] = v.get<std::size_t>();
    }
    if (j.contains("shift")) {
      for (const auto& [k, v] : j["shift"].items()) c.shifts[k] = shift_from_json(v);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("data config: ") + e.what());
  }
  c.validate();
  return c;
}

inline json dataset_config_to_json(const DatasetConfig& c) {
  json shifts = json::object();
  for (const auto& [k, v] : c.shifts) shifts[k] = shift_to_json(v);
  return {{"seed", c.generator.seed},
          {"grid", c.generator.grid},
          {"km_per_pixel", c.generator.km_per_pixel},
          {"timestamps_per_storm", c.generator.timestamps_per_storm},
          {"wind_coefficient", c.generator.wind_coefficient},
          {"counts", c.counts},
          {"shift", shifts}};
}

struct SplitManifest {
  std::size_t count = 0;
  std::map<std::string, std::string> arrays;  // array name -> file name
};

struct DatasetManifest {
  int format_version = kFormatVersion;
  std::map<std::string, std::vector<std::size_t>> shapes;  // per-sample shapes
  std::map<std::string, SplitManifest> splits;
  json generator = json::object();

  std::size_t per_sample(const std::string& array) const {
    std::size_t n = 1;
    for (auto d : shapes.at(array)) n *= d;
    return n;
  }

  json to_json() const {
    json s = json::object();
    for (const auto& [name, sp] : splits) s[name] = {{"count", sp.count}, {"arrays", sp.arrays}};
    return {{"format_version", format_version},
            {"shapes", shapes},
            {"splits", s},
            {"generator", generator},
            {"label_order", {"v", "p", "ri", "ro"}},
            {"cor_order", {"tcf", "tcc", "tce", "tcw"}},
            {"dev_order", {"prev_level", "minutes_named"}},
            {"meta_order", {"storm_id", "timestamp"}},
            {"holland_order", {"A", "B", "p_n", "p_c"}},
            {"units", {{"v", "m/s"}, {"p", "hPa"}, {"ri", "km"}, {"ro", "km"}, {"tcw", "km"}}},
            {"dtype", "float32"},
            {"byte_order", "little"}};
  }

  static DatasetManifest from_json(const json& j) {
    DatasetManifest m;
    try {
      m.format_version = j.at("format_version").get<int>();
      if (m.format_version != kFormatVersion)
        throw FormatError("unsupported dataset format_version " + std::to_string(m.format_version));
      m.shapes = j.at("shapes").get<std::map<std::string, std::vector<std::size_t>>>();
      for (const auto& [name, sp] : j.at("splits").items()) {
        SplitManifest s;
        s.count = sp.at("count").get<std::size_t>();
        s.arrays = sp.at("arrays").get<std::map<std::string, std::string>>();
        m.splits[name] = std::move(s);
      }
      m.generator = j.value("generator", json::object());
    } catch (const json::exception& e) {
      throw FormatError(std::string("corrupt manifest: ") + e.what());
    }
    for (const char* a : kArrayNames)
      if (!m.shapes.count(a)) throw FormatError(std::string("corrupt manifest: missing shape for '") + a + "'");
    return m;
  }
};

// In-memory copy of one split.
struct SplitData {
  std::string name;
  std::size_t count = 0;
  std::size_t grid = 0;
  std::map<std::string, std::vector<float>> arrays;

  const float* row(const std::string& array, std::size_t i) const {
    const auto& a = arrays.at(array);
    return a.data() + i * (a.size() / count);
  }

  float label(std::size_t i, std::size_t task) const { return row("labels", i)[task]; }
  std::int64_t storm_id(std::size_t i) const { return static_cast<std::int64_t>(row("meta", i)[0]); }

  synth::TCSample sample(std::size_t i) const {
    synth::TCSample s;
    const std::size_t ir_n = arrays.at("ir").size() / count;
    s.ir.assign(row("ir", i), row("ir", i) + ir_n);
    std::copy_n(row("dev", i), 2, s.dev.begin());
    std::copy_n(row("cor", i), 4, s.cor.begin());
    std::copy_n(row("labels", i), 4, s.labels.begin());
    s.storm_id = static_cast<std::int64_t>(row("meta", i)[0]);
    s.timestamp = static_cast<std::int64_t>(row("meta", i)[1]);
    const float* h = row("holland", i);
    s.params = {h[0], h[1], h[2], h[3]};
    return s;
  }
};

struct Dataset {
  fs::path root;
  DatasetManifest manifest;
  std::map<std::string, SplitData> splits;

  const SplitData& split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end()) throw ValidationError("dataset has no split '" + name + "'");
    return it->second;
  }
};

inline std::size_t worker_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("IDOL_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap > 0) n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
  }
  return n;
}

// Samples of one split, storm-major, storms [first_storm, ...).
inline std::vector<synth::TCSample> generate_split(const DatasetConfig& cfg, const synth::ShiftSpec& shift,
                                                   std::int64_t first_storm, std::size_t count) {
  const std::size_t per_storm = cfg.generator.timestamps_per_storm;
  std::vector<synth::TCSample> out(count);
  const std::size_t threads = std::min(worker_threads(), std::max<std::size_t>(count, 1));
  auto work = [&](std::size_t worker) {
    for (std::size_t i = worker; i < count; i += threads) {
      const auto storm = first_storm + static_cast<std::int64_t>(i / per_storm);
      out[i] = synth::generate_sample(cfg.generator, shift, storm, static_cast<std::int64_t>(i % per_storm));
    }
  };
  if (threads <= 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  return out;
}

inline void write_f32(const fs::path& path, const std::vector<float>& v) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline std::map<std::string, std::vector<float>> pack(const std::vector<synth::TCSample>& samples) {
  std::map<std::string, std::vector<float>> a;
  for (const auto& s : samples) {
    a["ir"].insert(a["ir"].end(), s.ir.begin(), s.ir.end());
    a["dev"].insert(a["dev"].end(), s.dev.begin(), s.dev.end());
    a["cor"].insert(a["cor"].end(), s.cor.begin(), s.cor.end());
    a["labels"].insert(a["labels"].end(), s.labels.begin(), s.labels.end());
    a["meta"].push_back(static_cast<float>(s.storm_id));
    a["meta"].push_back(static_cast<float>(s.timestamp));
    for (double h : {s.params.a, s.params.b, s.params.ambient_hpa, s.params.central_hpa})
      a["holland"].push_back(static_cast<float>(h));
  }
  for (const char* n : kArrayNames) a[n];  // empty splits still get files
  return a;
}

// Generates every configured split into `out_dir`. Storm ids are assigned in
// split order (train, valid, test), so splits never share a storm.
inline DatasetManifest generate_dataset(const DatasetConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  DatasetManifest m;
  const std::size_t g = cfg.generator.grid;
  m.shapes = {{"ir", {synth::kFrames, synth::kChannels, g, g}}, {"dev", {2}}, {"cor", {4}},
              {"labels", {4}},                                   {"meta", {2}}, {"holland", {4}}};
  m.generator = dataset_config_to_json(cfg);
  std::int64_t next_storm = 0;
  const std::size_t per_storm = cfg.generator.timestamps_per_storm;
  for (const char* split : kSplitNames) {
    auto it = cfg.counts.find(split);
    if (it == cfg.counts.end()) continue;
    const std::size_t count = it->second;
    auto samples = generate_split(cfg, cfg.shift_for(split), next_storm, count);
    next_storm += static_cast<std::int64_t>((count + per_storm - 1) / per_storm);
    SplitManifest sm;
    sm.count = count;
    for (auto& [name, values] : pack(samples)) {
      const std::string file = std::string(split) + "_" + name + ".f32";
      write_f32(out_dir / file, values);
      sm.arrays[name] = file;
    }
    m.splits[split] = std::move(sm);
  }
  std::ofstream(out_dir / "manifest.json") << m.to_json().dump(2) << '\n';
  return m;
}

inline DatasetManifest read_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("corrupt manifest: cannot open " + (dir / "manifest.json").string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(std::string("corrupt manifest: ") + e.what());
  }
  return DatasetManifest::from_json(j);
}

inline Dataset load_dataset(const fs::path& dir) {
  Dataset d;
  d.root = dir;
  d.manifest = read_manifest(dir);
  for (const auto& [name, sm] : d.manifest.splits) {
    SplitData s;
    s.name = name;
    s.count = sm.count;
    s.grid = d.manifest.shapes.at("ir").back();
    for (const char* a : kArrayNames) {
      auto it = sm.arrays.find(a);
      if (it == sm.arrays.end()) throw FormatError("corrupt manifest: split " + name + " lacks array " + a);
      const fs::path file = dir / it->second;
      const std::uintmax_t expected = sm.count * d.manifest.per_sample(a) * sizeof(float);
      std::error_code ec;
      const std::uintmax_t actual = fs::file_size(file, ec);
      if (ec || actual != expected) {
        throw ShapeError("shape mismatch: " + file.string() + " has " + (ec ? std::string("no") : std::to_string(actual)) +
                         " bytes, manifest declares " + std::to_string(expected));
      }
      std::vector<float> v(expected / sizeof(float));
      std::ifstream in(file, std::ios::binary);
      in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(expected));
      s.arrays[a] = std::move(v);
    }
    d.splits[name] = std::move(s);
  }
  return d;
}

// Index batches over a split. Without a seed the order is sequential; with
// one it is a deterministic permutation. The final batch may be short.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t count, std::size_t batch_size,
                                                           std::optional<std::uint64_t> shuffle_seed = std::nullopt) {
  if (batch_size == 0) throw ValidationError("batch_size must be > 0");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    shuffle(order, rng);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < count; i += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(count, i + batch_size)));
  return out;
}

// Materialized samples per batch.
inline std::vector<std::vector<synth::TCSample>> load_batches(const SplitData& split, std::size_t batch_size,
                                                              std::optional<std::uint64_t> shuffle_seed = std::nullopt) {
  std::vector<std::vector<synth::TCSample>> out;
  for (const auto& idx : batch_indices(split.count, batch_size, shuffle_seed)) {
    auto& b = out.emplace_back();
    for (auto i : idx) b.push_back(split.sample(i));
  }
  return out;
}

}  // namespace idol::data
