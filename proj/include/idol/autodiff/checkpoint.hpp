#pragma once

// Parameter archive in the safetensors layout: an 8-byte little-endian header
// length, a JSON header mapping names to {dtype, shape, data_offsets}, then
// the raw float32 payload. Hyperparameters travel as a JSON string under
// "__metadata__".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "idol/autodiff/nn.hpp"
#include "idol/errors.hpp"

namespace idol::ad {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct Checkpoint {
  nlohmann::json hyperparameters = nlohmann::json::object();
  std::map<std::string, std::pair<Shape, std::vector<float>>> arrays;
};

template <typename T>
Checkpoint snapshot(const ParamList<T>& params, nlohmann::json hyperparameters) {
  Checkpoint ck;
  ck.hyperparameters = std::move(hyperparameters);
  for (const auto& p : params) {
    std::vector<float> v(p.tensor.values().begin(), p.tensor.values().end());
    if (!ck.arrays.emplace(p.name, std::make_pair(p.tensor.shape(), std::move(v))).second) {
      throw FormatError("duplicate parameter name " + p.name);
    }
  }
  return ck;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json header = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, arr] : ck.arrays) {
    const std::uint64_t bytes = arr.second.size() * sizeof(float);
    header[name] = {{"dtype", "F32"}, {"shape", arr.first}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  header["__metadata__"] = {{"hyperparameters", ck.hyperparameters.dump()}, {"format", "pt"}};
  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::uint64_t n = text.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, arr] : ck.arrays)
    out.write(reinterpret_cast<const char*>(arr.second.data()),
              static_cast<std::streamsize>(arr.second.size() * sizeof(float)));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!in || n > (1ULL << 30)) throw FormatError("corrupt checkpoint header in " + path.string());
  std::string text(n, '\0');
  in.read(text.data(), static_cast<std::streamsize>(n));
  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Checkpoint ck;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint header is not JSON: " + std::string(e.what()));
  }
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      if (entry.contains("hyperparameters"))
        ck.hyperparameters = nlohmann::json::parse(entry["hyperparameters"].get<std::string>());
      continue;
    }
    if (entry.at("dtype") != "F32") throw FormatError("unsupported dtype for " + name);
    Shape shape = entry.at("shape").get<Shape>();
    const auto begin = entry.at("data_offsets")[0].get<std::uint64_t>();
    const auto end = entry.at("data_offsets")[1].get<std::uint64_t>();
    if (end < begin || end > payload.size() || (end - begin) != numel(shape) * sizeof(float)) {
      throw FormatError("checkpoint array " + name + " has inconsistent offsets");
    }
    std::vector<float> v(numel(shape));
    std::memcpy(v.data(), payload.data() + begin, end - begin);
    ck.arrays.emplace(name, std::make_pair(std::move(shape), std::move(v)));
  }
  return ck;
}

// Copies archived values into live parameters. Every parameter must be
// present with a matching shape.
template <typename T>
void restore(const Checkpoint& ck, ParamList<T>& params) {
  for (auto& p : params) {
    auto it = ck.arrays.find(p.name);
    if (it == ck.arrays.end()) throw FormatError("checkpoint missing parameter " + p.name);
    if (it->second.first != p.tensor.shape()) {
      throw FormatError("checkpoint shape mismatch for " + p.name + ": " + shape_str(it->second.first) + " vs " +
                        shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second.second[i]);
  }
  if (ck.arrays.size() != params.size()) {
    throw FormatError("checkpoint has " + std::to_string(ck.arrays.size()) + " arrays, model expects " +
                      std::to_string(params.size()));
  }
}

}  // namespace idol::ad
