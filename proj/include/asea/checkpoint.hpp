#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "asea/model.hpp"

namespace asea {

inline constexpr const char* kCheckpointFormat = "asea-checkpoint-v1";

namespace detail {

inline void put_f32(std::vector<char>& blob, double v) {
  const float f = static_cast<float>(v);
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  for (int i = 0; i < 4; ++i) blob.push_back(static_cast<char>((u >> (8 * i)) & 0xffu));
}

inline double get_f32(const char* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  float f;
  std::memcpy(&f, &u, 4);
  return static_cast<double>(f);
}

}  // namespace detail

/// Rounds every parameter and buffer to the nearest float32, as a save/load round trip would.
inline void quantize_to_float32(AseaModel& model) {
  ParamSet ps = model.parameters();
  for (auto& p : ps.params)
    for (double& v : p.var.mutable_value().storage()) v = static_cast<double>(static_cast<float>(v));
  for (auto& b : ps.buffers)
    for (double& v : *b.data) v = static_cast<double>(static_cast<float>(v));
}

/// Writes <dir>/manifest.json and <dir>/params.bin (little-endian float32).
inline void save_checkpoint(AseaModel& model, const std::filesystem::path& dir, const nlohmann::json& extra = {}) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw FormatError("cannot create checkpoint directory " + dir.string());
  ParamSet ps = model.parameters();
  std::vector<char> blob;
  nlohmann::json entries = nlohmann::json::array();
  auto emit = [&](const std::string& name, const Shape& shape, std::span<const double> data, bool trainable) {
    entries.push_back({{"name", name},
                       {"shape", shape},
                       {"offset", blob.size()},
                       {"count", data.size()},
                       {"trainable", trainable}});
    for (double v : data) detail::put_f32(blob, v);
  };
  for (const auto& p : ps.params) emit(p.name, p.var.shape(), p.var.value().data(), true);
  for (const auto& b : ps.buffers) emit(b.name, Shape{b.data->size()}, *b.data, false);

  nlohmann::json manifest = {{"format", kCheckpointFormat},
                             {"dtype", "float32"},
                             {"byte_order", "little"},
                             {"blob", "params.bin"},
                             {"blob_bytes", blob.size()},
                             {"config", config_to_json(model.config)},
                             {"tensors", entries}};
  if (!extra.is_null()) manifest["extra"] = extra;
  {
    std::ofstream out(dir / "params.bin", std::ios::binary);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw FormatError("failed writing " + (dir / "params.bin").string());
  }
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  out << manifest.dump(2) << '\n';
  if (!out) throw FormatError("failed writing " + (dir / "manifest.json").string());
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw FormatError("checkpoint manifest not found: " + path.string());
  try {
    nlohmann::json j = nlohmann::json::parse(in);
    if (j.value("format", "") != kCheckpointFormat) throw FormatError("unsupported checkpoint format in " + path.string());
    return j;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError("invalid checkpoint manifest " + path.string() + ": " + ex.what());
  }
}

/// Rebuilds the model from a checkpoint. When `expected` is given, the stored
/// skeleton must agree with it.
inline AseaModel load_checkpoint(const std::filesystem::path& dir, std::optional<SkeletonKind> expected = std::nullopt) {
  nlohmann::json manifest = read_manifest(dir);
  AseaConfig cfg = config_from_json(manifest.at("config"));
  if (expected && *expected != cfg.skeleton) {
    throw ConfigError("checkpoint was trained on skeleton " + to_string(cfg.skeleton) + " but " +
                      to_string(*expected) + " was requested");
  }
  const auto blob_path = dir / manifest.value("blob", std::string("params.bin"));
  std::ifstream in(blob_path, std::ios::binary);
  if (!in) throw FormatError("checkpoint blob not found: " + blob_path.string());
  std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  AseaModel model(cfg);
  ParamSet ps = model.parameters();
  std::map<std::string, std::pair<Shape, std::span<double>>> slots;
  for (auto& p : ps.params) slots[p.name] = {p.var.shape(), p.var.mutable_value().data()};
  for (auto& b : ps.buffers) slots[b.name] = {Shape{b.data->size()}, std::span<double>(*b.data)};

  std::size_t expected_bytes = 0;
  std::set<std::string> seen;
  try {
    for (const auto& e : manifest.at("tensors")) {
      const std::string name = e.at("name").get<std::string>();
      const Shape shape = e.at("shape").get<Shape>();
      const std::size_t offset = e.at("offset").get<std::size_t>();
      const std::size_t count = e.at("count").get<std::size_t>();
      auto it = slots.find(name);
      if (it == slots.end()) throw FormatError("checkpoint has unknown tensor '" + name + "'");
      if (shape != it->second.first || shape_numel(shape) != count) {
        throw FormatError("tensor '" + name + "' has shape " + shape_str(shape) + " in the manifest but the model expects " +
                          shape_str(it->second.first));
      }
      if (offset + 4 * count > blob.size()) {
        throw FormatError("checkpoint blob is truncated: tensor '" + name + "' needs bytes [" + std::to_string(offset) +
                          "," + std::to_string(offset + 4 * count) + ") but the blob has " + std::to_string(blob.size()));
      }
      for (std::size_t i = 0; i < count; ++i) it->second.second[i] = detail::get_f32(blob.data() + offset + 4 * i);
      expected_bytes = std::max(expected_bytes, offset + 4 * count);
      seen.insert(name);
    }
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("invalid checkpoint tensor table: ") + ex.what());
  }
  for (const auto& [name, slot] : slots)
    if (!seen.count(name)) throw FormatError("checkpoint is missing tensor '" + name + "'");
  if (blob.size() != expected_bytes) {
    throw FormatError("checkpoint blob has " + std::to_string(blob.size()) + " bytes, manifest describes " +
                      std::to_string(expected_bytes));
  }
  return model;
}

}  // namespace asea
