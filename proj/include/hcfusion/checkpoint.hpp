#pragma once

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include "hcfusion/config.hpp"
#include "hcfusion/model.hpp"

namespace hcfusion {

/// Serialized model state.
///
/// File layout: the 8-byte magic "HCFCKPT\0", a little-endian uint32 format
/// version, a uint64 header length, a JSON header (configs, step counter and a
/// table of parameter names, shapes and byte offsets), then the float32
/// parameter payload.
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;
  static constexpr char kMagic[8] = {'H', 'C', 'F', 'C', 'K', 'P', 'T', '\0'};

  std::uint32_t version = kFormatVersion;
  RunConfig config;
  std::uint64_t step = 0;
  std::map<std::string, Tensor<float>> params;

  template <typename T>
  static Checkpoint capture(FusionModel<T>& model, const TrainConfig& train, std::uint64_t step) {
    Checkpoint c;
    c.config.network = model.config();
    c.config.train = train;
    c.config.train.ablation = model.ablation();
    c.step = step;
    for (auto& [name, t] : model.state()) c.params.emplace(name, t.template cast<float>());
    return c;
  }

  /// Rebuilds the model this checkpoint describes.
  template <typename T>
  FusionModel<T> restore() const {
    FusionModel<T> m(config.network, config.train.ablation);
    std::map<std::string, Tensor<T>> state;
    for (const auto& [name, t] : params) state.emplace(name, t.template cast<T>());
    m.load_state(state);
    return m;
  }

  void save(const std::string& path) const {
    nlohmann::json header;
    header["version"] = version;
    header["step"] = step;
    header["config"] = config.to_map();
    std::uint64_t offset = 0;
    auto& table = header["params"] = nlohmann::json::array();
    for (const auto& [name, t] : params) {
      table.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
      offset += t.numel() * sizeof(float);
    }
    const std::string text = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint '" + path + "'");
    out.write(kMagic, sizeof(kMagic));
    write_le(out, version);
    write_le(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : params)
      for (float v : t.values()) write_le(out, v);
    if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
      throw DataError("'" + path + "' is not a checkpoint file");
    Checkpoint c;
    c.version = read_le<std::uint32_t>(in);
    if (c.version != kFormatVersion)
      throw DataError("checkpoint '" + path + "' has unsupported format version " + std::to_string(c.version));
    const auto len = read_le<std::uint64_t>(in);
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw DataError("truncated checkpoint header in '" + path + "'");
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("corrupt checkpoint header in '" + path + "': " + e.what());
    }
    c.step = header.at("step").get<std::uint64_t>();
    for (const auto& [k, v] : header.at("config").items()) c.config.set(k, v.get<std::string>());
    for (const auto& entry : header.at("params")) {
      Tensor<float> t(entry.at("shape").get<Shape>());
      for (auto& v : t.values()) v = read_le<float>(in);
      if (!in) throw DataError("truncated checkpoint payload in '" + path + "'");
      c.params.emplace(entry.at("name").get<std::string>(), std::move(t));
    }
    return c;
  }

 private:
  template <typename V>
  static void write_le(std::ostream& out, V v) {
    unsigned char buf[sizeof(V)];
    std::memcpy(buf, &v, sizeof(V));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(V));
    out.write(reinterpret_cast<const char*>(buf), sizeof(V));
  }

  template <typename V>
  static V read_le(std::istream& in) {
    unsigned char buf[sizeof(V)] = {};
    in.read(reinterpret_cast<char*>(buf), sizeof(V));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(V));
    V v;
    std::memcpy(&v, buf, sizeof(V));
    return v;
  }
};

}  // namespace hcfusion
