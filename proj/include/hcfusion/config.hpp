#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "hcfusion/errors.hpp"

namespace hcfusion {

/// Architectural hyperparameters. Defaults: a five-layer dilated context
/// aggregation encoder and a three-block windowed-attention decoder.
struct NetworkConfig {
  int encoder_channels = 64;
  std::vector<int> encoder_dilations = {1, 2, 4, 8, 1};
  int kernel_size = 3;
  double negative_slope = 0.2;
  int embed_dim = 96;
  int window_size = 8;
  int num_heads = 3;
  int patch_size = 2;
  int decoder_depth = 3;
  int mlp_ratio = 4;
  bool shared_encoder = true;
  bool nca_shared_alpha = false;

  void validate() const {
    if (encoder_channels < 1) throw ConfigError("encoder_channels must be positive");
    if (encoder_dilations.empty()) throw ConfigError("encoder_dilations must not be empty");
    for (int d : encoder_dilations)
      if (d < 1) throw ConfigError("encoder_dilations must all be >= 1");
    if (kernel_size < 1 || kernel_size % 2 == 0) throw ConfigError("kernel_size must be a positive odd integer");
    if (!(negative_slope > 0.0 && negative_slope < 1.0)) throw ConfigError("negative_slope must lie in (0,1)");
    if (embed_dim < 1 || num_heads < 1) throw ConfigError("embed_dim and num_heads must be positive");
    if (embed_dim % num_heads != 0)
      throw ConfigError("embed_dim (" + std::to_string(embed_dim) + ") not divisible by num_heads (" +
                        std::to_string(num_heads) + ")");
    if (window_size < 1 || patch_size < 1 || decoder_depth < 1 || mlp_ratio < 1)
      throw ConfigError("window_size, patch_size, decoder_depth and mlp_ratio must be positive");
    if (encoder_channels < 2) throw ConfigError("encoder_channels must be >= 2 (reconstruction halves it)");
  }

  bool operator==(const NetworkConfig&) const = default;
};

struct AblationFlags {
  bool disable_stb = false;
  bool disable_nca = false;
  bool disable_bfm = false;

  bool operator==(const AblationFlags&) const = default;
};

/// Optimization protocol. The defaults are the full-scale values; desk-scale
/// runs override batch size, epochs and crop size.
struct TrainConfig {
  double lr_init = 1e-4;
  double lr_final = 1e-8;
  int batch_size = 16;
  int epochs = 8;
  int crop_size = 256;
  double lambda_1 = 10.0;
  std::uint64_t seed = 42;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global-norm clip, 0 disables
  AblationFlags ablation;

  void validate() const {
    if (!(lr_final <= lr_init)) throw ConfigError("lr_final must not exceed lr_init");
    if (lr_init < 0 || lr_final < 0) throw ConfigError("learning rates must be non-negative");
    if (batch_size < 1 || epochs < 1 || crop_size < 1)
      throw ConfigError("batch_size, epochs and crop_size must be >= 1");
    if (!(lambda_1 >= 0.0)) throw ConfigError("lambda_1 must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0,1)");
    if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
    if (weight_decay < 0 || grad_clip < 0) throw ConfigError("weight_decay and grad_clip must be >= 0");
  }

  bool operator==(const TrainConfig&) const = default;
};

namespace detail {

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename V>
V parse_value(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  V v{};
  if constexpr (std::is_same_v<V, bool>) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + text + "'");
  } else {
    is >> v;
    if (is.fail() || !is.eof())
      throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return v;
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_value<int>(key, trim(item)));
  return out;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

/// Both configurations as one flat key-value document.
struct RunConfig {
  NetworkConfig network;
  TrainConfig train;

  void set(const std::string& key, const std::string& value) {
    using detail::parse_value;
    auto& n = network;
    auto& t = train;
    if (key == "encoder_channels") n.encoder_channels = parse_value<int>(key, value);
    else if (key == "encoder_dilations") n.encoder_dilations = detail::parse_int_list(key, value);
    else if (key == "kernel_size") n.kernel_size = parse_value<int>(key, value);
    else if (key == "negative_slope") n.negative_slope = parse_value<double>(key, value);
    else if (key == "embed_dim") n.embed_dim = parse_value<int>(key, value);
    else if (key == "window_size") n.window_size = parse_value<int>(key, value);
    else if (key == "num_heads") n.num_heads = parse_value<int>(key, value);
    else if (key == "patch_size") n.patch_size = parse_value<int>(key, value);
    else if (key == "decoder_depth") n.decoder_depth = parse_value<int>(key, value);
    else if (key == "mlp_ratio") n.mlp_ratio = parse_value<int>(key, value);
    else if (key == "shared_encoder") n.shared_encoder = parse_value<bool>(key, value);
    else if (key == "nca_shared_alpha") n.nca_shared_alpha = parse_value<bool>(key, value);
    else if (key == "lr_init") t.lr_init = parse_value<double>(key, value);
    else if (key == "lr_final") t.lr_final = parse_value<double>(key, value);
    else if (key == "batch_size") t.batch_size = parse_value<int>(key, value);
    else if (key == "epochs") t.epochs = parse_value<int>(key, value);
    else if (key == "crop_size") t.crop_size = parse_value<int>(key, value);
    else if (key == "lambda_1") t.lambda_1 = parse_value<double>(key, value);
    else if (key == "seed") t.seed = parse_value<std::uint64_t>(key, value);
    else if (key == "beta1") t.beta1 = parse_value<double>(key, value);
    else if (key == "beta2") t.beta2 = parse_value<double>(key, value);
    else if (key == "adam_eps") t.adam_eps = parse_value<double>(key, value);
    else if (key == "weight_decay") t.weight_decay = parse_value<double>(key, value);
    else if (key == "grad_clip") t.grad_clip = parse_value<double>(key, value);
    else if (key == "disable_stb") t.ablation.disable_stb = parse_value<bool>(key, value);
    else if (key == "disable_nca") t.ablation.disable_nca = parse_value<bool>(key, value);
    else if (key == "disable_bfm") t.ablation.disable_bfm = parse_value<bool>(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
  }

  std::map<std::string, std::string> to_map() const {
    using detail::format_double;
    const auto& n = network;
    const auto& t = train;
    std::string dil;
    for (std::size_t i = 0; i < n.encoder_dilations.size(); ++i)
      dil += (i ? "," : "") + std::to_string(n.encoder_dilations[i]);
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };
    return {
        {"encoder_channels", std::to_string(n.encoder_channels)},
        {"encoder_dilations", dil},
        {"kernel_size", std::to_string(n.kernel_size)},
        {"negative_slope", format_double(n.negative_slope)},
        {"embed_dim", std::to_string(n.embed_dim)},
        {"window_size", std::to_string(n.window_size)},
        {"num_heads", std::to_string(n.num_heads)},
        {"patch_size", std::to_string(n.patch_size)},
        {"decoder_depth", std::to_string(n.decoder_depth)},
        {"mlp_ratio", std::to_string(n.mlp_ratio)},
        {"shared_encoder", b(n.shared_encoder)},
        {"nca_shared_alpha", b(n.nca_shared_alpha)},
        {"lr_init", format_double(t.lr_init)},
        {"lr_final", format_double(t.lr_final)},
        {"batch_size", std::to_string(t.batch_size)},
        {"epochs", std::to_string(t.epochs)},
        {"crop_size", std::to_string(t.crop_size)},
        {"lambda_1", format_double(t.lambda_1)},
        {"seed", std::to_string(t.seed)},
        {"beta1", format_double(t.beta1)},
        {"beta2", format_double(t.beta2)},
        {"adam_eps", format_double(t.adam_eps)},
        {"weight_decay", format_double(t.weight_decay)},
        {"grad_clip", format_double(t.grad_clip)},
        {"disable_stb", b(t.ablation.disable_stb)},
        {"disable_nca", b(t.ablation.disable_nca)},
        {"disable_bfm", b(t.ablation.disable_bfm)},
    };
  }

  /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
  static RunConfig parse(std::istream& in) {
    RunConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      cfg.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    cfg.network.validate();
    cfg.train.validate();
    return cfg;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file '" + path + "'");
    return parse(in);
  }

  std::string serialize() const {
    std::string out;
    for (const auto& [k, v] : to_map()) out += k + " = " + v + "\n";
    return out;
  }

  bool operator==(const RunConfig&) const = default;
};

}  // namespace hcfusion
