#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vclip/config.hpp"
#include "vclip/data.hpp"
#include "vclip/params.hpp"
#include "vclip/text.hpp"

namespace vclip {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ParameterStore store;
  Vocabulary vocab;
  std::vector<std::string> labels;  // training classes, index = class id
};

// <dir>/manifest.json + <dir>/weights.bin (f64 little-endian, byte offsets).
inline void save_checkpoint(const Checkpoint& ck, const fs::path& dir) {
  fs::create_directories(dir);
  std::string blob;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, e] : ck.store.entries()) {
    const std::size_t offset = blob.size();
    for (double v : e.value.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) blob.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
    tensors.push_back({{"name", name},
                       {"shape", e.value.shape()},
                       {"frozen", e.frozen},
                       {"offset", offset},
                       {"length", blob.size() - offset}});
  }
  nlohmann::json manifest = {{"format_version", kCheckpointVersion},
                             {"config", ck.config},
                             {"vocabulary", ck.vocab.tokens()},
                             {"labels", ck.labels},
                             {"tensors", tensors}};
  detail::write_file(dir / "weights.bin", blob);
  detail::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json", wpath = dir / "weights.bin";
  if (!fs::exists(mpath) || !fs::exists(wpath)) {
    throw MissingArtifact("no checkpoint at " + dir.string());
  }
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(detail::read_file(mpath));
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(std::string("checkpoint manifest: ") + e.what());
  }
  const std::string blob = detail::read_file(wpath);
  Checkpoint ck;
  try {
    if (m.at("format_version").get<int>() != kCheckpointVersion) {
      throw ManifestError("unsupported checkpoint format_version");
    }
    try {
      ck.config = m.at("config").get<ModelConfig>();
      ck.config.validate();
    } catch (const ConfigError& e) {
      throw ManifestError(std::string("checkpoint config: ") + e.what());
    }
    ck.vocab = Vocabulary::from_tokens(m.at("vocabulary").get<std::vector<std::string>>());
    ck.labels = m.at("labels").get<std::vector<std::string>>();

    std::map<std::string, Shape> layout;
    for (const auto& spec : parameter_layout(ck.config)) layout.emplace(spec.name, spec.shape);
    for (const auto& t : m.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::uint64_t>();
      const auto length = t.at("length").get<std::uint64_t>();
      auto it = layout.find(name);
      if (it == layout.end()) throw ManifestError("unexpected tensor '" + name + "'");
      if (shape != it->second || shape_numel(shape) * 8 != length) {
        throw ShapeMismatchError("tensor '" + name + "' has shape " + shape_str(shape) +
                                 ", length " + std::to_string(length) + "; expected " +
                                 shape_str(it->second));
      }
      if (offset + length > blob.size()) {
        throw TruncationError("weights.bin ends before tensor '" + name + "'");
      }
      std::vector<double> data(shape_numel(shape));
      const auto* p = reinterpret_cast<const unsigned char*>(blob.data()) + offset;
      for (std::size_t i = 0; i < data.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(p[8 * i + b]) << (8 * b);
        data[i] = std::bit_cast<double>(bits);
      }
      ck.store.add(name, Tensor(shape, std::move(data)), t.at("frozen").get<bool>());
      layout.erase(it);
    }
    if (!layout.empty()) throw ManifestError("missing tensor '" + layout.begin()->first + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(std::string("checkpoint manifest: ") + e.what());
  } catch (const ContractError& e) {
    throw ManifestError(std::string("checkpoint manifest: ") + e.what());
  }
  return ck;
}

}  // namespace vclip
