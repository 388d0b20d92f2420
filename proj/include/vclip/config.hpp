#pragma once

#include <cmath>
#include <cstddef>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "vclip/errors.hpp"

namespace vclip {

enum class TextMode { Unified, ClassSpecific };

inline std::string to_string(TextMode m) { return m == TextMode::Unified ? "UC" : "CSC"; }

inline TextMode parse_text_mode(const std::string& s) {
  if (s == "UC") return TextMode::Unified;
  if (s == "CSC") return TextMode::ClassSpecific;
  throw ConfigError("text_mode must be UC or CSC, got '" + s + "'");
}

// Shapes of both encoders plus the prompt switches.
struct ModelConfig {
  std::size_t frames = 4;  // T
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t channels = 1;
  std::size_t patch = 8;
  std::size_t vision_width = 32;  // D
  std::size_t embed_dim = 32;     // D', the joint space
  std::size_t vision_layers = 2;
  std::size_t vision_heads = 4;
  std::size_t text_width = 32;
  std::size_t text_layers = 1;
  std::size_t text_heads = 4;
  std::size_t context_length = 16;
  std::size_t vocab_size = 32;
  std::size_t global_prompts = 4;  // M_v
  std::size_t text_contexts = 8;   // M_c
  std::size_t num_classes = 8;     // N_c
  TextMode text_mode = TextMode::ClassSpecific;
  bool enable_summary = true;
  bool enable_local = true;
  bool enable_global = true;
  // Nonstandard: append all T summary tokens to every frame instead of only
  // the frame's own one.
  bool summary_all_frames = false;
  double logit_scale_init = std::log(1.0 / 0.07);

  std::size_t patches_per_frame() const { return (height / patch) * (width / patch); }
  std::size_t patch_dim() const { return channels * patch * patch; }
  std::size_t global_count() const { return enable_global ? global_prompts : 0; }
  std::size_t local_count() const { return enable_local ? frames : 0; }
  std::size_t summary_count() const {
    return enable_summary ? (summary_all_frames ? frames : 1) : 0;
  }
  // Positions seen by the frozen attention of every vision layer.
  std::size_t augmented_length() const {
    return 1 + patches_per_frame() + summary_count() + global_count() + local_count();
  }
  std::size_t context_sets() const {
    return text_mode == TextMode::ClassSpecific ? num_classes : 1;
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* what) {
      if (v == 0) throw ConfigError(std::string(what) + " must be positive");
    };
    positive(frames, "frames");
    positive(height, "height");
    positive(width, "width");
    positive(channels, "channels");
    positive(patch, "patch");
    positive(vision_width, "vision_width");
    positive(embed_dim, "embed_dim");
    positive(vision_layers, "vision_layers");
    positive(vision_heads, "vision_heads");
    positive(text_width, "text_width");
    positive(text_layers, "text_layers");
    positive(text_heads, "text_heads");
    positive(context_length, "context_length");
    positive(num_classes, "num_classes");
    if (vocab_size < 4) throw ConfigError("vocab_size must cover the reserved tokens");
    if ((height * width) % (patch * patch) != 0 || height % patch != 0 || width % patch != 0) {
      throw ConfigError("frame " + std::to_string(height) + "x" + std::to_string(width) +
                        " is not divisible into " + std::to_string(patch) + "px patches");
    }
    if (vision_width % vision_heads != 0) {
      throw ConfigError("vision_width must be divisible by vision_heads");
    }
    if (text_width % text_heads != 0) throw ConfigError("text_width must be divisible by text_heads");
    if (enable_global && global_prompts == 0) {
      throw ConfigError("enable_global requires global_prompts > 0");
    }
    // At least one label token plus the readout slot must fit.
    if (text_contexts + 2 > context_length) {
      throw ConfigError("text_contexts + label + readout exceed context_length");
    }
    if (!std::isfinite(logit_scale_init)) throw ConfigError("logit_scale_init must be finite");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"frames", c.frames},
                     {"height", c.height},
                     {"width", c.width},
                     {"channels", c.channels},
                     {"patch", c.patch},
                     {"vision_width", c.vision_width},
                     {"embed_dim", c.embed_dim},
                     {"vision_layers", c.vision_layers},
                     {"vision_heads", c.vision_heads},
                     {"text_width", c.text_width},
                     {"text_layers", c.text_layers},
                     {"text_heads", c.text_heads},
                     {"context_length", c.context_length},
                     {"vocab_size", c.vocab_size},
                     {"global_prompts", c.global_prompts},
                     {"text_contexts", c.text_contexts},
                     {"num_classes", c.num_classes},
                     {"text_mode", to_string(c.text_mode)},
                     {"enable_summary", c.enable_summary},
                     {"enable_local", c.enable_local},
                     {"enable_global", c.enable_global},
                     {"summary_all_frames", c.summary_all_frames},
                     {"logit_scale_init", c.logit_scale_init}};
}

// Reads the keys present in `j` over the defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const std::set<std::string> known = {
      "frames", "height", "width", "channels", "patch", "vision_width", "embed_dim",
      "vision_layers", "vision_heads", "text_width", "text_layers", "text_heads",
      "context_length", "vocab_size", "global_prompts", "text_contexts", "num_classes",
      "text_mode", "enable_summary", "enable_local", "enable_global", "summary_all_frames",
      "logit_scale_init"};
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown model config key '" + key + "'");
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("frames", c.frames);
    get("height", c.height);
    get("width", c.width);
    get("channels", c.channels);
    get("patch", c.patch);
    get("vision_width", c.vision_width);
    get("embed_dim", c.embed_dim);
    get("vision_layers", c.vision_layers);
    get("vision_heads", c.vision_heads);
    get("text_width", c.text_width);
    get("text_layers", c.text_layers);
    get("text_heads", c.text_heads);
    get("context_length", c.context_length);
    get("vocab_size", c.vocab_size);
    get("global_prompts", c.global_prompts);
    get("text_contexts", c.text_contexts);
    get("num_classes", c.num_classes);
    if (j.contains("text_mode")) c.text_mode = parse_text_mode(j.at("text_mode").get<std::string>());
    get("enable_summary", c.enable_summary);
    get("enable_local", c.enable_local);
    get("enable_global", c.enable_global);
    get("summary_all_frames", c.summary_all_frames);
    get("logit_scale_init", c.logit_scale_init);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config value: ") + e.what());
  }
}

}  // namespace vclip
