#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vclip/errors.hpp"
#include "vclip/rng.hpp"
#include "vclip/tensor.hpp"
#include "vclip/vision.hpp"

namespace vclip {

namespace fs = std::filesystem;

// ---- clip file format --------------------------------------------------------

inline constexpr std::array<char, 4> kClipMagic{'V', 'C', 'L', 'P'};
inline constexpr std::uint32_t kClipVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace detail

inline std::string encode_clip(const Tensor& frames) {
  if (frames.rank() != 4) throw ShapeError("clip must be T×H×W×Ch");
  std::string out(kClipMagic.begin(), kClipMagic.end());
  detail::put_u32(out, kClipVersion);
  for (std::size_t a = 0; a < 4; ++a) detail::put_u32(out, static_cast<std::uint32_t>(frames.dim(a)));
  for (double v : frames.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

inline Tensor decode_clip(const std::string& bytes) {
  constexpr std::size_t header = 4 + 4 * 5;
  if (bytes.size() < 4 || !std::equal(kClipMagic.begin(), kClipMagic.end(), bytes.begin())) {
    throw FormatError("bad clip magic");
  }
  if (bytes.size() < header) throw TruncationError("clip header truncated");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (detail::get_u32(p + 4) != kClipVersion) {
    throw FormatError("unsupported clip version " + std::to_string(detail::get_u32(p + 4)));
  }
  Shape shape;
  std::uint64_t count = 1;
  for (std::size_t a = 0; a < 4; ++a) {
    const std::uint32_t d = detail::get_u32(p + 8 + 4 * a);
    if (d == 0) throw ShapeError("clip header has a zero dimension");
    count *= d;
    if (count > (std::uint64_t{1} << 32)) throw ShapeError("clip header shape overflows");
    shape.push_back(d);
  }
  const std::uint64_t need = header + 4 * count;
  if (bytes.size() < need) throw TruncationError("clip data truncated");
  if (bytes.size() > need) throw FormatError("trailing bytes after clip data");
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    const float f = std::bit_cast<float>(detail::get_u32(p + header + 4 * i));
    if (!std::isfinite(f)) throw FormatError("non-finite value in clip");
    data[i] = f;
  }
  return Tensor(std::move(shape), std::move(data));
}

inline void write_clip(const VideoClip& clip, const fs::path& path) {
  detail::write_file(path, encode_clip(clip.frames));
}

inline VideoClip read_clip(const fs::path& path) { return {decode_clip(detail::read_file(path))}; }

// ---- dataset -----------------------------------------------------------------

struct DatasetSpec {
  std::size_t train_classes = 8;
  std::size_t zeroshot_classes = 4;
  std::size_t train_per_class = 200;
  std::size_t val_per_class = 50;
  std::size_t zeroshot_per_class = 50;
  std::size_t frames = 4;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t channels = 1;
  std::size_t sprite = 3;
  std::size_t speeds = 3;  // speed words used, from slow/medium/fast
  double noise = 0.05;
};

inline void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{{"train_classes", s.train_classes},
                     {"zeroshot_classes", s.zeroshot_classes},
                     {"train_per_class", s.train_per_class},
                     {"val_per_class", s.val_per_class},
                     {"zeroshot_per_class", s.zeroshot_per_class},
                     {"frames", s.frames},
                     {"height", s.height},
                     {"width", s.width},
                     {"channels", s.channels},
                     {"sprite", s.sprite},
                     {"speeds", s.speeds},
                     {"noise", s.noise}};
}

inline void from_json(const nlohmann::json& j, DatasetSpec& s) {
  static const std::set<std::string> known = {
      "train_classes", "zeroshot_classes", "train_per_class", "val_per_class",
      "zeroshot_per_class", "frames", "height", "width", "channels", "sprite", "speeds", "noise"};
  if (!j.is_object()) throw ConfigError("data spec must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown data spec key '" + key + "'");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("train_classes", s.train_classes);
    get("zeroshot_classes", s.zeroshot_classes);
    get("train_per_class", s.train_per_class);
    get("val_per_class", s.val_per_class);
    get("zeroshot_per_class", s.zeroshot_per_class);
    get("frames", s.frames);
    get("height", s.height);
    get("width", s.width);
    get("channels", s.channels);
    get("sprite", s.sprite);
    get("speeds", s.speeds);
    get("noise", s.noise);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad data spec value: ") + e.what());
  }
}

struct MotionClass {
  std::string label;
  std::string direction;
  std::string speed;
  int dx = 0, dy = 0;
};

struct Sample {
  VideoClip clip;
  std::size_t label = 0;  // index into Dataset::labels
  std::string file;       // relative path inside the dataset directory
};

struct Dataset {
  DatasetSpec spec;
  std::uint64_t seed = 0;
  std::vector<MotionClass> classes;  // train classes first, then zero-shot
  std::vector<Sample> train, val, zeroshot;

  std::vector<std::string> labels() const {
    std::vector<std::string> out;
    for (const auto& c : classes) out.push_back(c.label);
    return out;
  }
  std::vector<std::string> train_labels() const {
    auto all = labels();
    return {all.begin(), all.begin() + static_cast<std::ptrdiff_t>(spec.train_classes)};
  }
  std::vector<std::string> zeroshot_labels() const {
    auto all = labels();
    return {all.begin() + static_cast<std::ptrdiff_t>(spec.train_classes), all.end()};
  }
  std::vector<std::string> lexicon() const {
    std::set<std::string> words{"move"};
    for (const auto& c : classes) {
      words.insert(c.direction);
      words.insert(c.speed);
    }
    return {words.begin(), words.end()};
  }
  const std::vector<Sample>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "zeroshot") return zeroshot;
    throw ConfigError("unknown split '" + name + "'");
  }
  std::vector<Sample>& split(const std::string& name) {
    return const_cast<std::vector<Sample>&>(std::as_const(*this).split(name));
  }
};

// Direction × speed grid. Zero-shot combination i takes direction i mod 4 and
// speed (i + i/4) mod S, so every zero-shot label reuses words seen in
// training; training takes the remaining combinations direction-major.
inline std::vector<MotionClass> motion_classes(const DatasetSpec& s) {
  static const std::array<std::pair<const char*, std::pair<int, int>>, 4> dirs{
      {{"left", {-1, 0}}, {"right", {1, 0}}, {"up", {0, -1}}, {"down", {0, 1}}}};
  static const std::array<const char*, 3> speed_words{"slow", "medium", "fast"};
  if (s.speeds == 0 || s.speeds > speed_words.size()) {
    throw SpecError("speeds must be between 1 and " + std::to_string(speed_words.size()));
  }
  const std::size_t total = s.train_classes + s.zeroshot_classes;
  if (s.train_classes == 0) throw SpecError("train_classes must be positive");
  if (total > dirs.size() * s.speeds) {
    throw SpecError(std::to_string(total) + " classes exceed the " +
                    std::to_string(dirs.size() * s.speeds) + " direction x speed combinations");
  }
  auto make = [&](std::size_t d, std::size_t sp) {
    const int v = static_cast<int>(sp) + 1;
    return MotionClass{std::string("move ") + dirs[d].first + " " + speed_words[sp], dirs[d].first,
                       speed_words[sp], dirs[d].second.first * v, dirs[d].second.second * v};
  };
  std::vector<MotionClass> zs;
  std::set<std::pair<std::size_t, std::size_t>> taken;
  for (std::size_t i = 0; i < s.zeroshot_classes; ++i) {
    const std::size_t d = i % dirs.size(), sp = (i + i / dirs.size()) % s.speeds;
    if (!taken.insert({d, sp}).second) throw SpecError("zero-shot combinations collide");
    zs.push_back(make(d, sp));
  }
  std::vector<MotionClass> out;
  for (std::size_t d = 0; d < dirs.size() && out.size() < s.train_classes; ++d)
    for (std::size_t sp = 0; sp < s.speeds && out.size() < s.train_classes; ++sp)
      if (!taken.count({d, sp})) out.push_back(make(d, sp));
  out.insert(out.end(), zs.begin(), zs.end());

  // Velocities must stay distinct on the torus.
  std::set<std::pair<long, long>> seen;
  for (const auto& c : out) {
    const long H = static_cast<long>(s.height), W = static_cast<long>(s.width);
    if (!seen.insert({((c.dx % W) + W) % W, ((c.dy % H) + H) % H}).second) {
      throw SpecError("velocity of '" + c.label + "' coincides with another class on a " +
                      std::to_string(s.height) + "x" + std::to_string(s.width) + " torus");
    }
  }
  return out;
}

inline void validate(const DatasetSpec& s) {
  if (s.frames == 0 || s.height == 0 || s.width == 0 || s.channels == 0) {
    throw SpecError("clip dimensions must be positive");
  }
  if (s.sprite == 0 || s.sprite > s.height || s.sprite > s.width) {
    throw SpecError("sprite must fit inside the frame");
  }
  if (!(s.noise >= 0.0) || !std::isfinite(s.noise)) throw SpecError("noise must be finite and >= 0");
  motion_classes(s);
}

// One clip: a white square sprite starting at a uniform position, moving by
// (dx, dy) per frame with toroidal wrap, plus Gaussian pixel noise, clamped
// to [0, 1] and rounded to f32.
inline VideoClip render_clip(const DatasetSpec& s, const MotionClass& c, Rng& rng) {
  const std::size_t T = s.frames, H = s.height, W = s.width, C = s.channels;
  Tensor frames({T, H, W, C}, 0.0);
  std::uniform_int_distribution<std::size_t> ux(0, W - 1), uy(0, H - 1);
  const long x0 = static_cast<long>(ux(rng)), y0 = static_cast<long>(uy(rng));
  auto wrap = [](long v, std::size_t n) {
    const long m = static_cast<long>(n);
    return static_cast<std::size_t>(((v % m) + m) % m);
  };
  for (std::size_t t = 0; t < T; ++t) {
    const long xt = x0 + c.dx * static_cast<long>(t), yt = y0 + c.dy * static_cast<long>(t);
    for (std::size_t y = 0; y < s.sprite; ++y)
      for (std::size_t x = 0; x < s.sprite; ++x) {
        const std::size_t py = wrap(yt + static_cast<long>(y), H);
        const std::size_t px = wrap(xt + static_cast<long>(x), W);
        for (std::size_t ch = 0; ch < C; ++ch) frames[((t * H + py) * W + px) * C + ch] = 1.0;
      }
  }
  std::normal_distribution<double> noise(0.0, 1.0);
  for (auto& v : frames.data()) {
    if (s.noise > 0.0) v += s.noise * noise(rng);
    v = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return {std::move(frames)};
}

inline Dataset generate_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  validate(spec);
  Dataset ds;
  ds.spec = spec;
  ds.seed = seed;
  ds.classes = motion_classes(spec);
  auto fill = [&](std::vector<Sample>& out, const std::string& split, std::size_t first_class,
                  std::size_t n_classes, std::size_t per_class) {
    Rng rng = named_stream(seed, "data/" + split);
    for (std::size_t k = 0; k < n_classes; ++k)
      for (std::size_t i = 0; i < per_class; ++i) {
        char name[64];
        std::snprintf(name, sizeof name, "clips/%s_%05zu.vclp", split.c_str(), out.size());
        out.push_back({render_clip(spec, ds.classes[first_class + k], rng), first_class + k, name});
      }
  };
  fill(ds.train, "train", 0, spec.train_classes, spec.train_per_class);
  fill(ds.val, "val", 0, spec.train_classes, spec.val_per_class);
  fill(ds.zeroshot, "zeroshot", spec.train_classes, spec.zeroshot_classes,
       spec.zeroshot_per_class);
  return ds;
}

inline nlohmann::json dataset_manifest(const Dataset& ds) {
  nlohmann::json splits = nlohmann::json::object();
  for (const char* name : {"train", "val", "zeroshot"}) {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& s : ds.split(name)) items.push_back({{"file", s.file}, {"label", s.label}});
    splits[name] = items;
  }
  return {{"labels", ds.labels()}, {"lexicon", ds.lexicon()}, {"splits", splits},
          {"spec", ds.spec}, {"seed", ds.seed}};
}

inline void write_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir / "clips");
  for (const char* name : {"train", "val", "zeroshot"})
    for (const auto& s : ds.split(name)) write_clip(s.clip, dir / s.file);
  detail::write_file(dir / "manifest.json", dataset_manifest(ds).dump(2) + "\n");
}

inline Dataset load_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw MissingArtifact("no dataset manifest at " + mpath.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(detail::read_file(mpath));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset manifest: ") + e.what());
  }
  Dataset ds;
  try {
    ds.spec = m.at("spec").get<DatasetSpec>();
    ds.seed = m.at("seed").get<std::uint64_t>();
    ds.classes = motion_classes(ds.spec);
    if (m.at("labels").get<std::vector<std::string>>() != ds.labels()) {
      throw FormatError("dataset manifest labels do not match its spec");
    }
    for (const char* name : {"train", "val", "zeroshot"}) {
      auto& out = ds.split(name);
      for (const auto& item : m.at("splits").at(name)) {
        Sample s;
        s.file = item.at("file").get<std::string>();
        s.label = item.at("label").get<std::size_t>();
        if (s.label >= ds.classes.size()) throw FormatError("sample label out of range");
        s.clip = read_clip(dir / s.file);
        out.push_back(std::move(s));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("dataset manifest: ") + e.what());
  }
  return ds;
}

}  // namespace vclip
