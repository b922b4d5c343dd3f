#pragma once

// Synthetic "organ" segmentation dataset: random non-overlapping ellipses on a
// noisy background, one intensity band per class, stored as binary PGM files
// next to a JSON manifest.
//
//   <dir>/manifest.json
//   <dir>/images/<id>.pgm   8-bit intensities, value / 255 on load
//   <dir>/masks/<id>.pgm    raw label bytes

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cscde/errors.hpp"
#include "cscde/rng.hpp"
#include "cscde/tensor.hpp"

namespace cscde {

// ---------------------------------------------------------------------------
// PGM (P5, maxval <= 255)

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

inline void write_pgm(std::ostream& os, const GrayImage& img) {
  if (img.pixels.size() != img.width * img.height) {
    throw ShapeError("write_pgm: pixel count does not match " + std::to_string(img.width) + "x" +
                     std::to_string(img.height));
  }
  os << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw DataError("write_pgm: write failed");
}

inline GrayImage parse_pgm(const std::string& bytes) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& msg) -> FormatError { return FormatError("PGM: " + msg, pos); };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    if (pos >= bytes.size()) throw fail(std::string("unexpected end of header reading ") + what);
    if (!std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      throw fail(std::string("expected ") + what);
    }
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 24)) throw fail(std::string(what) + " too large");
      ++pos;
    }
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw fail("missing P5 magic");
  pos = 2;
  GrayImage img;
  img.width = number("width");
  img.height = number("height");
  const std::size_t maxval = number("maxval");
  if (img.width == 0 || img.height == 0) throw fail("zero image dimension");
  if (maxval == 0 || maxval > 255) throw fail("maxval must be in 1..255");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw fail("expected a single whitespace byte after maxval");
  }
  ++pos;
  const std::size_t n = img.width * img.height;
  if (bytes.size() - pos < n) {
    pos = bytes.size();
    throw fail("truncated raster: expected " + std::to_string(n) + " bytes");
  }
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot open " + p.string());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

inline GrayImage read_pgm(const std::filesystem::path& p) { return parse_pgm(read_file(p)); }

inline void write_pgm(const std::filesystem::path& p, const GrayImage& img) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot write " + p.string());
  write_pgm(os, img);
}

// ---------------------------------------------------------------------------
// Cases

/// One image (values k/255) and its label mask, both (1,1,h,w).
struct Case {
  std::string id;
  Tensor<float> image;
  LabelMap mask;
};

inline float dequantize(std::uint8_t v) { return static_cast<float>(v) / 255.0f; }

inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline void save_case(const Case& c, const std::filesystem::path& image_path,
                      const std::filesystem::path& mask_path) {
  GrayImage img{c.image.w(), c.image.h(), {}}, msk{c.mask.w(), c.mask.h(), c.mask.vec()};
  img.pixels.reserve(c.image.size());
  for (float v : c.image.vec()) img.pixels.push_back(quantize(v));
  write_pgm(image_path, img);
  write_pgm(mask_path, msk);
}

/// Labels are checked against `n_classes` when it is given.
inline Case load_case(const std::string& id, const std::filesystem::path& image_path,
                      const std::filesystem::path& mask_path,
                      std::optional<std::size_t> n_classes = {}) {
  const GrayImage img = read_pgm(image_path);
  const GrayImage msk = read_pgm(mask_path);
  if (img.width != msk.width || img.height != msk.height) {
    throw DataError("case " + id + ": image and mask sizes differ");
  }
  Case c{id, Tensor<float>(Shape{1, 1, img.height, img.width}),
         LabelMap(Shape{1, 1, img.height, img.width}, msk.pixels)};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) c.image[i] = dequantize(img.pixels[i]);
  if (n_classes) {
    for (auto v : c.mask.vec()) {
      if (v >= *n_classes) {
        throw DataError("case " + id + ": label " + std::to_string(v) + " >= n_classes " +
                        std::to_string(*n_classes));
      }
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Generator

struct GeneratorConfig {
  std::uint64_t seed = 42;
  std::size_t n_cases = 200;
  std::size_t size = 96;
  std::size_t n_classes = 4;
  double noise_sigma = 0.08;
  double train_fraction = 0.8;

  void validate() const {
    if (size == 0 || size % 8 != 0) {
      throw ConfigError("--size must be a positive multiple of 8, got " + std::to_string(size));
    }
    if (n_classes < 2 || n_classes > 255) throw ConfigError("--classes must be in 2..255");
    if (n_cases == 0) throw ConfigError("--cases must be positive");
    if (!(noise_sigma >= 0)) throw ConfigError("--noise must be non-negative");
    if (!(train_fraction > 0 && train_fraction <= 1)) {
      throw ConfigError("train fraction must be in (0, 1]");
    }
  }
  std::size_t n_train() const {
    return std::min(n_cases, static_cast<std::size_t>(std::lround(train_fraction * n_cases)));
  }
};

struct Manifest {
  int version = 1;
  std::size_t n_classes = 0;
  std::size_t image_size = 0;
  std::vector<std::string> train, val;
  GeneratorConfig generator;
};

inline void to_json(nlohmann::json& j, const Manifest& m) {
  j = nlohmann::json{{"version", m.version},
                     {"n_classes", m.n_classes},
                     {"image_size", m.image_size},
                     {"splits", {{"train", m.train}, {"val", m.val}}},
                     {"generator",
                      {{"seed", m.generator.seed},
                       {"n_cases", m.generator.n_cases},
                       {"size", m.generator.size},
                       {"n_classes", m.generator.n_classes},
                       {"noise_sigma", m.generator.noise_sigma},
                       {"train_fraction", m.generator.train_fraction}}}};
}

inline void from_json(const nlohmann::json& j, Manifest& m) {
  m.version = j.at("version").get<int>();
  m.n_classes = j.at("n_classes").get<std::size_t>();
  m.image_size = j.at("image_size").get<std::size_t>();
  m.train = j.at("splits").at("train").get<std::vector<std::string>>();
  m.val = j.at("splits").at("val").get<std::vector<std::string>>();
  if (j.contains("generator")) {
    const auto& g = j.at("generator");
    m.generator.seed = g.value("seed", m.generator.seed);
    m.generator.n_cases = g.value("n_cases", m.generator.n_cases);
    m.generator.size = g.value("size", m.generator.size);
    m.generator.n_classes = g.value("n_classes", m.generator.n_classes);
    m.generator.noise_sigma = g.value("noise_sigma", m.generator.noise_sigma);
    m.generator.train_fraction = g.value("train_fraction", m.generator.train_fraction);
  }
}

inline std::string case_id(std::size_t i) {
  std::ostringstream os;
  os << "case_" << std::setw(4) << std::setfill('0') << i;
  return os.str();
}

namespace detail {

struct Ellipse {
  double cy, cx, a, b, theta;
  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double u = dx * std::cos(theta) + dy * std::sin(theta);
    const double v = -dx * std::sin(theta) + dy * std::cos(theta);
    return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
  }
};

}  // namespace detail

/// Intensity band centre of a class: (c + 0.5) / K. Each case jitters every
/// class level by less than a sixth of the band spacing.
inline double class_level(std::size_t cls, std::size_t n_classes) {
  return (static_cast<double>(cls) + 0.5) / static_cast<double>(n_classes);
}

/// Draws case `index`. Classes in `required` always get an ellipse; the rest
/// of the foreground classes are included at random (at least one overall).
inline Case generate_case(const GeneratorConfig& cfg, std::size_t index,
                          const std::vector<std::size_t>& required = {}) {
  SplitMix64 rng = make_stream(cfg.seed, Stream::Data, index);
  const std::size_t S = cfg.size, K = cfg.n_classes;
  std::vector<std::size_t> classes(required);
  for (std::size_t k = 1; k < K; ++k) {
    if (std::find(classes.begin(), classes.end(), k) == classes.end() && rng.coin(0.7)) {
      classes.push_back(k);
    }
  }
  if (classes.empty()) classes.push_back(1 + rng.below(K - 1));
  std::sort(classes.begin(), classes.end());

  Case c{case_id(index), Tensor<float>(Shape{1, 1, S, S}), LabelMap(Shape{1, 1, S, S})};
  // Occupancy includes a one-pixel halo so ellipses never touch.
  std::vector<std::uint8_t> occupied(S * S, 0);
  const double sz = static_cast<double>(S);
  for (std::size_t cls : classes) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      detail::Ellipse e{rng.uniform(0.15, 0.85) * sz, rng.uniform(0.15, 0.85) * sz,
                        rng.uniform(0.07, 0.18) * sz, rng.uniform(0.07, 0.18) * sz,
                        rng.uniform(0.0, 3.141592653589793)};
      std::vector<std::size_t> pix;
      bool clash = false;
      for (std::size_t y = 0; y < S && !clash; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          if (!e.contains(static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5)) continue;
          if (occupied[y * S + x]) {
            clash = true;
            break;
          }
          pix.push_back(y * S + x);
        }
      if (clash || pix.size() < 16) continue;
      for (std::size_t i : pix) {
        c.mask[i] = static_cast<std::uint8_t>(cls);
        const long y = static_cast<long>(i / S), x = static_cast<long>(i % S);
        for (long dy = -1; dy <= 1; ++dy)
          for (long dx = -1; dx <= 1; ++dx) {
            const long yy = y + dy, xx = x + dx;
            if (yy >= 0 && xx >= 0 && yy < static_cast<long>(S) && xx < static_cast<long>(S)) {
              occupied[static_cast<std::size_t>(yy) * S + static_cast<std::size_t>(xx)] = 1;
            }
          }
      }
      break;
    }
  }

  const double jitter = 1.0 / (6.0 * static_cast<double>(K));
  std::vector<double> level(K);
  for (std::size_t k = 0; k < K; ++k) level[k] = class_level(k, K) + rng.uniform(-jitter, jitter);
  for (std::size_t i = 0; i < S * S; ++i) {
    double v = level[c.mask[i]];
    if (cfg.noise_sigma > 0) v += cfg.noise_sigma * rng.normal();
    c.image[i] = dequantize(quantize(v));
  }
  return c;
}

struct Dataset {
  Manifest manifest;
  std::vector<Case> train, val;
};

/// Builds the whole dataset in memory. The first K-1 training cases are forced
/// to contain class 1, 2, ... respectively, so no foreground class is missing
/// from the training split.
inline Dataset generate(const GeneratorConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.manifest.n_classes = cfg.n_classes;
  ds.manifest.image_size = cfg.size;
  ds.manifest.generator = cfg;
  const std::size_t n_train = cfg.n_train();
  for (std::size_t i = 0; i < cfg.n_cases; ++i) {
    std::vector<std::size_t> required;
    if (i < n_train && i + 1 < cfg.n_classes) required.push_back(i + 1);
    Case c = generate_case(cfg, i, required);
    if (i < n_train) {
      ds.manifest.train.push_back(c.id);
      ds.train.push_back(std::move(c));
    } else {
      ds.manifest.val.push_back(c.id);
      ds.val.push_back(std::move(c));
    }
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  fs::create_directories(dir / "masks", ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  for (const auto* split : {&ds.train, &ds.val}) {
    for (const Case& c : *split) {
      save_case(c, dir / "images" / (c.id + ".pgm"), dir / "masks" / (c.id + ".pgm"));
    }
  }
  std::ofstream os(dir / "manifest.json", std::ios::binary);
  if (!os) throw DataError("cannot write manifest in " + dir.string());
  os << nlohmann::json(ds.manifest).dump(2) << '\n';
}

inline Manifest load_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw DataError("no dataset manifest at " + path.string());
  Manifest m;
  try {
    m = nlohmann::json::parse(read_file(path)).get<Manifest>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
  std::set<std::string> seen(m.train.begin(), m.train.end());
  for (const auto& id : m.val) {
    if (seen.count(id)) throw DataError("case " + id + " is in both train and val splits");
  }
  return m;
}

/// Loads the splits listed in the manifest, validating every label.
inline Dataset load_dataset(const std::filesystem::path& dir, bool train = true, bool val = true) {
  Dataset ds;
  ds.manifest = load_manifest(dir);
  auto load = [&](const std::vector<std::string>& ids, std::vector<Case>& out) {
    for (const auto& id : ids) {
      out.push_back(load_case(id, dir / "images" / (id + ".pgm"), dir / "masks" / (id + ".pgm"),
                              ds.manifest.n_classes));
      if (out.back().image.h() != ds.manifest.image_size ||
          out.back().image.w() != ds.manifest.image_size) {
        throw DataError("case " + id + " does not match the manifest image size");
      }
    }
  };
  if (train) load(ds.manifest.train, ds.train);
  if (val) load(ds.manifest.val, ds.val);
  return ds;
}

}  // namespace cscde
