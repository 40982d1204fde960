#include "deepsnake/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "deepsnake/error.hpp"
#include "deepsnake/image_io.hpp"
#include "deepsnake/vec2.hpp"

namespace deepsnake {

namespace {

constexpr double kPi = std::numbers::pi;

// Smooth random field: a few random plane waves, roughly in [-1, 1].
struct Texture {
  struct Wave {
    double kx, ky, phase, weight;
  };
  std::vector<Wave> waves;

  Texture(std::mt19937_64& rng, double min_period, double max_period) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 4; ++i) {
      const double period = min_period + (max_period - min_period) * u(rng);
      const double angle = 2 * kPi * u(rng);
      waves.push_back({2 * kPi / period * std::cos(angle), 2 * kPi / period * std::sin(angle), 2 * kPi * u(rng),
                       0.5 + 0.5 * u(rng)});
    }
    double total = 0.0;
    for (const auto& w : waves) total += w.weight;
    for (auto& w : waves) w.weight /= total;
  }

  double operator()(double x, double y) const {
    double v = 0.0;
    for (const auto& w : waves) v += w.weight * std::sin(w.kx * x + w.ky * y + w.phase);
    return v;
  }
};

double segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double t = std::clamp(dot(p - a, ab) / dot(ab, ab), 0.0, 1.0);
  return distance(p, a + t * ab);
}

bool inside_polygon(Vec2 p, const std::vector<Vec2>& poly) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Vec2 a = poly[i], b = poly[j];
    if ((a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x) in = !in;
  }
  return in;
}

BinaryMask ellipse_shape(const SynthConfig& cfg, std::mt19937_64& rng, Vec2 center) {
  std::uniform_real_distribution<double> r(cfg.min_radius, cfg.max_radius);
  std::uniform_real_distribution<double> angle(0.0, kPi);
  const double a = r(rng), b = r(rng), theta = angle(rng);
  const double c = std::cos(theta), s = std::sin(theta);
  BinaryMask mask(cfg.size, cfg.size);
  for (int y = 0; y < cfg.size; ++y)
    for (int x = 0; x < cfg.size; ++x) {
      const double dx = x - center.x, dy = y - center.y;
      const double u = (c * dx + s * dy) / a, v = (-s * dx + c * dy) / b;
      mask.set(x, y, u * u + v * v <= 1.0);
    }
  return mask;
}

// Convex core polygon grown by a corner radius (Minkowski sum with a disk).
BinaryMask rounded_polygon_shape(const SynthConfig& cfg, std::mt19937_64& rng, Vec2 center) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int corners = 3 + static_cast<int>(u(rng) * 4.0);
  const double outer = cfg.min_radius + (cfg.max_radius - cfg.min_radius) * u(rng);
  const double rounding = 0.25 * outer * (0.5 + u(rng));
  const double core = outer - rounding;
  const double start = 2 * kPi * u(rng);
  std::vector<Vec2> poly;
  for (int i = 0; i < corners; ++i) {
    const double t = start + 2 * kPi * (i + 0.35 * (u(rng) - 0.5)) / corners;
    const double rad = core * (0.75 + 0.25 * u(rng));
    poly.push_back({center.x + rad * std::cos(t), center.y + rad * std::sin(t)});
  }
  BinaryMask mask(cfg.size, cfg.size);
  for (int y = 0; y < cfg.size; ++y)
    for (int x = 0; x < cfg.size; ++x) {
      const Vec2 p{double(x), double(y)};
      bool in = inside_polygon(p, poly);
      for (std::size_t i = 0; !in && i < poly.size(); ++i)
        in = segment_distance(p, poly[i], poly[(i + 1) % poly.size()]) <= rounding;
      mask.set(x, y, in);
    }
  return mask;
}

}  // namespace

void SynthConfig::validate() const {
  if (size < 32) throw InvalidArgument("synthetic image size must be at least 32");
  if (count < 1) throw InvalidArgument("synthetic corpus count must be positive");
  if (!(min_radius >= 4.0 && max_radius >= min_radius)) throw InvalidArgument("invalid synthetic radius range");
  if (2.0 * max_radius + 8.0 > size) throw InvalidArgument("synthetic shapes do not fit into the image");
  if (!(min_contrast > 0.0 && min_contrast < 0.8)) throw InvalidArgument("min_contrast must lie in (0, 0.8)");
  if (texture_amplitude < 0.0 || gradient_amplitude < 0.0 || noise_sigma < 0.0) {
    throw InvalidArgument("synthetic intensity parameters must be non-negative");
  }
}

nlohmann::json to_json(const SynthConfig& cfg) {
  return {{"size", cfg.size},
          {"count", cfg.count},
          {"seed", cfg.seed},
          {"min_radius", cfg.min_radius},
          {"max_radius", cfg.max_radius},
          {"min_contrast", cfg.min_contrast},
          {"texture_amplitude", cfg.texture_amplitude},
          {"gradient_amplitude", cfg.gradient_amplitude},
          {"noise_sigma", cfg.noise_sigma}};
}

SynthConfig synth_config_from_json(const nlohmann::json& doc, SynthConfig cfg) {
  if (!doc.is_object()) throw FormatError("synthetic config must be a JSON object");
  try {
    if (doc.contains("size")) cfg.size = doc.at("size").get<int>();
    if (doc.contains("count")) cfg.count = doc.at("count").get<int>();
    if (doc.contains("seed")) cfg.seed = doc.at("seed").get<std::uint64_t>();
    if (doc.contains("min_radius")) cfg.min_radius = doc.at("min_radius").get<double>();
    if (doc.contains("max_radius")) cfg.max_radius = doc.at("max_radius").get<double>();
    if (doc.contains("min_contrast")) cfg.min_contrast = doc.at("min_contrast").get<double>();
    if (doc.contains("texture_amplitude")) cfg.texture_amplitude = doc.at("texture_amplitude").get<double>();
    if (doc.contains("gradient_amplitude")) cfg.gradient_amplitude = doc.at("gradient_amplitude").get<double>();
    if (doc.contains("noise_sigma")) cfg.noise_sigma = doc.at("noise_sigma").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid synthetic config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

SynthSample synth_sample(const SynthConfig& cfg, int index) {
  cfg.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(index), 0x5eedu};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  const double margin = cfg.max_radius + 4.0;
  const double span = cfg.size - 2.0 * margin;
  const Vec2 center{margin + span * u(rng), margin + span * u(rng)};

  SynthSample s;
  s.kind = index % 2 == 0 ? ShapeKind::Ellipse : ShapeKind::RoundedPolygon;
  char name[32];
  std::snprintf(name, sizeof name, "synth_%04d", index);
  s.name = name;
  s.mask = s.kind == ShapeKind::Ellipse ? ellipse_shape(cfg, rng, center) : rounded_polygon_shape(cfg, rng, center);

  // Base intensities at least min_contrast apart; either may be the brighter.
  double inside = 0.0, outside = 0.0;
  do {
    inside = 0.15 + 0.7 * u(rng);
    outside = 0.15 + 0.7 * u(rng);
  } while (std::abs(inside - outside) < cfg.min_contrast);

  const Texture inner(rng, 6.0, 20.0);
  const Texture outer(rng, 8.0, 30.0);
  const double ramp_angle = 2 * kPi * u(rng);
  const Vec2 ramp{std::cos(ramp_angle), std::sin(ramp_angle)};
  std::normal_distribution<double> noise(0.0, 1.0);

  s.image = RasterImage(cfg.size, cfg.size, 1);
  for (int y = 0; y < cfg.size; ++y)
    for (int x = 0; x < cfg.size; ++x) {
      const bool in = s.mask.at(x, y);
      const double base = in ? inside : outside;
      const double tex = cfg.texture_amplitude * (in ? inner(x, y) : outer(x, y));
      const double grad = cfg.gradient_amplitude * (dot(Vec2{double(x), double(y)} - Vec2{cfg.size / 2.0, cfg.size / 2.0}, ramp) / cfg.size);
      const double v = base + tex + grad + cfg.noise_sigma * noise(rng);
      s.image.at(x, y) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  return s;
}

std::vector<SynthSample> synth_corpus(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<SynthSample> out;
  out.reserve(static_cast<std::size_t>(cfg.count));
  for (int i = 0; i < cfg.count; ++i) out.push_back(synth_sample(cfg, i));
  return out;
}

void write_corpus(const std::filesystem::path& dir, const std::vector<SynthSample>& samples,
                  const SynthConfig& cfg) {
  std::filesystem::create_directories(dir);
  nlohmann::json items = nlohmann::json::array();
  for (const auto& s : samples) {
    write_image(dir / (s.name + ".png"), s.image);
    write_mask(dir / (s.name + "_mask.png"), s.mask);
    items.push_back({{"name", s.name}, {"kind", s.kind == ShapeKind::Ellipse ? "ellipse" : "rounded_polygon"}});
  }
  std::ofstream out(dir / "corpus.json");
  if (!out) throw Error("cannot write " + (dir / "corpus.json").string());
  out << nlohmann::json{{"config", to_json(cfg)}, {"items", items}}.dump(2) << "\n";
}

std::vector<ImageMaskPair> find_pairs(const std::filesystem::path& dir, std::vector<std::string>* unmatched) {
  if (!std::filesystem::is_directory(dir)) throw InvalidArgument("not a directory: " + dir.string());
  std::vector<ImageMaskPair> pairs;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto path = entry.path();
    const std::string ext = path.extension().string();
    if (ext != ".png" && ext != ".pgm" && ext != ".ppm") continue;
    const std::string stem = path.stem().string();
    if (stem.size() > 5 && stem.ends_with("_mask")) continue;
    std::filesystem::path mask;
    for (const char* e : {".png", ".pgm", ".ppm"}) {
      const auto candidate = dir / (stem + "_mask" + e);
      if (std::filesystem::exists(candidate)) {
        mask = candidate;
        break;
      }
    }
    if (mask.empty()) {
      if (unmatched) unmatched->push_back(path.filename().string());
      continue;
    }
    pairs.push_back({stem, path, mask});
  }
  std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  if (unmatched) std::sort(unmatched->begin(), unmatched->end());
  return pairs;
}

}  // namespace deepsnake
