#include "deepsnake/patchdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "deepsnake/error.hpp"

namespace deepsnake {

static_assert(std::endian::native == std::endian::little,
              "training set and weight files assume a little-endian host");

double normal_angle_of(Vec2 direction) {
  double angle = std::atan2(direction.y, direction.x);
  if (angle >= std::numbers::pi) angle -= 2.0 * std::numbers::pi;
  return angle;
}

Vec2 local_to_world(double normal_angle, Vec2 local) {
  const double c = std::cos(normal_angle);
  const double s = std::sin(normal_angle);
  return {-local.x * s - local.y * c, local.x * c - local.y * s};
}

Vec2 world_to_local(double normal_angle, Vec2 world) {
  const double c = std::cos(normal_angle);
  const double s = std::sin(normal_angle);
  return {-s * world.x + c * world.y, -c * world.x - s * world.y};
}

Patch sample_patch(const RasterImage& image, const PatchFrame& frame, int size) {
  Patch patch;
  patch.size = size;
  patch.channels = image.channels();
  patch.frame = frame;
  patch.samples.resize(static_cast<std::size_t>(size) * size * image.channels());

  const double half = 0.5 * (size - 1);
  // Columns of the local-to-world rotation, pre-scaled.
  const Vec2 du = frame.scale * local_to_world(frame.normal_angle, {1.0, 0.0});
  const Vec2 dv = frame.scale * local_to_world(frame.normal_angle, {0.0, 1.0});
  const Vec2 origin = frame.center - half * du - half * dv;

  const std::size_t plane = static_cast<std::size_t>(size) * size;
  float px[3];
  for (int v = 0; v < size; ++v) {
    for (int u = 0; u < size; ++u) {
      const Vec2 p = origin + double(u) * du + double(v) * dv;
      image.sample(p.x, p.y, std::span<float>(px, static_cast<std::size_t>(image.channels())));
      for (int c = 0; c < image.channels(); ++c) {
        patch.samples[c * plane + static_cast<std::size_t>(v) * size + u] = px[c];
      }
    }
  }
  return patch;
}

Vec2 local_target_vector(const SignedDistanceMap& sdm, const PatchFrame& frame) {
  const Vec2 grad = sdm.gradient(frame.center);
  const Vec2 world = -sdm.value(frame.center) * grad;
  return world_to_local(frame.normal_angle, world);
}

nlohmann::json to_json(const GenConfig& cfg) {
  return {{"scales", cfg.scales},
          {"level_lo", cfg.level_lo},
          {"level_hi", cfg.level_hi},
          {"spacing_divisor", cfg.spacing_divisor},
          {"augment", cfg.augment},
          {"max_rotation", cfg.max_rotation},
          {"max_bias", cfg.max_bias},
          {"max_landing_error", cfg.max_landing_error},
          {"patch_size", cfg.patch_size},
          {"seed", cfg.seed}};
}

GenConfig gen_config_from_json(const nlohmann::json& doc) {
  GenConfig cfg;
  cfg.scales = doc.value("scales", cfg.scales);
  cfg.level_lo = doc.value("level_lo", cfg.level_lo);
  cfg.level_hi = doc.value("level_hi", cfg.level_hi);
  cfg.spacing_divisor = doc.value("spacing_divisor", cfg.spacing_divisor);
  cfg.augment = doc.value("augment", cfg.augment);
  cfg.max_rotation = doc.value("max_rotation", cfg.max_rotation);
  cfg.max_bias = doc.value("max_bias", cfg.max_bias);
  cfg.max_landing_error = doc.value("max_landing_error", cfg.max_landing_error);
  cfg.patch_size = doc.value("patch_size", cfg.patch_size);
  cfg.seed = doc.value("seed", cfg.seed);
  return cfg;
}

TrainingPair augment_with(const TrainingPair& pair, const RasterImage& image,
                          const SignedDistanceMap& sdm, double rotation,
                          std::span<const float> bias) {
  if (bias.size() != static_cast<std::size_t>(image.channels())) {
    throw InvalidArgument("augmentation bias needs one value per channel");
  }
  PatchFrame frame = pair.patch.frame;
  frame.normal_angle += rotation;
  if (frame.normal_angle >= std::numbers::pi) frame.normal_angle -= 2.0 * std::numbers::pi;
  if (frame.normal_angle < -std::numbers::pi) frame.normal_angle += 2.0 * std::numbers::pi;

  TrainingPair out;
  out.patch = sample_patch(image, frame, pair.patch.size);
  out.target = local_target_vector(sdm, frame);
  const std::size_t plane = static_cast<std::size_t>(out.patch.size) * out.patch.size;
  for (int c = 0; c < out.patch.channels; ++c) {
    auto channel = std::span(out.patch.samples).subspan(c * plane, plane);
    for (float& v : channel) v = std::clamp(v + bias[c], 0.0f, 1.0f);
  }
  return out;
}

TrainingPair augment(const TrainingPair& pair, const RasterImage& image,
                     const SignedDistanceMap& sdm, std::mt19937_64& rng, double max_rotation,
                     double max_bias) {
  std::uniform_real_distribution<double> rotation(-max_rotation, max_rotation);
  std::uniform_real_distribution<float> bias_dist(static_cast<float>(-max_bias),
                                                  static_cast<float>(max_bias));
  const double delta = rotation(rng);
  std::vector<float> bias(image.channels());
  for (float& b : bias) b = bias_dist(rng);
  return augment_with(pair, image, sdm, delta, bias);
}

std::vector<CurveSample> sample_along(const Curve& curve, int count) {
  if (count <= 0) return {};
  const double length = curve_length(curve);
  const int stride = std::max(1, static_cast<int>(std::ceil(std::max(8.0, length) / count)));
  const Curve dense = resample_uniform(curve, std::max(4, count * stride));
  const auto normals = outer_normals(dense);
  std::vector<CurveSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) * stride;
    out.push_back({dense[j], normals[j]});
  }
  return out;
}

namespace {

bool target_reaches_boundary(const SignedDistanceMap& sdm, const PatchFrame& frame, Vec2 target,
                             double tolerance) {
  if (tolerance <= 0.0) return true;
  const Vec2 end = frame.center + local_to_world(frame.normal_angle, target);
  if (end.x < 0.0 || end.y < 0.0 || end.x > sdm.width() - 1.0 || end.y > sdm.height() - 1.0) {
    return false;
  }
  return std::abs(sdm.value(end)) <= tolerance;
}

}  // namespace

std::vector<TrainingPair> generate_training_set(const RasterImage& image, const BinaryMask& mask,
                                                const GenConfig& cfg, std::mt19937_64& rng) {
  if (image.width() != mask.width() || image.height() != mask.height()) {
    throw InvalidArgument("image and mask extents differ");
  }
  if (mask.count() == 0) throw InvalidArgument("cannot generate training pairs from an empty mask");
  if (cfg.spacing_divisor <= 0.0) throw InvalidArgument("spacing divisor must be positive");

  std::vector<TrainingPair> pairs;
  for (double scale : cfg.scales) {
    const RasterImage scaled_image = rescale(image, scale);
    const BinaryMask scaled_mask = rescale(mask, scale);
    const std::size_t inside = scaled_mask.count();
    if (inside == 0 || inside == static_cast<std::size_t>(scaled_mask.width()) * scaled_mask.height()) {
      continue;
    }
    const SignedDistanceMap sdm = signed_distance_map(scaled_mask);

    for (const auto& line : extract_level_lines(sdm, cfg.level_lo, cfg.level_hi)) {
      const int count = static_cast<int>(std::ceil(curve_length(line.curve) / cfg.spacing_divisor));
      auto samples = sample_along(line.curve, count);

      // Level lines around holes enclose larger values; their curve normals
      // point toward decreasing distance and have to be flipped.
      double agreement = 0.0;
      for (const auto& s : samples)
        if (sdm.in_gradient_region(s.point)) agreement += dot(s.normal, sdm.gradient(s.point));
      const double orientation = agreement < 0.0 ? -1.0 : 1.0;

      for (const auto& s : samples) {
        if (!sdm.in_gradient_region(s.point)) continue;
        PatchFrame frame{s.point, normal_angle_of(orientation * s.normal), 1.0};
        const Vec2 target = local_target_vector(sdm, frame);
        if (!target_reaches_boundary(sdm, frame, target, cfg.max_landing_error)) continue;
        TrainingPair pair{sample_patch(scaled_image, frame, cfg.patch_size), target};
        if (cfg.augment) pair = augment(pair, scaled_image, sdm, rng, cfg.max_rotation, cfg.max_bias);
        pairs.push_back(std::move(pair));
      }
    }
  }
  return pairs;
}

namespace {

constexpr const char* kRecordsFile = "records.bin";
constexpr const char* kManifestFile = "manifest.json";
constexpr const char* kFormatName = "deepsnake-training-set";
constexpr int kFormatVersion = 1;

}  // namespace

void write_training_set(const std::filesystem::path& dir, std::span<const TrainingPair> pairs,
                        const TrainingSetInfo& info) {
  std::filesystem::create_directories(dir);
  const std::size_t patch_values =
      static_cast<std::size_t>(info.patch_size) * info.patch_size * info.channels;

  std::ofstream records(dir / kRecordsFile, std::ios::binary);
  if (!records) throw FormatError("cannot write " + (dir / kRecordsFile).string());
  std::vector<float> buffer(patch_values + 2);
  for (const auto& pair : pairs) {
    if (pair.patch.samples.size() != patch_values) {
      throw InvalidArgument("training pair does not match the manifest patch layout");
    }
    std::copy(pair.patch.samples.begin(), pair.patch.samples.end(), buffer.begin());
    buffer[patch_values] = static_cast<float>(pair.target.x);
    buffer[patch_values + 1] = static_cast<float>(pair.target.y);
    records.write(reinterpret_cast<const char*>(buffer.data()),
                  static_cast<std::streamsize>(buffer.size() * sizeof(float)));
  }

  nlohmann::json manifest = {{"format", kFormatName},
                             {"version", kFormatVersion},
                             {"count", pairs.size()},
                             {"channels", info.channels},
                             {"patch_size", info.patch_size},
                             {"seed", info.seed},
                             {"record_bytes", buffer.size() * sizeof(float)},
                             {"config", info.config}};
  std::ofstream(dir / kManifestFile) << manifest.dump(2) << '\n';
}

std::vector<TrainingPair> read_training_set(const std::filesystem::path& dir,
                                            TrainingSetInfo* info_out) {
  std::ifstream manifest_in(dir / kManifestFile);
  if (!manifest_in) throw FormatError("missing " + (dir / kManifestFile).string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(manifest_in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid training-set manifest: ") + e.what());
  }
  if (manifest.value("format", "") != kFormatName || manifest.value("version", 0) != kFormatVersion) {
    throw FormatError("unsupported training-set format in " + dir.string());
  }
  TrainingSetInfo info;
  info.count = manifest.at("count").get<std::size_t>();
  info.channels = manifest.at("channels").get<int>();
  info.patch_size = manifest.at("patch_size").get<int>();
  info.seed = manifest.value("seed", std::uint64_t{0});
  info.config = manifest.value("config", nlohmann::json::object());

  const std::size_t patch_values =
      static_cast<std::size_t>(info.patch_size) * info.patch_size * info.channels;
  std::ifstream records(dir / kRecordsFile, std::ios::binary);
  if (!records) throw FormatError("missing " + (dir / kRecordsFile).string());

  std::vector<TrainingPair> pairs(info.count);
  std::vector<float> buffer(patch_values + 2);
  for (auto& pair : pairs) {
    if (!records.read(reinterpret_cast<char*>(buffer.data()),
                      static_cast<std::streamsize>(buffer.size() * sizeof(float)))) {
      throw FormatError("training-set records are truncated");
    }
    pair.patch.size = info.patch_size;
    pair.patch.channels = info.channels;
    pair.patch.samples.assign(buffer.begin(), buffer.begin() + static_cast<long>(patch_values));
    pair.target = {buffer[patch_values], buffer[patch_values + 1]};
  }
  if (info_out) *info_out = info;
  return pairs;
}

}  // namespace deepsnake
