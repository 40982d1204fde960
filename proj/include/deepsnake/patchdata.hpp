#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include <json.hpp>

#include "deepsnake/geometry.hpp"
#include "deepsnake/image.hpp"
#include "deepsnake/vec2.hpp"

namespace deepsnake {

inline constexpr int kPatchSize = 64;

/// Local coordinate system of a patch. The outer normal points along the
/// patch's -v axis ("up"), so the object interior is toward the patch bottom.
struct PatchFrame {
  Vec2 center;
  /// Direction of the outer normal in image coordinates, in [-pi, pi).
  double normal_angle = 0.0;
  /// Image pixels per patch pixel.
  double scale = 1.0;
};

/// Wraps atan2 of a direction into [-pi, pi).
double normal_angle_of(Vec2 direction);

/// Rotation from patch-local to image coordinates: maps (0, -1) onto the
/// outer normal.
Vec2 local_to_world(double normal_angle, Vec2 local);
Vec2 world_to_local(double normal_angle, Vec2 world);

/// A size x size x channels crop, stored channel-major: sample (u, v, c) is at
/// index (c * size + v) * size + u.
struct Patch {
  int size = kPatchSize;
  int channels = 1;
  std::vector<float> samples;
  PatchFrame frame;

  float at(int u, int v, int c = 0) const {
    return samples[(static_cast<std::size_t>(c) * size + v) * size + u];
  }
};

struct TrainingPair {
  Patch patch;
  /// Vector from the patch centre to the nearest boundary, in patch-local
  /// coordinates and image pixels.
  Vec2 target;
};

/// Bilinear, replicate-padded sample of the image on the rotated patch grid:
/// patch pixel (u, v) sits at center + scale * R * (u - (size-1)/2, v - (size-1)/2).
Patch sample_patch(const RasterImage& image, const PatchFrame& frame, int size = kPatchSize);

/// -phi(c) * grad phi(c) at the frame centre, expressed in the patch frame.
/// Throws InvalidArgument when the centre is outside the gradient region.
Vec2 local_target_vector(const SignedDistanceMap& sdm, const PatchFrame& frame);

struct GenConfig {
  std::vector<double> scales{1.0, 0.75, 0.5};
  double level_lo = -15.0;
  double level_hi = 15.0;
  /// One sample per `spacing_divisor` pixels of level-line length.
  double spacing_divisor = 32.0;
  bool augment = false;
  double max_rotation = 0.7853981633974483;  // pi / 4
  double max_bias = 0.1;
  /// Pairs whose target endpoint lies farther than this from the zero level
  /// (sample points on a ridge of the distance map) are dropped; <= 0 keeps all.
  double max_landing_error = 0.9;
  int patch_size = kPatchSize;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const GenConfig& cfg);
GenConfig gen_config_from_json(const nlohmann::json& doc);

/// Re-samples the pair rotated by `rotation` radians with a per-channel
/// intensity bias; the target is recomputed from the distance map.
TrainingPair augment_with(const TrainingPair& pair, const RasterImage& image,
                          const SignedDistanceMap& sdm, double rotation,
                          std::span<const float> bias);

/// rotation ~ U(-max_rotation, max_rotation), bias ~ U(-max_bias, max_bias).
TrainingPair augment(const TrainingPair& pair, const RasterImage& image,
                     const SignedDistanceMap& sdm, std::mt19937_64& rng,
                     double max_rotation = 0.7853981633974483, double max_bias = 0.1);

/// Training pairs for every scale, every integer level line in the level
/// range, and ceil(L / spacing_divisor) arc-length-uniform points per line,
/// in (scale, level, curve, point) order. Throws InvalidArgument for an empty
/// mask or mismatched extents.
std::vector<TrainingPair> generate_training_set(const RasterImage& image, const BinaryMask& mask,
                                                const GenConfig& cfg, std::mt19937_64& rng);

/// Samples placed on `curve` at `count` arc-length-uniform positions starting
/// at vertex 0, with outward unit normals. Used for level lines and exposed
/// for evaluation.
struct CurveSample {
  Vec2 point;
  Vec2 normal;
};
std::vector<CurveSample> sample_along(const Curve& curve, int count);

// Persistence: <dir>/records.bin holds `count` records of little-endian f32
// patch samples (channel-major) followed by two f32 target components;
// <dir>/manifest.json carries count, channels, patch_size, seed and the
// generating config.

struct TrainingSetInfo {
  std::size_t count = 0;
  int channels = 1;
  int patch_size = kPatchSize;
  std::uint64_t seed = 0;
  nlohmann::json config = nlohmann::json::object();
};

void write_training_set(const std::filesystem::path& dir, std::span<const TrainingPair> pairs,
                        const TrainingSetInfo& info);
std::vector<TrainingPair> read_training_set(const std::filesystem::path& dir,
                                            TrainingSetInfo* info = nullptr);

}  // namespace deepsnake
