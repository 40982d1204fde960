#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepsnake/image.hpp"

namespace deepsnake {

enum class ShapeKind { Ellipse, RoundedPolygon };

struct SynthConfig {
  int size = 128;
  int count = 60;
  std::uint64_t seed = 0;
  /// Object extent: ellipse semi-axes and polygon radii are drawn from this range.
  double min_radius = 15.0;
  double max_radius = 45.0;
  /// Smallest difference between the object and background base intensities.
  double min_contrast = 0.25;
  double texture_amplitude = 0.08;
  /// Peak-to-peak intensity ramp across the image.
  double gradient_amplitude = 0.15;
  double noise_sigma = 0.04;

  void validate() const;
};

nlohmann::json to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const nlohmann::json& doc, SynthConfig base = {});

struct SynthSample {
  std::string name;
  ShapeKind kind;
  RasterImage image;  // single channel
  BinaryMask mask;
};

/// Sample `index` of the corpus; depends only on (cfg, index). Even indices
/// are ellipses, odd ones rounded polygons.
SynthSample synth_sample(const SynthConfig& cfg, int index);

std::vector<SynthSample> synth_corpus(const SynthConfig& cfg);

/// Writes <name>.png and <name>_mask.png per sample and corpus.json.
void write_corpus(const std::filesystem::path& dir, const std::vector<SynthSample>& samples,
                  const SynthConfig& cfg);

struct ImageMaskPair {
  std::string name;
  std::filesystem::path image;
  std::filesystem::path mask;
};

/// Image files in `dir` with a sibling <stem>_mask.<ext>, sorted by name.
/// Images without a mask are reported in `unmatched` when it is given.
std::vector<ImageMaskPair> find_pairs(const std::filesystem::path& dir,
                                      std::vector<std::string>* unmatched = nullptr);

}  // namespace deepsnake
