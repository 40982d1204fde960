#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "deepsnake/vec2.hpp"

namespace deepsnake {

/// Row-major, channel-interleaved image with samples in [0, 1]. Pixel
/// (x, y) has its center at integer coordinates (x, y).
class RasterImage {
 public:
  RasterImage() = default;
  RasterImage(int width, int height, int channels, float fill = 0.0f);

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  bool empty() const { return samples_.empty(); }

  float at(int x, int y, int c = 0) const { return samples_[index(x, y, c)]; }
  float& at(int x, int y, int c = 0) { return samples_[index(x, y, c)]; }

  std::span<const float> samples() const { return samples_; }
  std::span<float> samples() { return samples_; }

  /// Bilinear interpolation with clamp-to-edge padding.
  float sample(double x, double y, int c = 0) const;
  /// All channels at once; `out.size()` must equal channels().
  void sample(double x, double y, std::span<float> out) const;

  /// True when every sample lies in [0, 1].
  bool in_unit_range() const;
  void clamp_to_unit_range();

 private:
  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<float> samples_;
};

/// Per-pixel inside/outside labels.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int width, int height, bool fill = false);

  int width() const { return width_; }
  int height() const { return height_; }

  bool at(int x, int y) const { return bits_[index(x, y)] != 0; }
  void set(int x, int y, bool inside) { bits_[index(x, y)] = inside ? 1 : 0; }
  bool contains(int x, int y) const {
    return x >= 0 && y >= 0 && x < width_ && y < height_;
  }

  std::size_t count() const;
  std::span<const std::uint8_t> bits() const { return bits_; }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * width_ + x;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// Signed Euclidean distance to a mask boundary: negative inside, positive
/// outside, zero half-way between an inside and an outside pixel.
class SignedDistanceMap {
 public:
  SignedDistanceMap() = default;
  SignedDistanceMap(int width, int height, std::vector<double> values);

  int width() const { return width_; }
  int height() const { return height_; }
  double at(int x, int y) const { return values_[static_cast<std::size_t>(y) * width_ + x]; }
  std::span<const double> values() const { return values_; }

  /// Bilinear interpolation with clamp-to-edge padding.
  double value(double x, double y) const;
  double value(Vec2 p) const { return value(p.x, p.y); }

  /// Central difference (step 1 px) of the bilinear interpolant. Requires
  /// p inside [1, width-2] x [1, height-2]; throws InvalidArgument otherwise.
  Vec2 gradient(Vec2 p) const;
  bool in_gradient_region(Vec2 p) const;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<double> values_;
};

/// Bilinear rescale of an image to round(width * factor) x round(height * factor).
RasterImage rescale(const RasterImage& image, double factor);
/// Nearest-neighbour rescale of a mask, same output extent rule as above.
BinaryMask rescale(const BinaryMask& mask, double factor);

/// Single-channel copy of a mask (inside = 1, outside = 0).
RasterImage to_image(const BinaryMask& mask);
/// Thresholds channel 0 at 0.5.
BinaryMask to_mask(const RasterImage& image);

}  // namespace deepsnake
