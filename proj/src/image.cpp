#include "deepsnake/image.hpp"

#include <algorithm>
#include <cmath>

#include "deepsnake/error.hpp"

namespace deepsnake {

namespace {

struct BilinearStencil {
  int x0, x1, y0, y1;
  double fx, fy;
};

BilinearStencil stencil(double x, double y, int width, int height) {
  x = std::clamp(x, 0.0, static_cast<double>(width - 1));
  y = std::clamp(y, 0.0, static_cast<double>(height - 1));
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  return {x0, std::min(x0 + 1, width - 1), y0, std::min(y0 + 1, height - 1),
          x - x0, y - y0};
}

int scaled_extent(int n, double factor) {
  return std::max(1, static_cast<int>(std::lround(n * factor)));
}

}  // namespace

RasterImage::RasterImage(int width, int height, int channels, float fill)
    : width_(width), height_(height), channels_(channels) {
  if (width <= 0 || height <= 0) throw InvalidArgument("image extent must be positive");
  if (channels != 1 && channels != 3) throw InvalidArgument("image must have 1 or 3 channels");
  samples_.assign(static_cast<std::size_t>(width) * height * channels, fill);
}

float RasterImage::sample(double x, double y, int c) const {
  const auto s = stencil(x, y, width_, height_);
  const double top = (1.0 - s.fx) * at(s.x0, s.y0, c) + s.fx * at(s.x1, s.y0, c);
  const double bottom = (1.0 - s.fx) * at(s.x0, s.y1, c) + s.fx * at(s.x1, s.y1, c);
  return static_cast<float>((1.0 - s.fy) * top + s.fy * bottom);
}

void RasterImage::sample(double x, double y, std::span<float> out) const {
  const auto s = stencil(x, y, width_, height_);
  const double w00 = (1.0 - s.fx) * (1.0 - s.fy);
  const double w10 = s.fx * (1.0 - s.fy);
  const double w01 = (1.0 - s.fx) * s.fy;
  const double w11 = s.fx * s.fy;
  for (int c = 0; c < channels_; ++c) {
    out[c] = static_cast<float>(w00 * at(s.x0, s.y0, c) + w10 * at(s.x1, s.y0, c) +
                                w01 * at(s.x0, s.y1, c) + w11 * at(s.x1, s.y1, c));
  }
}

bool RasterImage::in_unit_range() const {
  return std::all_of(samples_.begin(), samples_.end(),
                     [](float v) { return v >= 0.0f && v <= 1.0f; });
}

void RasterImage::clamp_to_unit_range() {
  for (auto& v : samples_) v = std::clamp(v, 0.0f, 1.0f);
}

BinaryMask::BinaryMask(int width, int height, bool fill) : width_(width), height_(height) {
  if (width <= 0 || height <= 0) throw InvalidArgument("mask extent must be positive");
  bits_.assign(static_cast<std::size_t>(width) * height, fill ? 1 : 0);
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

SignedDistanceMap::SignedDistanceMap(int width, int height, std::vector<double> values)
    : width_(width), height_(height), values_(std::move(values)) {
  if (values_.size() != static_cast<std::size_t>(width) * height) {
    throw InvalidArgument("distance map size does not match extent");
  }
}

double SignedDistanceMap::value(double x, double y) const {
  const auto s = stencil(x, y, width_, height_);
  const double top = (1.0 - s.fx) * at(s.x0, s.y0) + s.fx * at(s.x1, s.y0);
  const double bottom = (1.0 - s.fx) * at(s.x0, s.y1) + s.fx * at(s.x1, s.y1);
  return (1.0 - s.fy) * top + s.fy * bottom;
}

bool SignedDistanceMap::in_gradient_region(Vec2 p) const {
  return p.x >= 1.0 && p.y >= 1.0 && p.x <= width_ - 2.0 && p.y <= height_ - 2.0;
}

Vec2 SignedDistanceMap::gradient(Vec2 p) const {
  if (!in_gradient_region(p)) {
    throw InvalidArgument("point outside the gradient region of the distance map");
  }
  return {0.5 * (value(p.x + 1.0, p.y) - value(p.x - 1.0, p.y)),
          0.5 * (value(p.x, p.y + 1.0) - value(p.x, p.y - 1.0))};
}

RasterImage rescale(const RasterImage& image, double factor) {
  if (factor == 1.0) return image;
  const int w = scaled_extent(image.width(), factor);
  const int h = scaled_extent(image.height(), factor);
  const double sx = static_cast<double>(image.width()) / w;
  const double sy = static_cast<double>(image.height()) / h;
  RasterImage out(w, h, image.channels());
  std::vector<float> px(image.channels());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      image.sample((x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5, px);
      for (int c = 0; c < image.channels(); ++c) out.at(x, y, c) = px[c];
    }
  }
  return out;
}

BinaryMask rescale(const BinaryMask& mask, double factor) {
  if (factor == 1.0) return mask;
  const int w = scaled_extent(mask.width(), factor);
  const int h = scaled_extent(mask.height(), factor);
  const double sx = static_cast<double>(mask.width()) / w;
  const double sy = static_cast<double>(mask.height()) / h;
  BinaryMask out(w, h);
  for (int y = 0; y < h; ++y) {
    const int src_y = std::min(mask.height() - 1, static_cast<int>((y + 0.5) * sy));
    for (int x = 0; x < w; ++x) {
      const int src_x = std::min(mask.width() - 1, static_cast<int>((x + 0.5) * sx));
      out.set(x, y, mask.at(src_x, src_y));
    }
  }
  return out;
}

RasterImage to_image(const BinaryMask& mask) {
  RasterImage out(mask.width(), mask.height(), 1);
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x) out.at(x, y) = mask.at(x, y) ? 1.0f : 0.0f;
  return out;
}

BinaryMask to_mask(const RasterImage& image) {
  BinaryMask out(image.width(), image.height());
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x) out.set(x, y, image.at(x, y, 0) >= 0.5f);
  return out;
}

}  // namespace deepsnake
