#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepsnake/image.hpp"
#include "deepsnake/vec2.hpp"

namespace deepsnake {

/// Closed polyline with at least four vertices. The last vertex connects back
/// to the first.
///
/// Orientation: in image coordinates (y down) every Curve has a non-positive
/// shoelace area, which is a counterclockwise traversal as seen on screen.
/// The constructor reverses the vertex order when the input runs the other
/// way. With this orientation the outer normal of a tangent t is (-t.y, t.x).
class Curve {
 public:
  static constexpr double kMinSegmentLength = 1e-9;

  /// Throws InvalidArgument for fewer than 4 vertices, non-finite
  /// coordinates or coincident consecutive vertices.
  explicit Curve(std::vector<Vec2> vertices);

  std::size_t size() const { return vertices_.size(); }
  const Vec2& operator[](std::size_t i) const { return vertices_[i]; }
  std::span<const Vec2> vertices() const { return vertices_; }

  /// Vertex i modulo size(), accepting negative indices.
  const Vec2& wrapped(long i) const;

 private:
  std::vector<Vec2> vertices_;
};

/// Shoelace area; negative for the canonical orientation.
double signed_area(std::span<const Vec2> polygon);

double curve_length(const Curve& curve);

/// Arc length from vertex 0 to each vertex (first entry 0).
std::vector<double> cumulative_arc_length(const Curve& curve);

struct BoundingBox {
  Vec2 min;
  Vec2 max;
  double width() const { return max.x - min.x; }
  double height() const { return max.y - min.y; }
};
BoundingBox bounding_box(const Curve& curve);

/// Vertex average.
Vec2 centroid(const Curve& curve);

/// `count` vertices spaced L/count apart along the polyline, starting at the
/// input's first vertex. Requires count >= 4.
Curve resample_uniform(const Curve& curve, int count);

/// Unit outer normals from the central difference of the neighbouring
/// vertices, one per vertex.
std::vector<Vec2> outer_normals(const Curve& curve);

/// Exact Euclidean signed distance map. A pixel's distance is measured
/// between pixel centres to the nearest pixel of the opposite label, then
/// shifted by half a pixel so the zero level runs between inside and outside
/// centres. Throws InvalidArgument for an empty or full mask.
SignedDistanceMap signed_distance_map(const BinaryMask& mask);

struct LevelLine {
  double level = 0.0;
  Curve curve;
};

/// Closed iso-contours at every integer level in [lo, hi], traced by marching
/// squares with linear interpolation. Saddle cells are split using the cell
/// average. Chains that leave the image are dropped.
std::vector<LevelLine> extract_level_lines(const SignedDistanceMap& sdm, double lo, double hi);

/// Even-odd fill sampled at pixel centres. A centre exactly on an edge is
/// inside when the edge is a left or top edge of the region (half-open).
BinaryMask rasterize(const Curve& curve, int width, int height);

/// {"vertices": [[x, y], ...], "closed": true}
nlohmann::json curve_to_json(const Curve& curve);
/// Throws FormatError for malformed documents, InvalidArgument for
/// geometrically invalid curves.
Curve curve_from_json(const nlohmann::json& doc);

}  // namespace deepsnake
