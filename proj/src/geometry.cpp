#include "deepsnake/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <unordered_map>

#include "deepsnake/error.hpp"

namespace deepsnake {

Curve::Curve(std::vector<Vec2> vertices) : vertices_(std::move(vertices)) {
  if (vertices_.size() < 4) throw InvalidArgument("curve needs at least 4 vertices");
  for (std::size_t i = 0; i < vertices_.size(); ++i) {
    const Vec2 a = vertices_[i];
    const Vec2 b = vertices_[(i + 1) % vertices_.size()];
    if (!std::isfinite(a.x) || !std::isfinite(a.y)) {
      throw InvalidArgument("curve vertex is not finite");
    }
    if (distance(a, b) <= kMinSegmentLength) {
      throw InvalidArgument("curve has coincident consecutive vertices at index " +
                            std::to_string(i));
    }
  }
  if (signed_area(vertices_) > 0.0) std::reverse(vertices_.begin(), vertices_.end());
}

const Vec2& Curve::wrapped(long i) const {
  const long n = static_cast<long>(vertices_.size());
  return vertices_[static_cast<std::size_t>(((i % n) + n) % n)];
}

double signed_area(std::span<const Vec2> polygon) {
  double twice = 0.0;
  for (std::size_t i = 0; i < polygon.size(); ++i) {
    twice += cross(polygon[i], polygon[(i + 1) % polygon.size()]);
  }
  return 0.5 * twice;
}

double curve_length(const Curve& curve) {
  double total = 0.0;
  for (std::size_t i = 0; i < curve.size(); ++i) total += distance(curve[i], curve.wrapped(i + 1));
  return total;
}

std::vector<double> cumulative_arc_length(const Curve& curve) {
  std::vector<double> s(curve.size(), 0.0);
  for (std::size_t i = 1; i < curve.size(); ++i) s[i] = s[i - 1] + distance(curve[i - 1], curve[i]);
  return s;
}

BoundingBox bounding_box(const Curve& curve) {
  BoundingBox box{curve[0], curve[0]};
  for (const Vec2& p : curve.vertices()) {
    box.min = {std::min(box.min.x, p.x), std::min(box.min.y, p.y)};
    box.max = {std::max(box.max.x, p.x), std::max(box.max.y, p.y)};
  }
  return box;
}

Vec2 centroid(const Curve& curve) {
  Vec2 sum;
  for (const Vec2& p : curve.vertices()) sum += p;
  return (1.0 / static_cast<double>(curve.size())) * sum;
}

Curve resample_uniform(const Curve& curve, int count) {
  if (count < 4) throw InvalidArgument("resample_uniform needs at least 4 points");
  const double total = curve_length(curve);
  if (total < 1e-6) throw InvalidArgument("cannot resample a degenerate curve");

  const double spacing = total / count;
  std::vector<Vec2> out;
  out.reserve(static_cast<std::size_t>(count));
  out.push_back(curve[0]);

  std::size_t segment = 0;
  double segment_start = 0.0;  // arc length at curve[segment]
  double segment_length = distance(curve[0], curve.wrapped(1));
  for (int k = 1; k < count; ++k) {
    const double target = k * spacing;
    while (segment_start + segment_length < target && segment + 1 < curve.size()) {
      segment_start += segment_length;
      ++segment;
      segment_length = distance(curve[segment], curve.wrapped(static_cast<long>(segment) + 1));
    }
    const double t = std::clamp((target - segment_start) / segment_length, 0.0, 1.0);
    const Vec2 a = curve[segment];
    const Vec2 b = curve.wrapped(static_cast<long>(segment) + 1);
    out.push_back(a + t * (b - a));
  }
  return Curve(std::move(out));
}

std::vector<Vec2> outer_normals(const Curve& curve) {
  std::vector<Vec2> normals(curve.size());
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const long j = static_cast<long>(i);
    Vec2 tangent = curve.wrapped(j + 1) - curve.wrapped(j - 1);
    if (norm(tangent) <= Curve::kMinSegmentLength) tangent = curve.wrapped(j + 1) - curve[i];
    const Vec2 n{-tangent.y, tangent.x};
    normals[i] = (1.0 / norm(n)) * n;
  }
  return normals;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher): squared
// distance transform of a sampled 1-D function.
void distance_transform_1d(std::span<const double> f, std::span<double> d,
                           std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s = 0.0;
    while (true) {
      const int p = v[k];
      s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p));
      if (s <= z[k] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  if (k < 0) {
    std::fill(d.begin(), d.end(), kInf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double diff = q - v[j];
    d[q] = diff * diff + f[v[j]];
  }
}

// Squared Euclidean distance from every pixel to the nearest pixel where
// `feature` is true.
std::vector<double> squared_distance_to(const BinaryMask& mask, bool feature) {
  const int w = mask.width();
  const int h = mask.height();
  std::vector<double> grid(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      grid[static_cast<std::size_t>(y) * w + x] = mask.at(x, y) == feature ? 0.0 : kInf;

  std::vector<int> v;
  std::vector<double> z;
  std::vector<double> f(std::max(w, h));
  std::vector<double> d(std::max(w, h));
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[y] = grid[static_cast<std::size_t>(y) * w + x];
    distance_transform_1d(std::span(f).first(h), std::span(d).first(h), v, z);
    for (int y = 0; y < h; ++y) grid[static_cast<std::size_t>(y) * w + x] = d[y];
  }
  for (int y = 0; y < h; ++y) {
    auto row = std::span(grid).subspan(static_cast<std::size_t>(y) * w, w);
    std::copy(row.begin(), row.end(), f.begin());
    distance_transform_1d(std::span(f).first(w), row, v, z);
  }
  return grid;
}

}  // namespace

SignedDistanceMap signed_distance_map(const BinaryMask& mask) {
  const std::size_t inside = mask.count();
  const std::size_t total = static_cast<std::size_t>(mask.width()) * mask.height();
  if (inside == 0) throw InvalidArgument("signed distance map of an empty mask");
  if (inside == total) throw InvalidArgument("signed distance map of a full mask");

  const auto to_inside = squared_distance_to(mask, true);
  const auto to_outside = squared_distance_to(mask, false);
  std::vector<double> values(total);
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * mask.width() + x;
      values[i] = mask.at(x, y) ? -(std::sqrt(to_outside[i]) - 0.5)
                                : std::sqrt(to_inside[i]) - 0.5;
    }
  }
  return SignedDistanceMap(mask.width(), mask.height(), std::move(values));
}

namespace {

// Marching squares on a pixel-centre grid. Edge ids: 2*(y*w + x) for the
// horizontal edge (x,y)-(x+1,y), 2*(y*w + x) + 1 for the vertical edge
// (x,y)-(x,y+1).
class LevelTracer {
 public:
  LevelTracer(const SignedDistanceMap& sdm, double level) : sdm_(sdm), level_(level) {}

  std::vector<Curve> trace() {
    build_segments();
    std::vector<Curve> curves;
    std::vector<bool> used(segments_.size(), false);

    // Open chains start at edges with a single incident segment.
    for (const auto& [edge, incident] : incidence_) {
      if (incident.size() == 1 && !used[incident[0]]) walk(edge, incident[0], used);
    }
    for (std::size_t s = 0; s < segments_.size(); ++s) {
      if (used[s]) continue;
      auto chain = walk(segments_[s].a, s, used);
      if (!chain.closed) continue;
      auto points = dedupe(chain.edges);
      if (points.size() >= 4) curves.emplace_back(std::move(points));
    }
    return curves;
  }

 private:
  struct Segment {
    long a, b;
  };
  struct Chain {
    std::vector<long> edges;
    bool closed = false;
  };

  bool above(int x, int y) const { return sdm_.at(x, y) > level_; }

  long horizontal(int x, int y) const { return 2L * (static_cast<long>(y) * sdm_.width() + x); }
  long vertical(int x, int y) const { return horizontal(x, y) + 1; }

  Vec2 edge_point(long id) const {
    const long cell = id / 2;
    const int x = static_cast<int>(cell % sdm_.width());
    const int y = static_cast<int>(cell / sdm_.width());
    const int x2 = (id % 2 == 0) ? x + 1 : x;
    const int y2 = (id % 2 == 0) ? y : y + 1;
    const double a = sdm_.at(x, y);
    const double b = sdm_.at(x2, y2);
    const double t = (level_ - a) / (b - a);
    return {x + t * (x2 - x), y + t * (y2 - y)};
  }

  void add(long a, long b) {
    const std::size_t index = segments_.size();
    segments_.push_back({a, b});
    incidence_[a].push_back(index);
    incidence_[b].push_back(index);
  }

  void build_segments() {
    for (int y = 0; y + 1 < sdm_.height(); ++y) {
      for (int x = 0; x + 1 < sdm_.width(); ++x) {
        // Corners in cyclic order TL, TR, BR, BL; edge k joins corner k and k+1.
        const bool corner[4] = {above(x, y), above(x + 1, y), above(x + 1, y + 1), above(x, y + 1)};
        const long edge[4] = {horizontal(x, y), vertical(x + 1, y), horizontal(x, y + 1),
                              vertical(x, y)};
        int crossings = 0;
        for (int k = 0; k < 4; ++k) crossings += corner[k] != corner[(k + 1) % 4];
        if (crossings == 0) continue;
        if (crossings == 2) {
          long ends[2];
          int n = 0;
          for (int k = 0; k < 4; ++k)
            if (corner[k] != corner[(k + 1) % 4]) ends[n++] = edge[k];
          add(ends[0], ends[1]);
          continue;
        }
        // Saddle: cut off each corner whose label differs from the centre.
        const double mean = 0.25 * (sdm_.at(x, y) + sdm_.at(x + 1, y) + sdm_.at(x + 1, y + 1) +
                                    sdm_.at(x, y + 1));
        const bool centre = mean > level_;
        for (int k = 0; k < 4; ++k) {
          if (corner[k] != centre) add(edge[(k + 3) % 4], edge[k]);
        }
      }
    }
  }

  Chain walk(long start, std::size_t first, std::vector<bool>& used) const {
    Chain chain;
    chain.edges.push_back(start);
    long at = start;
    std::size_t seg = first;
    while (true) {
      used[seg] = true;
      const long next = segments_[seg].a == at ? segments_[seg].b : segments_[seg].a;
      if (next == start) {
        chain.closed = true;
        return chain;
      }
      chain.edges.push_back(next);
      at = next;
      const auto& incident = incidence_.at(at);
      std::optional<std::size_t> following;
      for (std::size_t candidate : incident)
        if (!used[candidate]) following = candidate;
      if (!following) return chain;
      seg = *following;
    }
  }

  std::vector<Vec2> dedupe(const std::vector<long>& edges) const {
    std::vector<Vec2> points;
    points.reserve(edges.size());
    for (long id : edges) {
      const Vec2 p = edge_point(id);
      if (points.empty() || distance(points.back(), p) > 1e-7) points.push_back(p);
    }
    while (points.size() > 1 && distance(points.back(), points.front()) <= 1e-7) points.pop_back();
    return points;
  }

  const SignedDistanceMap& sdm_;
  double level_;
  std::vector<Segment> segments_;
  std::unordered_map<long, std::vector<std::size_t>> incidence_;
};

}  // namespace

std::vector<LevelLine> extract_level_lines(const SignedDistanceMap& sdm, double lo, double hi) {
  if (!(lo <= hi)) throw InvalidArgument("level range must satisfy lo <= hi");
  std::vector<LevelLine> lines;
  for (double level = std::ceil(lo); level <= std::floor(hi); level += 1.0) {
    for (auto& curve : LevelTracer(sdm, level).trace()) lines.push_back({level, std::move(curve)});
  }
  return lines;
}

BinaryMask rasterize(const Curve& curve, int width, int height) {
  BinaryMask mask(width, height);
  std::vector<double> crossings;
  const auto n = curve.size();
  for (int y = 0; y < height; ++y) {
    crossings.clear();
    const double py = y;
    for (std::size_t i = 0; i < n; ++i) {
      const Vec2 a = curve[i];
      const Vec2 b = curve[(i + 1) % n];
      if ((a.y > py) != (b.y > py)) crossings.push_back(a.x + (py - a.y) * (b.x - a.x) / (b.y - a.y));
    }
    std::sort(crossings.begin(), crossings.end());
    for (std::size_t k = 0; k + 1 < crossings.size(); k += 2) {
      const int x0 = std::max(0, static_cast<int>(std::ceil(crossings[k])));
      const int x1 = std::min(width, static_cast<int>(std::ceil(crossings[k + 1])));
      for (int x = x0; x < x1; ++x) mask.set(x, y, true);
    }
  }
  return mask;
}

nlohmann::json curve_to_json(const Curve& curve) {
  nlohmann::json vertices = nlohmann::json::array();
  for (const Vec2& p : curve.vertices()) vertices.push_back({p.x, p.y});
  return {{"vertices", vertices}, {"closed", true}};
}

Curve curve_from_json(const nlohmann::json& doc) {
  if (!doc.is_object() || !doc.contains("vertices") || !doc["vertices"].is_array()) {
    throw FormatError("contour JSON needs a \"vertices\" array");
  }
  if (doc.contains("closed") && !(doc["closed"].is_boolean() && doc["closed"].get<bool>())) {
    throw FormatError("only closed contours are supported");
  }
  std::vector<Vec2> vertices;
  for (const auto& item : doc["vertices"]) {
    if (!item.is_array() || item.size() != 2 || !item[0].is_number() || !item[1].is_number()) {
      throw FormatError("contour vertices must be [x, y] number pairs");
    }
    vertices.push_back({item[0].get<double>(), item[1].get<double>()});
  }
  return Curve(std::move(vertices));
}

}  // namespace deepsnake
