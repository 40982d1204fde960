#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "deepsnake/flowengine.hpp"
#include "support/oracles.hpp"

using namespace deepsnake;

namespace {

constexpr double kPi = std::numbers::pi;

// Returns a fixed multiple of the outer normal plus a multiple of the tangent.
class NormalFlow : public FlowPredictor {
 public:
  NormalFlow(double normal, double tangential = 0.0) : normal_(normal), tangential_(tangential) {}
  FlowField predict(const RasterImage&, const Curve&, std::span<const Vec2> normals) const override {
    FlowField out;
    for (const Vec2& n : normals) out.push_back(normal_ * n + tangential_ * Vec2{n.y, -n.x});
    return out;
  }
  std::string name() const override { return "normal"; }

 private:
  double normal_, tangential_;
};

// Adds a tangential field of varying magnitude to another predictor.
class WithTangential : public FlowPredictor {
 public:
  WithTangential(const FlowPredictor& inner, double magnitude) : inner_(inner), magnitude_(magnitude) {}
  FlowField predict(const RasterImage& image, const Curve& curve, std::span<const Vec2> normals) const override {
    FlowField out = inner_.predict(image, curve, normals);
    for (std::size_t j = 0; j < out.size(); ++j) {
      const Vec2 t{normals[j].y, -normals[j].x};
      out[j] += magnitude_ * (1.0 + 0.5 * std::sin(0.7 * double(j))) * t;
    }
    return out;
  }
  std::string name() const override { return "tangential"; }

 private:
  const FlowPredictor& inner_;
  double magnitude_;
};

double mean_radius(const Curve& c, Vec2 center) {
  double total = 0.0;
  for (const Vec2& p : c.vertices()) total += distance(p, center);
  return total / double(c.size());
}

double mean_boundary_distance(const Curve& c, const BinaryMask& mask) {
  double total = 0.0;
  for (const Vec2& p : c.vertices()) total += oracle::distance_to_mask_boundary(mask, p);
  return total / double(c.size());
}

// Distance from p to the closed polygon.
double distance_to_polygon(const Curve& c, Vec2 p) {
  double best = 1e300;
  for (std::size_t j = 0; j < c.size(); ++j) {
    const Vec2 a = c[j];
    const Vec2 b = c.wrapped(static_cast<long>(j) + 1);
    const Vec2 ab = b - a;
    const double t = std::clamp(dot(p - a, ab) / dot(ab, ab), 0.0, 1.0);
    best = std::min(best, distance(p, a + t * ab));
  }
  return best;
}

double hausdorff(const Curve& a, const Curve& b) {
  double worst = 0.0;
  for (const Vec2& p : a.vertices()) worst = std::max(worst, distance_to_polygon(b, p));
  for (const Vec2& p : b.vertices()) worst = std::max(worst, distance_to_polygon(a, p));
  return worst;
}

// Piecewise-constant energy sum_inside (I - mu_i)^2 + sum_outside (I - mu_o)^2.
double region_energy(const RasterImage& image, const Curve& c, double mu_in, double mu_out) {
  const BinaryMask inside = rasterize(c, image.width(), image.height());
  double e = 0.0;
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x) {
      const double d = image.at(x, y) - (inside.at(x, y) ? mu_in : mu_out);
      e += d * d;
    }
  return e;
}

Curve wobbly_circle(Vec2 center, double radius, double amplitude, int count = 200) {
  std::vector<Vec2> pts;
  for (int i = 0; i < count; ++i) {
    const double t = 2 * kPi * i / count;
    const double r = radius + amplitude * std::sin(5 * t);
    pts.push_back({center.x + r * std::cos(t), center.y + r * std::sin(t)});
  }
  return Curve(pts);
}

}  // namespace

TEST_CASE("sobolev kernel") {
  CHECK(std::abs(sobolev_kernel_value(0.0, 1.0, 0.01) - (1.0 + (1.0 / 6.0) / 0.02)) <= 1e-9);
  CHECK(std::abs(sobolev_kernel_value(0.0, 1.0, 0.01) - 9.333333333333333) <= 1e-9);
  CHECK(std::abs(sobolev_kernel_value(0.5, 1.0, 0.01) + 3.1666666666666667) <= 1e-9);

  for (int k : {2, 3, 16, 64, 256, 1000})
    for (double length : {1.0, 0.3, 250.0})
      for (double beta : {0.01, 0.5}) {
        const auto w = sobolev_kernel(k, length, beta);
        long double total = 0.0L;
        for (double v : w) total += v;
        CHECK(std::abs(static_cast<double>(total) - 1.0) <= 1e-12);
        // Symmetric: K(s) = K(L - s).
        for (int j = 1; j < k; ++j) CHECK(w[static_cast<std::size_t>(j)] == doctest::Approx(w[static_cast<std::size_t>(k - j)]));
      }
  CHECK_THROWS_AS(sobolev_kernel(1, 1.0, 0.01), InvalidArgument);
  CHECK_THROWS_AS(sobolev_kernel(8, 0.0, 0.01), InvalidArgument);
  CHECK_THROWS_AS(sobolev_kernel(8, 1.0, 0.0), InvalidArgument);
}

TEST_CASE("regularize_flow") {
  std::mt19937 rng(3);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int k : {16, 64, 256}) {
    for (double length : {1.0, 4 * kPi * kPi * 0.01, 37.0}) {
      FlowField f(static_cast<std::size_t>(k));
      for (Vec2& v : f) v = {n(rng) + 2.0, n(rng) - 1.0};
      const auto w = sobolev_kernel(k, length, 0.01);
      const FlowField fast = regularize_flow(f, length, 0.01);
      const auto slow = oracle::circular_convolution(f, w);
      double worst = 0.0;
      Vec2 mean_in, mean_out;
      for (std::size_t j = 0; j < f.size(); ++j) {
        worst = std::max(worst, norm(fast[j] - slow[j]));
        mean_in += f[j];
        mean_out += fast[j];
      }
      CHECK(worst <= 1e-9);
      CHECK(norm(mean_in - mean_out) / k <= 1e-9);
    }
  }
  SUBCASE("constant field is a fixed point") {
    const FlowField f(64, Vec2{1.5, -0.25});
    for (const Vec2& v : regularize_flow(f, 1.0, 0.01)) {
      CHECK(v.x == doctest::Approx(1.5).epsilon(1e-12));
      CHECK(v.y == doctest::Approx(-0.25).epsilon(1e-12));
    }
  }
  SUBCASE("a spike spreads as the kernel") {
    const int k = 64;
    FlowField f(k);
    f[0] = {2.0, -1.0};
    const auto w = sobolev_kernel(k, 1.0, 0.01);
    const FlowField out = regularize_flow(f, 1.0, 0.01);
    for (int j = 0; j < k; ++j) {
      const double wj = w[static_cast<std::size_t>((k - j) % k)];
      CHECK(out[static_cast<std::size_t>(j)].x == doctest::Approx(2.0 * wj).epsilon(1e-9));
      CHECK(out[static_cast<std::size_t>(j)].y == doctest::Approx(-wj).epsilon(1e-9));
    }
  }
  SUBCASE("an outlier moves the output by at most max|w| times its size") {
    const int k = 64;
    FlowField smooth(k);
    for (int j = 0; j < k; ++j) smooth[static_cast<std::size_t>(j)] = {std::cos(2 * kPi * j / k), std::sin(2 * kPi * j / k)};
    for (int spike : {0, 17, 63}) {
      FlowField noisy = smooth;
      const Vec2 outlier = -2.0 * smooth[static_cast<std::size_t>(spike)];  // inverts the vector
      noisy[static_cast<std::size_t>(spike)] += outlier;
      const double length = 4 * kPi * kPi * 0.01;
      const auto w = sobolev_kernel(k, length, 0.01);
      const double wmax = *std::max_element(w.begin(), w.end(), [](double a, double b) { return std::abs(a) < std::abs(b); });
      const FlowField a = regularize_flow(smooth, length, 0.01);
      const FlowField b = regularize_flow(noisy, length, 0.01);
      for (int j = 0; j < k; ++j) {
        CHECK(norm(b[static_cast<std::size_t>(j)] - a[static_cast<std::size_t>(j)]) <= std::abs(wmax) * norm(outlier) + 1e-12);
      }
      // The inverted vector is pulled back into agreement with its neighbours.
      CHECK(dot(b[static_cast<std::size_t>(spike)], smooth[static_cast<std::size_t>(spike)]) > 0.5);
    }
  }
  SUBCASE("default evolution kernel keeps translations and expansions") {
    const int k = 64;
    const Curve circle(oracle::circle_points({50, 50}, 20, k));
    const auto normals = outer_normals(circle);
    const FlowField out = regularize_flow(normals, EvolutionConfig{}.kernel_length, 0.01);
    for (int j = 0; j < k; ++j) CHECK(norm(out[static_cast<std::size_t>(j)] - normals[static_cast<std::size_t>(j)]) <= 2e-3);
  }
}

TEST_CASE("region means and baseline speed") {
  const BinaryMask disk = oracle::disk_mask(40, 40, {20, 20}, 8);
  SUBCASE("two-valued image") {
    const RasterImage image = to_image(disk);
    const RegionMeans m = estimate_means(image, disk);
    CHECK(m.inside[0] == doctest::Approx(1.0));
    CHECK(m.outside[0] == doctest::Approx(0.0));
  }
  SUBCASE("constant image") {
    const RegionMeans m = estimate_means(RasterImage(40, 40, 3, 0.3f), disk);
    for (int c = 0; c < 3; ++c) {
      CHECK(m.inside[static_cast<std::size_t>(c)] == doctest::Approx(0.3));
      CHECK(m.outside[static_cast<std::size_t>(c)] == doctest::Approx(0.3));
    }
  }
  SUBCASE("band matches brute-force distances") {
    std::mt19937 rng(2);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    RasterImage image(40, 40, 1);
    for (float& v : image.samples()) v = u(rng);
    const auto phi = oracle::brute_force_sdm(disk);
    double in = 0, out = 0;
    int n_in = 0, n_out = 0;
    for (int y = 0; y < 40; ++y)
      for (int x = 0; x < 40; ++x) {
        const double d = phi[static_cast<std::size_t>(y) * 40 + x];
        if (disk.at(x, y)) {
          in += image.at(x, y);
          ++n_in;
        } else if (d > 0 && d <= 3) {
          out += image.at(x, y);
          ++n_out;
        }
      }
    const RegionMeans m = estimate_means(image, disk);
    CHECK(m.inside[0] == doctest::Approx(in / n_in).epsilon(1e-12));
    CHECK(m.outside[0] == doctest::Approx(out / n_out).epsilon(1e-12));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(estimate_means(RasterImage(40, 40, 1), BinaryMask(40, 40)), InvalidArgument);
    CHECK_THROWS_AS(estimate_means(RasterImage(40, 40, 1), BinaryMask(40, 40, true)), InvalidArgument);
    CHECK_THROWS_AS(estimate_means(RasterImage(30, 40, 1), disk), InvalidArgument);
  }
  SUBCASE("speed sign") {
    const Curve c(oracle::circle_points({20, 20}, 5, 16));
    const auto normals = outer_normals(c);
    const RegionMeans m{{0.8}, {0.2}};
    for (auto [value, alpha] : {std::pair{0.8, 0.36}, std::pair{0.2, -0.36}, std::pair{0.5, 0.0}}) {
      const FlowField f = baseline_speed(RasterImage(40, 40, 1, float(value)), c, normals, m);
      for (std::size_t j = 0; j < c.size(); ++j) {
        CHECK(dot(f[j], normals[j]) == doctest::Approx(alpha).epsilon(1e-6));
        CHECK(std::abs(cross(f[j], normals[j])) <= 1e-12);
      }
    }
    CHECK_THROWS_AS(BaselinePredictor(m).check_image(RasterImage(4, 4, 3)), ChannelMismatch);
  }
}

TEST_CASE("converged") {
  const Curve a(oracle::circle_points({0, 0}, 10, 8));
  CHECK(converged(a, a, 1e-12));
  std::vector<Vec2> moved(a.vertices().begin(), a.vertices().end());
  for (Vec2& p : moved) p += Vec2{1, 0};
  CHECK_FALSE(converged(a, Curve(moved), 0.5));
  // Half the vertices move 0.1, half 0.6: mean 0.35 < 0.5 although max > 0.5.
  for (std::size_t j = 0; j < moved.size(); ++j) moved[j] = a[j] + Vec2{j % 2 ? 0.6 : 0.1, 0};
  CHECK(converged(a, Curve(moved), 0.5));
  CHECK_THROWS_AS(converged(a, Curve(oracle::circle_points({0, 0}, 10, 9)), 0.5), InvalidArgument);
}

TEST_CASE("evolve") {
  const RasterImage image(128, 128, 1, 0.5f);
  const Vec2 c{64, 64};

  SUBCASE("zero flow keeps the resampled initial curve") {
    const Curve init = wobbly_circle(c, 30, 3);
    EvolutionConfig cfg;
    cfg.max_iterations = 7;
    cfg.epsilon = 0.0;
    const auto r = evolve(image, init, NormalFlow(0.0), cfg);
    CHECK(r.trace.iterations == 7);
    CHECK(r.trace.termination == Termination::MaxIterations);
    const Curve expected = resample_uniform(init, cfg.points);
    for (std::size_t j = 0; j < expected.size(); ++j) CHECK(distance(r.curve[j], expected[j]) <= 1e-9);

    cfg.epsilon = 0.05;
    const auto early = evolve(image, init, NormalFlow(0.0), cfg);
    CHECK(early.trace.termination == Termination::Converged);
    CHECK(early.trace.iterations == 1);
  }
  SUBCASE("unit outward flow grows a circle by tau per iteration") {
    for (double r0 : {15.0, 30.0}) {
      EvolutionConfig cfg;
      cfg.max_iterations = 10;
      cfg.step = 0.5;
      cfg.epsilon = 0.0;
      const auto r = evolve(image, Curve(oracle::circle_points(c, r0, 90)), NormalFlow(1.0), cfg);
      CHECK(mean_radius(r.curve, c) == doctest::Approx(r0 + 5.0).epsilon(0.1 / (r0 + 5)));
      CHECK(r.trace.steps.size() == 10u);
    }
  }
  SUBCASE("tangential components do not change the geometry") {
    // A tangential field of constant size on a circle stays tangential after
    // smoothing, so every step matches the plain flow.
    EvolutionConfig cfg;
    cfg.max_iterations = 10;
    cfg.epsilon = 0.0;
    const auto plain = evolve(image, Curve(oracle::circle_points(c, 20, 64)), NormalFlow(1.0), cfg);
    const auto rotating = evolve(image, Curve(oracle::circle_points(c, 20, 64)), NormalFlow(1.0, 5.0), cfg);
    CHECK(mean_radius(rotating.curve, c) == doctest::Approx(25.0).epsilon(0.1 / 25));
    CHECK(hausdorff(plain.curve, rotating.curve) <= 0.05);

    // An arbitrary tangential field leaks into the normal direction through
    // the smoothing, but the converged geometry is the same.
    cfg.max_iterations = 300;
    cfg.epsilon = 0.001;
    const Curve init = wobbly_circle(c, 25, 4);
    const BinaryMask disk = oracle::disk_mask(128, 128, c, 30);
    const OracleSdmPredictor oracle_flow(signed_distance_map(disk));
    const auto a = evolve(image, init, oracle_flow, cfg);
    const auto b = evolve(image, init, WithTangential(oracle_flow, 0.5), cfg);
    CHECK(hausdorff(a.curve, b.curve) <= 1.0);
  }
  SUBCASE("oracle flow converges onto the boundary") {
    for (auto [rx, ry, angle] : {std::tuple{30.0, 30.0, 0.0}, std::tuple{40.0, 22.0, 0.5}, std::tuple{15.0, 15.0, 0.0}}) {
      const BinaryMask mask = oracle::ellipse_mask(128, 128, c, rx, ry, angle);
      const OracleSdmPredictor oracle_flow(signed_distance_map(mask));
      std::vector<Vec2> init;
      for (int i = 0; i < 120; ++i) {
        const double t = 2 * kPi * i / 120;
        const double bump = 1.0 + 0.15 * std::sin(3 * t + 1.0);
        const Vec2 local{rx * bump * std::cos(t), ry * bump * std::sin(t)};
        init.push_back(c + rotate(local, angle));
      }
      EvolutionConfig cfg;
      cfg.max_iterations = 200;
      const auto r = evolve(image, Curve(init), oracle_flow, cfg);
      CHECK(r.trace.iterations <= 200);
      CHECK(mean_boundary_distance(r.curve, mask) < 1.0);
      CHECK(oracle::dice(rasterize(r.curve, 128, 128), mask) >= 0.97);
    }
  }
  SUBCASE("baseline flow lowers the region energy") {
    RasterImage two(128, 128, 1);
    const BinaryMask square = rasterize(Curve({{40, 40}, {40, 90}, {95, 90}, {95, 40}}), 128, 128);
    for (int y = 0; y < 128; ++y)
      for (int x = 0; x < 128; ++x) two.at(x, y) = square.at(x, y) ? 0.8f : 0.2f;
    const BaselinePredictor baseline(estimate_means(two, square));
    for (double tau : {0.2, 0.1}) {
      EvolutionConfig cfg;
      cfg.step = tau;
      cfg.max_iterations = static_cast<int>(40.0 / (tau * 0.36));
      cfg.epsilon = 0.0;
      Evolution evo(two, wobbly_circle({67, 65}, 15, 2), baseline, cfg);
      double prev = region_energy(two, evo.curve(), 0.8, 0.2);
      const double first = prev;
      // One step sweeps at most tau * L pixels, each changing the energy by
      // at most (mu_i - mu_o)^2: the overshoot allowance.
      while (evo.step()) {
        const double e = region_energy(two, evo.curve(), 0.8, 0.2);
        CHECK(e <= prev + tau * curve_length(evo.curve()) * 0.36);
        prev = e;
      }
      CHECK(prev < 0.2 * first);
    }
  }
  SUBCASE("collapse raises with the trace attached") {
    EvolutionConfig cfg;
    cfg.step = 0.5;
    try {
      evolve(image, Curve(oracle::circle_points(c, 4, 32)), NormalFlow(-1.0), cfg);
      FAIL("expected a collapse");
    } catch (const CurveCollapsed& e) {
      CHECK(e.trace().termination == Termination::Collapsed);
      CHECK(e.trace().iterations >= 1);
      CHECK(!e.trace().steps.empty());
    }
  }
  SUBCASE("cancellation and stepping") {
    EvolutionConfig cfg;
    cfg.epsilon = 0.0;
    std::atomic<bool> stop{true};
    const auto r = evolve(image, Curve(oracle::circle_points(c, 20, 64)), NormalFlow(1.0), cfg, &stop);
    CHECK(r.trace.termination == Termination::Cancelled);
    CHECK(r.trace.iterations == 0);

    // Two single steps equal one two-step run.
    cfg.max_iterations = 2;
    const NormalFlow grow(1.0);
    const Curve init = wobbly_circle(c, 20, 2);
    Evolution a(image, init, grow, cfg);
    a.step();
    a.step();
    CHECK_FALSE(a.step());
    const auto b = evolve(image, init, grow, cfg);
    for (std::size_t j = 0; j < b.curve.size(); ++j) CHECK(a.curve()[j] == b.curve[j]);
  }
  SUBCASE("trace json") {
    EvolutionConfig cfg;
    cfg.max_iterations = 3;
    cfg.epsilon = 0.0;
    cfg.points = 16;
    const auto r = evolve(image, Curve(oracle::circle_points(c, 20, 16)), NormalFlow(1.0), cfg);
    const auto doc = to_json(r.trace, r.curve);
    CHECK(doc["termination"] == "max_iterations");
    CHECK(doc["steps"].size() == 3u);
    CHECK(doc["steps"][0]["raw"].size() == 16u);
    CHECK(doc["final"]["vertices"].size() == 16u);
  }
  SUBCASE("config validation") {
    EvolutionConfig cfg;
    cfg.points = 7;
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
    CHECK_THROWS_AS(evolution_config_from_json({{"step", -1.0}}), InvalidArgument);
    CHECK(evolution_config_from_json({{"points", 32}}).points == 32);
  }
}

TEST_CASE("cnn predictor") {
  NetShape shape;
  shape.widths = {2, 2, 2, 2};
  shape.hidden = 4;
  auto net = std::make_shared<FlowNet>(shape);
  // Zero weights: the output is the bias, (0, -2) in the patch frame, which
  // is twice the outer normal in the image frame.
  const std::size_t b = net->layer(5).bias_offset;
  net->parameters()[b] = 0.0f;
  net->parameters()[b + 1] = -2.0f;
  const CnnPredictor predictor(net);
  const Curve circle(oracle::circle_points({30, 30}, 10, 24));
  const auto normals = outer_normals(circle);
  const FlowField f = predictor.predict(RasterImage(60, 60, 1), circle, normals);
  for (std::size_t j = 0; j < circle.size(); ++j) CHECK(norm(f[j] - 2.0 * normals[j]) <= 1e-6);
  CHECK_THROWS_AS(predictor.check_image(RasterImage(60, 60, 3)), ChannelMismatch);

  const SpikePredictor spiked(std::make_shared<CnnPredictor>(net), 5, 1.0);
  const FlowField s = spiked.predict(RasterImage(60, 60, 1), circle, normals);
  CHECK(norm(s[5] + normals[5]) <= 1e-12);
  CHECK(norm(s[6] - 2.0 * normals[6]) <= 1e-6);
}
