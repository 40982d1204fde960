#include "deepsnake/flowengine.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "deepsnake/patchdata.hpp"

namespace deepsnake {

CnnPredictor::CnnPredictor(std::shared_ptr<const FlowNet> net, double patch_scale)
    : net_(std::move(net)), patch_scale_(patch_scale) {
  if (!net_) throw InvalidArgument("CNN predictor needs a network");
  if (!(patch_scale_ > 0.0)) throw InvalidArgument("patch scale must be positive");
}

void CnnPredictor::check_image(const RasterImage& image) const {
  if (image.channels() != net_->shape().in_channels) {
    throw ChannelMismatch("image has " + std::to_string(image.channels()) + " channels but the model expects " +
                          std::to_string(net_->shape().in_channels));
  }
}

FlowField CnnPredictor::predict(const RasterImage& image, const Curve& curve,
                                std::span<const Vec2> normals) const {
  check_image(image);
  FlowField out(curve.size());
  for (std::size_t j = 0; j < curve.size(); ++j) {
    const PatchFrame frame{curve[j], normal_angle_of(normals[j]), patch_scale_};
    const Vec2 local = net_->forward(sample_patch(image, frame, net_->shape().input_size));
    out[j] = patch_scale_ * local_to_world(frame.normal_angle, local);
  }
  return out;
}

OracleSdmPredictor::OracleSdmPredictor(SignedDistanceMap sdm) : sdm_(std::move(sdm)) {
  if (sdm_.width() < 3 || sdm_.height() < 3) throw InvalidArgument("distance map is too small");
}

FlowField OracleSdmPredictor::predict(const RasterImage&, const Curve& curve, std::span<const Vec2>) const {
  FlowField out(curve.size());
  for (std::size_t j = 0; j < curve.size(); ++j) {
    const Vec2 q{std::clamp(curve[j].x, 1.0, sdm_.width() - 2.0), std::clamp(curve[j].y, 1.0, sdm_.height() - 2.0)};
    out[j] = -sdm_.value(q) * sdm_.gradient(q);
  }
  return out;
}

RegionMeans estimate_means(const RasterImage& image, const BinaryMask& mask) {
  if (image.width() != mask.width() || image.height() != mask.height()) {
    throw InvalidArgument("image and mask extents differ");
  }
  if (mask.count() == 0) throw InvalidArgument("cannot estimate region means from an empty mask");
  const SignedDistanceMap sdm = signed_distance_map(mask);
  const auto channels = static_cast<std::size_t>(image.channels());
  RegionMeans means{std::vector<double>(channels, 0.0), std::vector<double>(channels, 0.0)};
  std::size_t inside = 0, band = 0;
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      std::vector<double>* target = nullptr;
      if (mask.at(x, y)) {
        target = &means.inside;
        ++inside;
      } else if (sdm.at(x, y) > 0.0 && sdm.at(x, y) <= 3.0) {
        target = &means.outside;
        ++band;
      }
      if (!target) continue;
      for (std::size_t c = 0; c < channels; ++c) (*target)[c] += image.at(x, y, static_cast<int>(c));
    }
  }
  if (band == 0) throw InvalidArgument("the 3-pixel band outside the mask is empty");
  for (std::size_t c = 0; c < channels; ++c) {
    means.inside[c] /= static_cast<double>(inside);
    means.outside[c] /= static_cast<double>(band);
  }
  return means;
}

FlowField baseline_speed(const RasterImage& image, const Curve& curve, std::span<const Vec2> normals,
                         const RegionMeans& means) {
  const auto channels = static_cast<std::size_t>(image.channels());
  if (means.inside.size() != channels || means.outside.size() != channels) {
    throw ChannelMismatch("region means do not match the image channels");
  }
  if (normals.size() != curve.size()) throw InvalidArgument("one normal per vertex required");
  FlowField out(curve.size());
  std::vector<float> px(channels);
  for (std::size_t j = 0; j < curve.size(); ++j) {
    image.sample(curve[j].x, curve[j].y, px);
    double alpha = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const double to_out = px[c] - means.outside[c];
      const double to_in = px[c] - means.inside[c];
      alpha += to_out * to_out - to_in * to_in;
    }
    out[j] = alpha * normals[j];
  }
  return out;
}

BaselinePredictor::BaselinePredictor(RegionMeans means) : means_(std::move(means)) {
  if (means_.inside.empty() || means_.inside.size() != means_.outside.size()) {
    throw InvalidArgument("region means need matching, non-empty channel lists");
  }
}

void BaselinePredictor::check_image(const RasterImage& image) const {
  if (static_cast<std::size_t>(image.channels()) != means_.inside.size()) {
    throw ChannelMismatch("region means do not match the image channels");
  }
}

FlowField BaselinePredictor::predict(const RasterImage& image, const Curve& curve,
                                     std::span<const Vec2> normals) const {
  return baseline_speed(image, curve, normals, means_);
}

SpikePredictor::SpikePredictor(std::shared_ptr<const FlowPredictor> inner, std::size_t index, double magnitude)
    : inner_(std::move(inner)), index_(index), magnitude_(magnitude) {
  if (!inner_) throw InvalidArgument("spike predictor needs an inner predictor");
}

FlowField SpikePredictor::predict(const RasterImage& image, const Curve& curve,
                                  std::span<const Vec2> normals) const {
  FlowField out = inner_->predict(image, curve, normals);
  const std::size_t j = index_ % out.size();
  out[j] = -magnitude_ * normals[j];
  return out;
}

double sobolev_kernel_value(double s, double length, double beta) {
  const double x = s / length;
  return (1.0 + length * (x * x - x + 1.0 / 6.0) / (2.0 * beta)) / length;
}

namespace {

void check_kernel_args(int count, double length, double beta) {
  if (count < 2) throw InvalidArgument("kernel needs at least 2 samples");
  if (!(length > 0.0)) throw InvalidArgument("kernel length must be positive");
  if (!(beta > 0.0)) throw InvalidArgument("kernel beta must be positive");
}

// Normalised weights as a quadratic in the sample index: w_m = a + b m + c m^2.
struct KernelPolynomial {
  double a, b, c;
};

KernelPolynomial kernel_polynomial(int count, double length, double beta) {
  const double k = count;
  const double g = length / (2.0 * beta);
  double a = (1.0 + g / 6.0) / k;
  double b = -g / (k * k);
  double c = g / (k * k * k);
  // sum_m (a + b m + c m^2) over m = 0..K-1.
  const double s1 = k * (k - 1.0) / 2.0;
  const double s2 = (k - 1.0) * k * (2.0 * k - 1.0) / 6.0;
  const double total = a * k + b * s1 + c * s2;
  return {a / total, b / total, c / total};
}

}  // namespace

std::vector<double> sobolev_kernel(int count, double length, double beta) {
  check_kernel_args(count, length, beta);
  const double ds = length / count;
  std::vector<double> w(static_cast<std::size_t>(count));
  // Large L / beta gives large weights of both signs; sum in extended precision.
  long double total = 0.0L;
  for (int j = 0; j < count; ++j) {
    w[static_cast<std::size_t>(j)] = sobolev_kernel_value(j * ds, length, beta) * ds;
    total += w[static_cast<std::size_t>(j)];
  }
  for (double& v : w) v = static_cast<double>(v / total);
  return w;
}

FlowField regularize_flow(std::span<const Vec2> flow, double length, double beta) {
  const int count = static_cast<int>(flow.size());
  check_kernel_args(count, length, beta);
  const KernelPolynomial p = kernel_polynomial(count, length, beta);

  // Moments T_q = sum_k k^q f_k; prefix sums run alongside the output index.
  Vec2 t0, t1, t2;
  for (int k = 0; k < count; ++k) {
    const double kk = k;
    t0 += flow[static_cast<std::size_t>(k)];
    t1 += kk * flow[static_cast<std::size_t>(k)];
    t2 += kk * kk * flow[static_cast<std::size_t>(k)];
  }
  FlowField out(flow.size());
  Vec2 p0, p1, p2;
  for (int j = 0; j < count; ++j) {
    const double jj = j;
    const Vec2 f = flow[static_cast<std::size_t>(j)];
    p0 += f;
    p1 += jj * f;
    p2 += jj * jj * f;
    // k <= j contributes w_{j-k}; k > j contributes w_{j-k+K}.
    const double d = jj + count;
    const Vec2 head = (p.a + p.b * jj + p.c * jj * jj) * p0 - (p.b + 2.0 * p.c * jj) * p1 + p.c * p2;
    const Vec2 tail = (p.a + p.b * d + p.c * d * d) * (t0 - p0) - (p.b + 2.0 * p.c * d) * (t1 - p1) + p.c * (t2 - p2);
    out[static_cast<std::size_t>(j)] = head + tail;
  }
  return out;
}

void EvolutionConfig::validate() const {
  if (max_iterations < 0) throw InvalidArgument("max_iterations must be >= 0");
  if (!(step > 0.0)) throw InvalidArgument("step size must be positive");
  if (points < 8) throw InvalidArgument("contour needs at least 8 points");
  if (!(beta > 0.0)) throw InvalidArgument("beta must be positive");
  if (!(epsilon >= 0.0)) throw InvalidArgument("epsilon must be >= 0");
  if (resample_every < 1) throw InvalidArgument("resample_every must be >= 1");
  if (!(kernel_length > 0.0)) throw InvalidArgument("kernel_length must be positive");
}

nlohmann::json to_json(const EvolutionConfig& cfg) {
  return {{"max_iterations", cfg.max_iterations}, {"step", cfg.step},
          {"points", cfg.points},                 {"beta", cfg.beta},
          {"epsilon", cfg.epsilon},               {"resample_every", cfg.resample_every},
          {"kernel_length", cfg.kernel_length}};
}

EvolutionConfig evolution_config_from_json(const nlohmann::json& doc, EvolutionConfig base) {
  if (!doc.is_object()) throw InvalidArgument("evolution config must be a JSON object");
  try {
    base.max_iterations = doc.value("max_iterations", base.max_iterations);
    base.step = doc.value("step", base.step);
    base.points = doc.value("points", base.points);
    base.beta = doc.value("beta", base.beta);
    base.epsilon = doc.value("epsilon", base.epsilon);
    base.resample_every = doc.value("resample_every", base.resample_every);
    base.kernel_length = doc.value("kernel_length", base.kernel_length);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("invalid evolution config: ") + e.what());
  }
  base.validate();
  return base;
}

std::string to_string(Termination t) {
  switch (t) {
    case Termination::Running: return "running";
    case Termination::Converged: return "converged";
    case Termination::MaxIterations: return "max_iterations";
    case Termination::Cancelled: return "cancelled";
    case Termination::Collapsed: return "collapsed";
  }
  return "unknown";
}

namespace {

nlohmann::json points_json(std::span<const Vec2> points) {
  nlohmann::json arr = nlohmann::json::array();
  for (const Vec2& p : points) arr.push_back({p.x, p.y});
  return arr;
}

double mean_displacement(std::span<const Vec2> a, std::span<const Vec2> b) {
  double total = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) total += distance(a[j], b[j]);
  return total / static_cast<double>(a.size());
}

}  // namespace

nlohmann::json to_json(const EvolutionTrace& trace, const std::optional<Curve>& final_curve) {
  nlohmann::json steps = nlohmann::json::array();
  for (const EvolutionStep& s : trace.steps) {
    steps.push_back({{"iteration", s.iteration},
                     {"curve", points_json(s.curve.vertices())},
                     {"raw", points_json(s.raw)},
                     {"regularized", points_json(s.regularized)},
                     {"mean_displacement", s.mean_displacement}});
  }
  nlohmann::json doc = {{"termination", to_string(trace.termination)},
                        {"iterations", trace.iterations},
                        {"steps", std::move(steps)}};
  if (final_curve) doc["final"] = curve_to_json(*final_curve);
  return doc;
}

bool converged(const Curve& prev, const Curve& next, double epsilon) {
  if (prev.size() != next.size()) throw InvalidArgument("curves have different vertex counts");
  return mean_displacement(prev.vertices(), next.vertices()) < epsilon;
}

Evolution::Evolution(const RasterImage& image, const Curve& init, const FlowPredictor& predictor,
                     EvolutionConfig cfg)
    : image_(image), predictor_(predictor), cfg_(cfg), curve_((cfg.validate(), resample_uniform(init, cfg.points))) {
  predictor_.check_image(image_);
  if (cfg_.max_iterations == 0) trace_.termination = Termination::MaxIterations;
}

bool Evolution::step() {
  if (finished()) return false;
  const std::size_t count = curve_.size();
  const auto normals = outer_normals(curve_);
  FlowField raw = predictor_.predict(image_, curve_, normals);
  if (raw.size() != count) throw Error("predictor returned " + std::to_string(raw.size()) + " vectors for " +
                                       std::to_string(count) + " vertices");
  for (const Vec2& v : raw) {
    if (!std::isfinite(v.x) || !std::isfinite(v.y)) throw Error("predictor returned a non-finite flow vector");
  }
  FlowField reg = regularize_flow(raw, cfg_.kernel_length, cfg_.beta);

  std::vector<Vec2> moved(count);
  for (std::size_t j = 0; j < count; ++j) {
    moved[j] = curve_[j] + (cfg_.step * dot(reg[j], normals[j])) * normals[j];
  }
  const double displacement = mean_displacement(curve_.vertices(), moved);
  const int iteration = trace_.iterations + 1;

  auto collapse = [&](const std::string& why) {
    trace_.iterations = iteration;
    trace_.termination = Termination::Collapsed;
    std::ostringstream msg;
    msg << "contour collapsed at iteration " << iteration << ": " << why;
    throw CurveCollapsed(msg.str(), trace_);
  };

  // Drop coincident neighbours before rebuilding the curve.
  std::vector<Vec2> kept;
  kept.reserve(count);
  for (const Vec2& p : moved)
    if (kept.empty() || distance(kept.back(), p) > 1e-6) kept.push_back(p);
  while (kept.size() > 1 && distance(kept.front(), kept.back()) <= 1e-6) kept.pop_back();
  if (kept.size() < 4) collapse("fewer than 4 distinct vertices");
  // Vertices pushed through each other reverse the traversal direction.
  if (signed_area(kept) >= 0.0) collapse("contour turned inside out");
  std::optional<Curve> next;
  try {
    next.emplace(std::move(kept));
  } catch (const InvalidArgument& e) {
    collapse(e.what());
  }
  if (curve_length(*next) < 4.0) collapse("length below 4 px");
  // A step that moved nothing keeps the curve as is; resampling a polygon
  // shifts its vertices slightly.
  if (next->size() != count || (displacement > 0.0 && iteration % cfg_.resample_every == 0)) {
    next = resample_uniform(*next, static_cast<int>(count));
  }

  if (cfg_.record_trace) trace_.steps.push_back({iteration, curve_, raw, reg, displacement});
  last_raw_ = std::move(raw);
  last_regularized_ = std::move(reg);
  last_displacement_ = displacement;
  curve_ = std::move(*next);
  trace_.iterations = iteration;
  if (displacement < cfg_.epsilon) {
    trace_.termination = Termination::Converged;
  } else if (iteration >= cfg_.max_iterations) {
    trace_.termination = Termination::MaxIterations;
  }
  return true;
}

void Evolution::cancel() {
  if (!finished()) trace_.termination = Termination::Cancelled;
}

void Evolution::run(const std::atomic<bool>* cancel_flag) {
  while (!finished()) {
    if (cancel_flag && cancel_flag->load()) {
      cancel();
      break;
    }
    step();
  }
}

EvolutionResult evolve(const RasterImage& image, const Curve& init, const FlowPredictor& predictor,
                       const EvolutionConfig& cfg, const std::atomic<bool>* cancel) {
  Evolution evo(image, init, predictor, cfg);
  evo.run(cancel);
  return {evo.curve(), evo.trace()};
}

}  // namespace deepsnake
