#pragma once

#include <atomic>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepsnake/error.hpp"
#include "deepsnake/geometry.hpp"
#include "deepsnake/image.hpp"
#include "deepsnake/neuralflow.hpp"

namespace deepsnake {

/// One world-frame vector (pixels) per contour vertex.
using FlowField = std::vector<Vec2>;

/// Produces the flow for every vertex of a curve.
class FlowPredictor {
 public:
  virtual ~FlowPredictor() = default;
  /// Throws ChannelMismatch (or InvalidArgument) when the image cannot be used.
  virtual void check_image(const RasterImage& image) const { (void)image; }
  virtual FlowField predict(const RasterImage& image, const Curve& curve,
                            std::span<const Vec2> normals) const = 0;
  virtual std::string name() const = 0;
};

/// Samples a normal-aligned patch per vertex, runs the network and rotates
/// the local prediction back to the image frame. `patch_scale` is the frame
/// sampling step; predictions are scaled by it into image pixels.
class CnnPredictor : public FlowPredictor {
 public:
  explicit CnnPredictor(std::shared_ptr<const FlowNet> net, double patch_scale = 1.0);
  void check_image(const RasterImage& image) const override;
  FlowField predict(const RasterImage& image, const Curve& curve,
                    std::span<const Vec2> normals) const override;
  std::string name() const override { return "cnn"; }
  const FlowNet& net() const { return *net_; }

 private:
  std::shared_ptr<const FlowNet> net_;
  double patch_scale_;
};

/// nu = -phi * grad(phi) from a ground-truth distance map. Points outside
/// the gradient region are evaluated at the nearest point inside it.
class OracleSdmPredictor : public FlowPredictor {
 public:
  explicit OracleSdmPredictor(SignedDistanceMap sdm);
  FlowField predict(const RasterImage& image, const Curve& curve,
                    std::span<const Vec2> normals) const override;
  std::string name() const override { return "oracle"; }

 private:
  SignedDistanceMap sdm_;
};

/// Per-channel region means of the piecewise-constant model.
struct RegionMeans {
  std::vector<double> inside;
  std::vector<double> outside;
};

/// Inside mean over the mask and outside mean over the band 0 < phi <= 3.
/// Throws InvalidArgument for an empty mask, an empty band or mismatched extents.
RegionMeans estimate_means(const RasterImage& image, const BinaryMask& mask);

/// alpha * eta with alpha = |I(c) - mu_o|^2 - |I(c) - mu_i|^2 (bilinear,
/// replicate-padded samples): positive speeds grow the curve.
FlowField baseline_speed(const RasterImage& image, const Curve& curve, std::span<const Vec2> normals,
                         const RegionMeans& means);

class BaselinePredictor : public FlowPredictor {
 public:
  explicit BaselinePredictor(RegionMeans means);
  void check_image(const RasterImage& image) const override;
  FlowField predict(const RasterImage& image, const Curve& curve,
                    std::span<const Vec2> normals) const override;
  std::string name() const override { return "baseline"; }

 private:
  RegionMeans means_;
};

/// Debug wrapper: the inner prediction with the vector at `index` replaced
/// by `-magnitude` times the outer normal (an inverted outlier).
class SpikePredictor : public FlowPredictor {
 public:
  SpikePredictor(std::shared_ptr<const FlowPredictor> inner, std::size_t index, double magnitude);
  void check_image(const RasterImage& image) const override { inner_->check_image(image); }
  FlowField predict(const RasterImage& image, const Curve& curve,
                    std::span<const Vec2> normals) const override;
  std::string name() const override { return "spike(" + inner_->name() + ")"; }

 private:
  std::shared_ptr<const FlowPredictor> inner_;
  std::size_t index_;
  double magnitude_;
};

/// K_beta(s) = (1/L) (1 + L ((s/L)^2 - s/L + 1/6) / (2 beta)).
double sobolev_kernel_value(double s, double length, double beta);

/// Discrete weights K_beta(jL/K) * L/K, renormalised to unit sum.
/// Throws InvalidArgument unless K >= 2, L > 0 and beta > 0.
std::vector<double> sobolev_kernel(int count, double length, double beta);

/// Periodic convolution out_j = sum_k w[(j - k) mod K] flow_k with the
/// discrete kernel, computed in O(K) from running moment sums.
FlowField regularize_flow(std::span<const Vec2> flow, double length, double beta);

struct EvolutionConfig {
  int max_iterations = 300;
  /// Step size tau in pixels per unit speed.
  double step = 0.5;
  int points = 64;
  double beta = 0.01;
  /// Stop when the mean vertex displacement of an iteration drops below
  /// this. Smoothing slows high-frequency corrections by 1/n^2, so a larger
  /// threshold stops wavy contours before they reach the boundary.
  double epsilon = 0.005;
  int resample_every = 1;
  /// Curve length in kernel units. The default 4 pi^2 beta gives unit gain
  /// to translations and to the first Fourier mode (uniform expansion) and
  /// damps mode n by 1/n^2.
  double kernel_length = 4.0 * std::numbers::pi * std::numbers::pi * 0.01;
  /// Record per-iteration snapshots in the trace.
  bool record_trace = true;

  void validate() const;
};

nlohmann::json to_json(const EvolutionConfig& cfg);
EvolutionConfig evolution_config_from_json(const nlohmann::json& doc, EvolutionConfig base = {});

enum class Termination { Running, Converged, MaxIterations, Cancelled, Collapsed };
std::string to_string(Termination t);

struct EvolutionStep {
  int iteration;  // 1-based
  Curve curve;    // curve the flow was computed on
  FlowField raw;
  FlowField regularized;
  double mean_displacement;
};

struct EvolutionTrace {
  std::vector<EvolutionStep> steps;
  Termination termination = Termination::Running;
  int iterations = 0;
};

nlohmann::json to_json(const EvolutionTrace& trace, const std::optional<Curve>& final_curve = std::nullopt);

/// Raised when the contour shrinks below 4 px of length, turns inside out
/// or degenerates.
class CurveCollapsed : public Error {
 public:
  CurveCollapsed(const std::string& what, EvolutionTrace trace)
      : Error(what), trace_(std::move(trace)) {}
  const EvolutionTrace& trace() const { return trace_; }

 private:
  EvolutionTrace trace_;
};

/// True iff the mean distance between corresponding vertices is below
/// epsilon. Throws InvalidArgument when the vertex counts differ.
bool converged(const Curve& prev, const Curve& next, double epsilon);

/// Iteration state of one contour evolution; `step` advances by one
/// iteration so callers can interleave stepping with inspection. The image
/// and predictor must outlive the object.
class Evolution {
 public:
  Evolution(const RasterImage& image, const Curve& init, const FlowPredictor& predictor,
            EvolutionConfig cfg);

  /// Runs one iteration; returns false (doing nothing) once finished.
  /// Throws CurveCollapsed.
  bool step();
  /// Steps until finished or until `cancel` becomes true between iterations.
  void run(const std::atomic<bool>* cancel = nullptr);
  /// Marks a running evolution as cancelled.
  void cancel();

  bool finished() const { return trace_.termination != Termination::Running; }
  int iteration() const { return trace_.iterations; }
  const Curve& curve() const { return curve_; }
  const EvolutionTrace& trace() const { return trace_; }
  const EvolutionConfig& config() const { return cfg_; }
  /// Flow fields of the most recent iteration (empty before the first).
  const FlowField& last_raw() const { return last_raw_; }
  const FlowField& last_regularized() const { return last_regularized_; }
  /// Mean vertex displacement of the most recent iteration (0 before the first).
  double last_displacement() const { return last_displacement_; }

 private:
  const RasterImage& image_;
  const FlowPredictor& predictor_;
  EvolutionConfig cfg_;
  Curve curve_;
  EvolutionTrace trace_;
  FlowField last_raw_;
  FlowField last_regularized_;
  double last_displacement_ = 0.0;
};

struct EvolutionResult {
  Curve curve;
  EvolutionTrace trace;
};

/// Algorithm loop: resample to K points, then per iteration predict,
/// regularise, move each vertex by tau (nu . eta) eta, resample, test
/// convergence.
EvolutionResult evolve(const RasterImage& image, const Curve& init, const FlowPredictor& predictor,
                       const EvolutionConfig& cfg, const std::atomic<bool>* cancel = nullptr);

}  // namespace deepsnake
