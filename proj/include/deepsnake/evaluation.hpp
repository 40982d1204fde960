#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepsnake/flowengine.hpp"
#include "deepsnake/geometry.hpp"
#include "deepsnake/image.hpp"
#include "deepsnake/neuralflow.hpp"

namespace deepsnake {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
};

/// Pixel counts with gt as the reference. Throws InvalidArgument when the
/// extents differ.
ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& gt);

/// Ratios whose denominator is zero are left empty (undefined, not 0).
struct MetricsReport {
  std::optional<double> p;    // sensitivity
  std::optional<double> q;    // specificity
  std::optional<double> ppv;
  std::optional<double> npv;
  std::optional<double> j;    // Jaccard
  std::optional<double> d;    // Dice

  static constexpr std::array<const char*, 6> kNames{"p", "q", "PPV", "NPV", "J", "D"};
  std::array<std::optional<double>, 6> values() const { return {p, q, ppv, npv, j, d}; }
};

MetricsReport metrics(const ConfusionCounts& c);
nlohmann::json to_json(const MetricsReport& m);

inline constexpr std::array<double, 4> kAngleThresholds{5.0, 10.0, 45.0, 90.0};

/// Fractions of pairs whose unsigned angle is strictly below each threshold.
struct AngleErrorStats {
  std::array<double, 4> fraction{};
  std::size_t count = 0;
};

/// Unsigned angle in degrees between two vectors; a zero `pred` is 180.
double angle_between_deg(Vec2 pred, Vec2 gt);

/// Throws InvalidArgument for empty or unequal inputs or a zero gt vector.
AngleErrorStats angle_stats(std::span<const Vec2> pred, std::span<const Vec2> gt);
nlohmann::json to_json(const AngleErrorStats& s);

/// Unit-width bins centred on -16..16 plus an underflow bin (< -16.5) and an
/// overflow bin (>= 16.5). Bin k covers [k - 0.5, k + 0.5).
struct LengthErrorHistogram {
  static constexpr int kRange = 16;
  std::array<std::uint64_t, 2 * kRange + 1> bins{};
  std::uint64_t underflow = 0;
  std::uint64_t overflow = 0;

  std::uint64_t total() const;
  std::uint64_t count_at(int center) const { return bins.at(static_cast<std::size_t>(center + kRange)); }
  /// Share of all samples in the bins centred on -radius..radius.
  double mass_within(int radius) const;
};

/// Histogram of |pred| - |gt|. Throws InvalidArgument for unequal lengths.
LengthErrorHistogram signed_length_error(std::span<const Vec2> pred, std::span<const Vec2> gt);
void write_histogram_csv(const std::filesystem::path& path, const LengthErrorHistogram& h);
nlohmann::json to_json(const LengthErrorHistogram& h);

/// Amplitude min(0.12 min(dx, dy), 20) of the perturbation for this curve.
double perturbation_amplitude(const Curve& gt);

/// Moves each vertex along its outer normal by
/// gamma(s) = amplitude * r1 * sin(10 pi s r2 / L). Throws InvalidArgument
/// unless r1, r2 are in [0, 1].
Curve perturb_init(const Curve& gt, double r1, double r2);

struct VoteMap {
  int width = 0;
  int height = 0;
  std::vector<std::uint32_t> counts;
  std::uint64_t visited = 0;
  std::uint64_t out_of_image = 0;

  std::uint32_t at(int x, int y) const { return counts[static_cast<std::size_t>(y) * width + x]; }
  std::uint64_t total() const;
};

/// Normal angles of the four cardinal patch orientations.
inline constexpr std::array<double, 4> kCardinalAngles{-1.5707963267948966, 0.0, 1.5707963267948966,
                                                       -3.141592653589793};

/// For every pixel (x, y) with x, y multiples of `stride` and each cardinal
/// orientation, predicts a vector and votes for the pixel nearest to its
/// endpoint (ties toward negative infinity). Throws ChannelMismatch and
/// InvalidArgument for stride < 1.
VoteMap vote_map(const RasterImage& image, const FlowNet& net, int stride, double patch_scale = 1.0);

/// Counts as an 8-bit grayscale image scaled to the maximum count.
RasterImage vote_map_image(const VoteMap& map);

/// Boundary of the largest connected region of a mask as a closed curve (the
/// zero level line of its distance map). Throws InvalidArgument when the
/// mask has no closed boundary.
Curve mask_boundary(const BinaryMask& mask);

struct LabeledImage {
  std::string name;
  RasterImage image;
  BinaryMask mask;
};

/// Builds the predictor used on one fold from its training items.
using PredictorFactory =
    std::function<std::shared_ptr<const FlowPredictor>(std::span<const LabeledImage> train, int fold)>;

/// Predictor for one test case; used for the per-image baseline, whose
/// region means come from the test image's own ground truth.
using CasePredictorFactory =
    std::function<std::shared_ptr<const FlowPredictor>(const LabeledImage& test_item)>;

struct CrossvalConfig {
  int folds = 3;
  int inits_per_image = 10;
  EvolutionConfig evolution;
  std::uint64_t seed = 0;
  /// Worker threads over test cases; results do not depend on it.
  int threads = 1;
};

nlohmann::json to_json(const CrossvalConfig& cfg);

struct CaseResult {
  std::string image;
  int fold = 0;
  int init = 0;
  double r1 = 0.0;
  double r2 = 0.0;
  std::optional<MetricsReport> metrics;
  int iterations = 0;
  std::string termination;
  std::string error;
};

/// Mean and median of each metric over the cases where it is defined.
struct MetricSummary {
  std::array<std::optional<double>, 6> mean;
  std::array<std::optional<double>, 6> median;
  std::array<std::size_t, 6> defined{};
  std::array<std::size_t, 6> excluded{};
  std::size_t cases = 0;
  std::size_t failed = 0;
};

MetricSummary summarize(std::span<const CaseResult> cases);
nlohmann::json to_json(const MetricSummary& s);

struct CrossvalReport {
  std::vector<std::vector<std::size_t>> partitions;  // dataset indices per fold
  std::vector<CaseResult> cases;
  std::vector<MetricSummary> per_fold;
  MetricSummary overall;
};

/// Fold k holds the items at positions k, k + folds, ... of a seeded shuffle.
/// Throws InvalidArgument for folds < 2 or fewer items than folds.
std::vector<std::vector<std::size_t>> make_folds(std::size_t count, int folds, std::uint64_t seed);

/// Seeds of one evaluation case derived from the master seed.
std::uint64_t case_seed(std::uint64_t master, std::size_t item, int init);

/// Runs every test case (item, init) of every fold with a perturbed ground
/// truth start. Per-case evolution errors are recorded, not raised. Exactly
/// one of the factories is used: `per_fold` when set, else `per_case`.
CrossvalReport crossval(std::span<const LabeledImage> dataset, const CrossvalConfig& cfg,
                        const PredictorFactory& per_fold, const CasePredictorFactory& per_case = {});

/// Every item is a test item (one partition, `cfg.folds` ignored); for a
/// model trained elsewhere.
CrossvalReport evaluate_all(std::span<const LabeledImage> dataset, const CrossvalConfig& cfg,
                            const CasePredictorFactory& per_case);

nlohmann::json to_json(const CrossvalReport& r);

/// Aligned text tables: metric rows with mean and median columns.
std::string format_summary_table(const MetricSummary& s, const std::string& title);
std::string format_angle_table(const AngleErrorStats& s, const std::string& title);

/// Network predictions and ground-truth targets of a set of training pairs,
/// both in the patch frame; used for the angle and length error statistics.
struct FlowSamples {
  std::vector<Vec2> predicted;
  std::vector<Vec2> truth;
};
FlowSamples collect_flow_samples(std::span<const TrainingPair> pairs, const FlowNet& net);

/// The samples whose ground-truth vector is at least `min_length` long.
/// Directions of sub-pixel targets (points on the boundary itself) carry no
/// information, so angle statistics use this subset.
FlowSamples with_min_truth_length(const FlowSamples& samples, double min_length);

}  // namespace deepsnake
