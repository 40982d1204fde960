#include "deepsnake/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <thread>

#include "deepsnake/error.hpp"
#include "deepsnake/patchdata.hpp"

namespace deepsnake {

namespace {

std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.width() != gt.width() || pred.height() != gt.height()) {
    throw InvalidArgument("prediction and ground truth extents differ");
  }
  ConfusionCounts c;
  for (int y = 0; y < gt.height(); ++y) {
    for (int x = 0; x < gt.width(); ++x) {
      const bool p = pred.at(x, y);
      const bool g = gt.at(x, y);
      if (p && g) ++c.tp;
      else if (p) ++c.fp;
      else if (g) ++c.fn;
      else ++c.tn;
    }
  }
  return c;
}

MetricsReport metrics(const ConfusionCounts& c) {
  MetricsReport m;
  m.p = ratio(c.tp, c.tp + c.fn);
  m.q = ratio(c.tn, c.tn + c.fp);
  m.ppv = ratio(c.tp, c.tp + c.fp);
  m.npv = ratio(c.tn, c.tn + c.fn);
  m.j = ratio(c.tp, c.tp + c.fp + c.fn);
  m.d = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
  return m;
}

nlohmann::json to_json(const MetricsReport& m) {
  nlohmann::json doc = nlohmann::json::object();
  const auto values = m.values();
  for (std::size_t i = 0; i < values.size(); ++i) doc[MetricsReport::kNames[i]] = optional_json(values[i]);
  return doc;
}

double angle_between_deg(Vec2 pred, Vec2 gt) {
  const double np = norm(pred);
  const double ng = norm(gt);
  if (np == 0.0 || ng == 0.0) return 180.0;
  // atan2 keeps precision for nearly parallel vectors, where acos does not.
  return std::atan2(std::abs(cross(pred, gt)), dot(pred, gt)) * 180.0 / std::numbers::pi;
}

AngleErrorStats angle_stats(std::span<const Vec2> pred, std::span<const Vec2> gt) {
  if (pred.empty()) throw InvalidArgument("angle statistics need at least one vector pair");
  if (pred.size() != gt.size()) throw InvalidArgument("prediction and ground truth counts differ");
  AngleErrorStats s;
  s.count = pred.size();
  std::array<std::size_t, 4> below{};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (norm(gt[i]) == 0.0) throw InvalidArgument("ground-truth flow vector is zero");
    const double a = angle_between_deg(pred[i], gt[i]);
    for (std::size_t t = 0; t < kAngleThresholds.size(); ++t)
      if (a < kAngleThresholds[t]) ++below[t];
  }
  for (std::size_t t = 0; t < below.size(); ++t) s.fraction[t] = double(below[t]) / double(s.count);
  return s;
}

nlohmann::json to_json(const AngleErrorStats& s) {
  nlohmann::json doc{{"count", s.count}};
  for (std::size_t t = 0; t < kAngleThresholds.size(); ++t) {
    doc["below_" + std::to_string(static_cast<int>(kAngleThresholds[t])) + "deg"] = s.fraction[t];
  }
  return doc;
}

std::uint64_t LengthErrorHistogram::total() const {
  std::uint64_t t = underflow + overflow;
  for (auto b : bins) t += b;
  return t;
}

double LengthErrorHistogram::mass_within(int radius) const {
  const std::uint64_t all = total();
  if (all == 0) return 0.0;
  std::uint64_t inside = 0;
  for (int k = -std::min(radius, kRange); k <= std::min(radius, kRange); ++k) inside += count_at(k);
  return double(inside) / double(all);
}

LengthErrorHistogram signed_length_error(std::span<const Vec2> pred, std::span<const Vec2> gt) {
  if (pred.size() != gt.size()) throw InvalidArgument("prediction and ground truth counts differ");
  LengthErrorHistogram h;
  constexpr double edge = LengthErrorHistogram::kRange + 0.5;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = norm(pred[i]) - norm(gt[i]);
    if (e < -edge) {
      ++h.underflow;
    } else if (e >= edge) {
      ++h.overflow;
    } else {
      const auto k = static_cast<int>(std::floor(e + 0.5));
      ++h.bins[static_cast<std::size_t>(k + LengthErrorHistogram::kRange)];
    }
  }
  return h;
}

void write_histogram_csv(const std::filesystem::path& path, const LengthErrorHistogram& h) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "bin_center,count\n";
  out << "underflow," << h.underflow << "\n";
  for (int k = -LengthErrorHistogram::kRange; k <= LengthErrorHistogram::kRange; ++k) {
    out << k << "," << h.count_at(k) << "\n";
  }
  out << "overflow," << h.overflow << "\n";
}

nlohmann::json to_json(const LengthErrorHistogram& h) {
  nlohmann::json bins = nlohmann::json::array();
  for (int k = -LengthErrorHistogram::kRange; k <= LengthErrorHistogram::kRange; ++k) {
    bins.push_back({{"bin_center", k}, {"count", h.count_at(k)}});
  }
  return {{"bins", bins},
          {"underflow", h.underflow},
          {"overflow", h.overflow},
          {"total", h.total()},
          {"mass_within_2px", h.mass_within(2)}};
}

double perturbation_amplitude(const Curve& gt) {
  const BoundingBox box = bounding_box(gt);
  return std::min(0.12 * std::min(box.width(), box.height()), 20.0);
}

Curve perturb_init(const Curve& gt, double r1, double r2) {
  if (!(r1 >= 0.0 && r1 <= 1.0) || !(r2 >= 0.0 && r2 <= 1.0)) {
    throw InvalidArgument("perturbation parameters must lie in [0, 1]");
  }
  if (r1 == 0.0) return gt;
  const double amplitude = perturbation_amplitude(gt) * r1;
  const double length = curve_length(gt);
  const auto s = cumulative_arc_length(gt);
  const auto normals = outer_normals(gt);
  std::vector<Vec2> out(gt.size());
  for (std::size_t j = 0; j < gt.size(); ++j) {
    const double gamma = amplitude * std::sin(10.0 * std::numbers::pi * s[j] * r2 / length);
    out[j] = gt[j] + gamma * normals[j];
  }
  return Curve(std::move(out));
}

std::uint64_t VoteMap::total() const {
  std::uint64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

VoteMap vote_map(const RasterImage& image, const FlowNet& net, int stride, double patch_scale) {
  if (stride < 1) throw InvalidArgument("vote map stride must be at least 1");
  if (image.channels() != net.shape().in_channels) {
    throw ChannelMismatch("image has " + std::to_string(image.channels()) + " channels, network expects " +
                          std::to_string(net.shape().in_channels));
  }
  VoteMap map;
  map.width = image.width();
  map.height = image.height();
  map.counts.assign(static_cast<std::size_t>(map.width) * map.height, 0);
  for (int y = 0; y < image.height(); y += stride) {
    for (int x = 0; x < image.width(); x += stride) {
      ++map.visited;
      const Vec2 center{double(x), double(y)};
      for (double angle : kCardinalAngles) {
        const PatchFrame frame{center, angle, patch_scale};
        const Vec2 local = net.forward(sample_patch(image, frame, net.shape().input_size));
        const Vec2 end = center + patch_scale * local_to_world(angle, local);
        const double vx = std::ceil(end.x - 0.5);
        const double vy = std::ceil(end.y - 0.5);
        if (!(vx >= 0.0 && vy >= 0.0 && vx < map.width && vy < map.height)) {
          ++map.out_of_image;
          continue;
        }
        ++map.counts[static_cast<std::size_t>(vy) * map.width + static_cast<std::size_t>(vx)];
      }
    }
  }
  return map;
}

RasterImage vote_map_image(const VoteMap& map) {
  RasterImage out(map.width, map.height, 1);
  const std::uint32_t top = map.counts.empty() ? 0 : *std::max_element(map.counts.begin(), map.counts.end());
  if (top == 0) return out;
  for (int y = 0; y < map.height; ++y)
    for (int x = 0; x < map.width; ++x) out.at(x, y) = static_cast<float>(map.at(x, y)) / static_cast<float>(top);
  return out;
}

Curve mask_boundary(const BinaryMask& mask) {
  const std::size_t inside = mask.count();
  if (inside == 0 || inside == static_cast<std::size_t>(mask.width()) * mask.height()) {
    throw InvalidArgument("mask has no boundary");
  }
  auto lines = extract_level_lines(signed_distance_map(mask), 0.0, 0.0);
  const LevelLine* best = nullptr;
  double best_area = 0.0;
  for (const auto& line : lines) {
    const double area = std::abs(signed_area(line.curve.vertices()));
    if (!best || area > best_area) {
      best = &line;
      best_area = area;
    }
  }
  if (!best) throw InvalidArgument("mask boundary is not a closed curve inside the image");
  return best->curve;
}

nlohmann::json to_json(const CrossvalConfig& cfg) {
  return {{"folds", cfg.folds},
          {"inits_per_image", cfg.inits_per_image},
          {"evolution", to_json(cfg.evolution)},
          {"seed", cfg.seed},
          {"threads", cfg.threads}};
}

MetricSummary summarize(std::span<const CaseResult> cases) {
  MetricSummary s;
  s.cases = cases.size();
  std::array<std::vector<double>, 6> values;
  for (const auto& c : cases) {
    if (!c.metrics) {
      ++s.failed;
      continue;
    }
    const auto v = c.metrics->values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i]) values[i].push_back(*v[i]);
      else ++s.excluded[i];
    }
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto& v = values[i];
    s.defined[i] = v.size();
    if (v.empty()) continue;
    double total = 0.0;
    for (double x : v) total += x;
    s.mean[i] = total / double(v.size());
    std::sort(v.begin(), v.end());
    const std::size_t mid = v.size() / 2;
    s.median[i] = v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
  }
  return s;
}

nlohmann::json to_json(const MetricSummary& s) {
  nlohmann::json mean = nlohmann::json::object(), median = nlohmann::json::object(),
                 excluded = nlohmann::json::object();
  for (std::size_t i = 0; i < MetricsReport::kNames.size(); ++i) {
    mean[MetricsReport::kNames[i]] = optional_json(s.mean[i]);
    median[MetricsReport::kNames[i]] = optional_json(s.median[i]);
    excluded[MetricsReport::kNames[i]] = s.excluded[i];
  }
  return {{"cases", s.cases}, {"failed", s.failed}, {"mean", mean}, {"median", median}, {"excluded", excluded}};
}

std::vector<std::vector<std::size_t>> make_folds(std::size_t count, int folds, std::uint64_t seed) {
  if (folds < 2) throw InvalidArgument("cross-validation needs at least 2 folds");
  if (count < static_cast<std::size_t>(folds)) throw InvalidArgument("fewer items than folds");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(folds));
  for (std::size_t i = 0; i < count; ++i) out[i % static_cast<std::size_t>(folds)].push_back(order[i]);
  for (auto& f : out) std::sort(f.begin(), f.end());
  return out;
}

std::uint64_t case_seed(std::uint64_t master, std::size_t item, int init) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(item), static_cast<std::uint32_t>(init)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (std::uint64_t{out[0]} << 32) | out[1];
}

namespace {

struct CaseJob {
  std::size_t item;
  int fold;
  int init;
};

CaseResult run_case(const LabeledImage& item, const CaseJob& job, const CrossvalConfig& cfg,
                    const FlowPredictor& predictor) {
  CaseResult r;
  r.image = item.name;
  r.fold = job.fold;
  r.init = job.init;
  std::mt19937_64 rng(case_seed(cfg.seed, job.item, job.init));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  r.r1 = u(rng);
  r.r2 = u(rng);
  try {
    const Curve init = perturb_init(mask_boundary(item.mask), r.r1, r.r2);
    const auto result = evolve(item.image, init, predictor, cfg.evolution);
    r.iterations = result.trace.iterations;
    r.termination = to_string(result.trace.termination);
    r.metrics = metrics(confusion(rasterize(result.curve, item.mask.width(), item.mask.height()), item.mask));
  } catch (const CurveCollapsed& e) {
    // A collapsed contour segments nothing; it is scored as an empty mask.
    r.iterations = e.trace().iterations;
    r.termination = to_string(Termination::Collapsed);
    r.error = e.what();
    r.metrics = metrics(confusion(BinaryMask(item.mask.width(), item.mask.height()), item.mask));
  } catch (const Error& e) {
    r.termination = "error";
    r.error = e.what();
  }
  return r;
}

}  // namespace

namespace {

void check_crossval_config(const CrossvalConfig& cfg) {
  if (cfg.inits_per_image < 1) throw InvalidArgument("inits_per_image must be positive");
  if (cfg.threads < 1) throw InvalidArgument("threads must be positive");
  cfg.evolution.validate();
}

// Runs all (item, init) cases of the partitions and fills the summaries.
void run_partitions(std::span<const LabeledImage> dataset, const CrossvalConfig& cfg,
                    const std::vector<std::shared_ptr<const FlowPredictor>>& fold_predictors,
                    const CasePredictorFactory& per_case, CrossvalReport& report) {
  std::vector<CaseJob> jobs;
  for (std::size_t f = 0; f < report.partitions.size(); ++f)
    for (std::size_t i : report.partitions[f])
      for (int k = 0; k < cfg.inits_per_image; ++k) jobs.push_back({i, static_cast<int>(f), k});

  report.cases.resize(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t n = next++; n < jobs.size(); n = next++) {
      const CaseJob& job = jobs[n];
      const LabeledImage& item = dataset[job.item];
      const auto& shared = fold_predictors[static_cast<std::size_t>(job.fold)];
      const std::shared_ptr<const FlowPredictor> predictor = shared ? shared : per_case(item);
      report.cases[n] = run_case(item, job, cfg, *predictor);
    }
  };
  if (cfg.threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < cfg.threads; ++t) pool.emplace_back(worker);
  }

  report.per_fold.clear();
  for (std::size_t f = 0; f < report.partitions.size(); ++f) {
    std::vector<CaseResult> fold_cases;
    for (const auto& c : report.cases)
      if (c.fold == static_cast<int>(f)) fold_cases.push_back(c);
    report.per_fold.push_back(summarize(fold_cases));
  }
  report.overall = summarize(report.cases);
}

}  // namespace

CrossvalReport crossval(std::span<const LabeledImage> dataset, const CrossvalConfig& cfg,
                        const PredictorFactory& per_fold, const CasePredictorFactory& per_case) {
  if (!per_fold && !per_case) throw InvalidArgument("crossval needs a predictor factory");
  check_crossval_config(cfg);

  CrossvalReport report;
  report.partitions = make_folds(dataset.size(), cfg.folds, cfg.seed);
  std::vector<std::shared_ptr<const FlowPredictor>> fold_predictors(report.partitions.size());
  if (per_fold) {
    for (std::size_t f = 0; f < report.partitions.size(); ++f) {
      std::vector<LabeledImage> train;
      for (std::size_t g = 0; g < report.partitions.size(); ++g)
        if (g != f)
          for (std::size_t i : report.partitions[g]) train.push_back(dataset[i]);
      fold_predictors[f] = per_fold(train, static_cast<int>(f));
    }
  }
  run_partitions(dataset, cfg, fold_predictors, per_case, report);
  return report;
}

CrossvalReport evaluate_all(std::span<const LabeledImage> dataset, const CrossvalConfig& cfg,
                            const CasePredictorFactory& per_case) {
  if (!per_case) throw InvalidArgument("evaluate_all needs a predictor factory");
  if (dataset.empty()) throw InvalidArgument("nothing to evaluate");
  check_crossval_config(cfg);
  CrossvalReport report;
  report.partitions.emplace_back();
  for (std::size_t i = 0; i < dataset.size(); ++i) report.partitions[0].push_back(i);
  run_partitions(dataset, cfg, {nullptr}, per_case, report);
  return report;
}

nlohmann::json to_json(const CrossvalReport& r) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : r.cases) {
    cases.push_back({{"image", c.image},
                     {"fold", c.fold},
                     {"init", c.init},
                     {"r1", c.r1},
                     {"r2", c.r2},
                     {"metrics", c.metrics ? to_json(*c.metrics) : nlohmann::json(nullptr)},
                     {"iterations", c.iterations},
                     {"termination", c.termination},
                     {"error", c.error.empty() ? nlohmann::json(nullptr) : nlohmann::json(c.error)}});
  }
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& s : r.per_fold) folds.push_back(to_json(s));
  return {{"partitions", r.partitions}, {"per_fold", folds}, {"overall", to_json(r.overall)}, {"cases", cases}};
}

std::string format_summary_table(const MetricSummary& s, const std::string& title) {
  std::ostringstream out;
  auto cell = [](const std::optional<double>& v) {
    std::ostringstream c;
    if (v) c << std::fixed << std::setprecision(3) << *v;
    else c << "n/a";
    return c.str();
  };
  out << title << "\n";
  out << std::left << std::setw(8) << "metric" << std::right << std::setw(10) << "mean" << std::setw(10)
      << "median" << std::setw(10) << "excluded" << "\n";
  for (std::size_t i = 0; i < MetricsReport::kNames.size(); ++i) {
    out << std::left << std::setw(8) << MetricsReport::kNames[i] << std::right << std::setw(10) << cell(s.mean[i])
        << std::setw(10) << cell(s.median[i]) << std::setw(10) << s.excluded[i] << "\n";
  }
  out << "cases " << s.cases << ", failed " << s.failed << "\n";
  return out.str();
}

std::string format_angle_table(const AngleErrorStats& s, const std::string& title) {
  std::ostringstream out;
  out << title << "\n";
  for (double t : kAngleThresholds) out << std::setw(8) << ("<" + std::to_string(static_cast<int>(t)) + "deg");
  out << "\n";
  for (double f : s.fraction) out << std::setw(7) << std::fixed << std::setprecision(1) << 100.0 * f << "%";
  out << "\n" << "vectors " << s.count << "\n";
  return out.str();
}

FlowSamples collect_flow_samples(std::span<const TrainingPair> pairs, const FlowNet& net) {
  FlowSamples s;
  s.predicted.reserve(pairs.size());
  s.truth.reserve(pairs.size());
  for (const auto& pair : pairs) {
    s.predicted.push_back(net.forward(pair.patch));
    s.truth.push_back(pair.target);
  }
  return s;
}

FlowSamples with_min_truth_length(const FlowSamples& samples, double min_length) {
  FlowSamples out;
  for (std::size_t i = 0; i < samples.truth.size(); ++i) {
    if (norm(samples.truth[i]) < min_length) continue;
    out.predicted.push_back(samples.predicted[i]);
    out.truth.push_back(samples.truth[i]);
  }
  return out;
}

}  // namespace deepsnake
