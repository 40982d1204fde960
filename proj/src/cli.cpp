#include "deepsnake/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <random>

#include "deepsnake/error.hpp"
#include "deepsnake/evaluation.hpp"
#include "deepsnake/flowengine.hpp"
#include "deepsnake/image_io.hpp"
#include "deepsnake/neuralflow.hpp"
#include "deepsnake/patchdata.hpp"
#include "deepsnake/server.hpp"
#include "deepsnake/synthetic.hpp"

namespace deepsnake {

namespace {

namespace fs = std::filesystem;

void write_json(const fs::path& path, const nlohmann::json& doc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << doc.dump(2) << "\n";
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": malformed JSON: " + e.what());
  }
}

void add_gen_options(CLI::App& app, GenConfig& gen) {
  app.add_option("--scales", gen.scales, "image rescale factors")->capture_default_str();
  app.add_option("--level-lo", gen.level_lo, "lowest distance level line")->capture_default_str();
  app.add_option("--level-hi", gen.level_hi, "highest distance level line")->capture_default_str();
  app.add_option("--spacing-divisor", gen.spacing_divisor, "one sample per this many px of level line")
      ->capture_default_str();
  app.add_flag("--augment", gen.augment, "rotate and bias patches");
  app.add_option("--max-rotation", gen.max_rotation, "augmentation rotation bound (rad)")->capture_default_str();
  app.add_option("--max-bias", gen.max_bias, "augmentation intensity bias bound")->capture_default_str();
  app.add_option("--max-landing-error", gen.max_landing_error, "drop targets ending this far from the boundary")
      ->capture_default_str();
  app.add_option("--patch-size", gen.patch_size, "patch side in px")->capture_default_str();
}

void add_train_options(CLI::App& app, TrainConfig& cfg, NetShape& shape) {
  app.add_option("--epochs", cfg.epochs)->capture_default_str();
  app.add_option("--batch-size", cfg.batch_size)->capture_default_str();
  app.add_option("--learning-rate", cfg.learning_rate)->capture_default_str();
  app.add_option("--momentum", cfg.momentum)->capture_default_str();
  app.add_option("--validation-fraction", cfg.validation_fraction)->capture_default_str();
  app.add_option("--widths", shape.widths, "channels of the four conv blocks");
  app.add_option("--hidden", shape.hidden, "hidden layer width")->capture_default_str();
}

void add_evolution_options(CLI::App& app, EvolutionConfig& cfg) {
  app.add_option("--max-iterations", cfg.max_iterations, "N")->capture_default_str();
  app.add_option("--step", cfg.step, "tau (px)")->capture_default_str();
  app.add_option("--points", cfg.points, "K")->capture_default_str();
  app.add_option("--beta", cfg.beta)->capture_default_str();
  app.add_option("--epsilon", cfg.epsilon, "convergence threshold (px)")->capture_default_str();
  app.add_option("--resample-every", cfg.resample_every)->capture_default_str();
  app.add_option("--kernel-length", cfg.kernel_length)->capture_default_str();
}

std::vector<LabeledImage> load_labeled(const fs::path& dir, std::ostream& err) {
  std::vector<std::string> unmatched;
  const auto pairs = find_pairs(dir, &unmatched);
  for (const auto& name : unmatched) err << "skipping " << name << ": no matching _mask file\n";
  std::vector<LabeledImage> out;
  for (const auto& p : pairs) {
    try {
      LabeledImage item{p.name, read_image(p.image), read_mask(p.mask)};
      if (item.image.width() != item.mask.width() || item.image.height() != item.mask.height()) {
        err << "skipping " << p.name << ": image " << item.image.width() << "x" << item.image.height()
            << " but mask " << item.mask.width() << "x" << item.mask.height() << "\n";
        continue;
      }
      out.push_back(std::move(item));
    } catch (const Error& e) {
      err << "skipping " << p.name << ": " << e.what() << "\n";
    }
  }
  return out;
}

std::vector<TrainingPair> pairs_for(std::span<const LabeledImage> items, const GenConfig& gen, std::uint64_t seed,
                                    std::ostream& err) {
  std::mt19937_64 rng(seed);
  std::vector<TrainingPair> out;
  for (const auto& item : items) {
    try {
      auto pairs = generate_training_set(item.image, item.mask, gen, rng);
      out.insert(out.end(), std::make_move_iterator(pairs.begin()), std::make_move_iterator(pairs.end()));
    } catch (const InvalidArgument& e) {
      err << "skipping " << item.name << ": " << e.what() << "\n";
    }
  }
  return out;
}

TrainResult train_logged(std::span<const TrainingPair> data, const TrainConfig& cfg, const NetShape& shape,
                         std::ostream& out) {
  return train(data, cfg, shape, [&](const EpochStats& s, const FlowNet&) {
    out << "epoch " << s.epoch << "/" << cfg.epochs << "  train " << s.train_loss << "  val " << s.val_loss
        << std::endl;
  });
}

int cmd_synth(const fs::path& out_dir, const SynthConfig& cfg, std::ostream& out) {
  cfg.validate();
  write_corpus(out_dir, synth_corpus(cfg), cfg);
  out << "wrote " << cfg.count << " image/mask pairs to " << out_dir.string() << "\n";
  return kExitOk;
}

int cmd_gen_data(const fs::path& input, const fs::path& out_dir, const GenConfig& gen, std::ostream& out,
                 std::ostream& err) {
  const auto items = load_labeled(input, err);
  if (items.empty()) {
    err << "found 0 usable image/mask pairs in " << input.string() << "\n";
    return kExitFailure;
  }
  std::vector<LabeledImage> usable;
  for (const auto& item : items) {
    if (item.image.channels() != items.front().image.channels()) {
      err << "skipping " << item.name << ": " << item.image.channels() << " channels, expected "
          << items.front().image.channels() << "\n";
      continue;
    }
    usable.push_back(item);
  }
  const auto pairs = pairs_for(usable, gen, gen.seed, err);
  if (pairs.empty()) {
    err << "no training pairs generated\n";
    return kExitFailure;
  }
  nlohmann::json sources = nlohmann::json::array();
  for (const auto& item : usable) sources.push_back(item.name);
  TrainingSetInfo info;
  info.count = pairs.size();
  info.channels = pairs.front().patch.channels;
  info.patch_size = gen.patch_size;
  info.seed = gen.seed;
  info.config = {{"gen", to_json(gen)}, {"sources", sources}};
  write_training_set(out_dir, pairs, info);
  out << nlohmann::json{{"count", pairs.size()}, {"images", usable.size()}, {"seed", gen.seed}, {"config", to_json(gen)}}
             .dump(2)
      << "\n";
  return kExitOk;
}

int cmd_train(const fs::path& data, const fs::path& weights, fs::path history, const TrainConfig& cfg,
              const NetShape& base_shape, std::ostream& out) {
  TrainingSetInfo info;
  const auto pairs = read_training_set(data, &info);
  NetShape shape = base_shape;
  shape.in_channels = info.channels;
  shape.input_size = info.patch_size;
  out << "training on " << pairs.size() << " pairs, " << shape.parameter_count() << " parameters\n";
  const auto result = train_logged(pairs, cfg, shape, out);
  if (weights.has_parent_path()) fs::create_directories(weights.parent_path());
  save_weights(result.net, weights);
  if (history.empty()) history = fs::path(weights.string() + ".history.csv");
  write_history_csv(history, result.history);
  out << "best epoch " << result.best_epoch << " (val " << result.history[static_cast<std::size_t>(result.best_epoch - 1)].val_loss
      << "); weights " << weights.string() << ", history " << history.string() << "\n";
  return kExitOk;
}

struct SegmentArgs {
  fs::path image, init, init_from_mask, model, sdm_from, mu_from_gt, out, trace, mask_out;
  std::string predictor = "cnn";
  std::vector<double> perturb;
  double patch_scale = 1.0;
  EvolutionConfig evolution;
};

std::shared_ptr<const FlowPredictor> build_predictor(const SegmentArgs& a, const RasterImage& image) {
  if (a.predictor == "cnn") {
    if (a.model.empty()) throw InvalidArgument("--predictor cnn needs --model");
    return std::make_shared<CnnPredictor>(std::make_shared<const FlowNet>(load_weights(a.model)), a.patch_scale);
  }
  auto gt = [&](const fs::path& p, const char* flag) {
    if (p.empty()) throw InvalidArgument(std::string("--predictor ") + a.predictor + " needs " + flag);
    const BinaryMask m = read_mask(p);
    if (m.width() != image.width() || m.height() != image.height()) {
      throw InvalidArgument("mask " + p.string() + " does not match the image extents");
    }
    return m;
  };
  if (a.predictor == "oracle") return std::make_shared<OracleSdmPredictor>(signed_distance_map(gt(a.sdm_from, "--sdm-from")));
  if (a.predictor == "baseline") return std::make_shared<BaselinePredictor>(estimate_means(image, gt(a.mu_from_gt, "--mu-from-gt")));
  throw InvalidArgument("unknown predictor " + a.predictor);
}

int cmd_segment(const SegmentArgs& a, std::ostream& out, std::ostream& err) {
  const RasterImage image = read_image(a.image);
  Curve init = [&] {
    if (!a.init.empty()) return curve_from_json(read_json(a.init));
    if (!a.init_from_mask.empty()) {
      Curve c = mask_boundary(read_mask(a.init_from_mask));
      if (a.perturb.size() == 2) c = perturb_init(c, a.perturb[0], a.perturb[1]);
      return c;
    }
    throw InvalidArgument("give --init or --init-from-mask");
  }();
  const auto predictor = build_predictor(a, image);
  predictor->check_image(image);
  try {
    const auto result = evolve(image, init, *predictor, a.evolution);
    nlohmann::json doc = curve_to_json(result.curve);
    doc["iterations"] = result.trace.iterations;
    doc["termination"] = to_string(result.trace.termination);
    if (a.out.empty()) out << doc.dump(2) << "\n";
    else write_json(a.out, doc);
    if (!a.trace.empty()) write_json(a.trace, to_json(result.trace, result.curve));
    if (!a.mask_out.empty()) write_mask(a.mask_out, rasterize(result.curve, image.width(), image.height()));
    err << "finished: " << to_string(result.trace.termination) << " after " << result.trace.iterations
        << " iterations\n";
    return kExitOk;
  } catch (const CurveCollapsed& e) {
    if (!a.trace.empty()) write_json(a.trace, to_json(e.trace()));
    err << e.what() << "\n";
    return kExitCollapsed;
  }
}

struct EvaluateArgs {
  fs::path data, model, out;
  bool crossval = false;
  bool baseline = true;
  CrossvalConfig cv;
  GenConfig gen;
  TrainConfig train;
  NetShape shape;
};

int cmd_evaluate(EvaluateArgs a, std::ostream& out, std::ostream& err) {
  const auto dataset = load_labeled(a.data, err);
  if (dataset.empty()) {
    err << "found 0 usable image/mask pairs in " << a.data.string() << "\n";
    return kExitFailure;
  }
  if (!a.crossval && a.model.empty()) throw InvalidArgument("give --model or --crossval");

  // Network used for each dataset item (its fold's network under crossval).
  std::vector<std::shared_ptr<const FlowNet>> net_of(dataset.size());
  CrossvalReport learned;
  if (a.crossval) {
    std::vector<std::shared_ptr<const FlowNet>> fold_nets;
    learned = crossval(
        dataset, a.cv,
        [&](std::span<const LabeledImage> train_items, int fold) -> std::shared_ptr<const FlowPredictor> {
          const auto pairs = pairs_for(train_items, a.gen, a.gen.seed + static_cast<std::uint64_t>(fold), err);
          NetShape shape = a.shape;
          shape.in_channels = dataset.front().image.channels();
          shape.input_size = a.gen.patch_size;
          out << "fold " << fold << ": training on " << pairs.size() << " pairs\n";
          auto net = std::make_shared<const FlowNet>(train_logged(pairs, a.train, shape, out).net);
          fold_nets.push_back(net);
          return std::make_shared<CnnPredictor>(net);
        });
    for (std::size_t f = 0; f < learned.partitions.size(); ++f)
      for (std::size_t i : learned.partitions[f]) net_of[i] = fold_nets[f];
  } else {
    const auto net = std::make_shared<const FlowNet>(load_weights(a.model));
    const auto predictor = std::make_shared<CnnPredictor>(net);
    for (auto& n : net_of) n = net;
    learned = evaluate_all(dataset, a.cv, [&](const LabeledImage&) { return predictor; });
  }

  FlowSamples samples;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto pairs = pairs_for(std::span(&dataset[i], 1), a.gen, a.gen.seed, err);
    const auto s = collect_flow_samples(pairs, *net_of[i]);
    samples.predicted.insert(samples.predicted.end(), s.predicted.begin(), s.predicted.end());
    samples.truth.insert(samples.truth.end(), s.truth.begin(), s.truth.end());
  }
  const auto directional = with_min_truth_length(samples, 0.5);
  const AngleErrorStats angles = angle_stats(directional.predicted, directional.truth);
  const LengthErrorHistogram lengths = signed_length_error(samples.predicted, samples.truth);

  nlohmann::json report{{"mode", a.crossval ? "crossval" : "model"},
                        {"config", to_json(a.cv)},
                        {"flow", {{"angles", to_json(angles)}, {"length_error", to_json(lengths)}}},
                        {"learned", to_json(learned)}};
  std::string text = format_angle_table(angles, "Flow direction error (share of vectors)") + "\n" +
                     format_summary_table(learned.overall, "Segmentation, learned flow");
  if (a.baseline) {
    const auto baseline = evaluate_all(dataset, a.cv, [](const LabeledImage& item) -> std::shared_ptr<const FlowPredictor> {
      return std::make_shared<BaselinePredictor>(estimate_means(item.image, item.mask));
    });
    report["baseline"] = to_json(baseline);
    text += "\n" + format_summary_table(baseline.overall, "Segmentation, piecewise-constant baseline (GT means)");
  }
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_json(a.out / "report.json", report);
    std::ofstream(a.out / "report.txt") << text;
    write_histogram_csv(a.out / "length_error.csv", lengths);
  }
  out << text;
  return kExitOk;
}

int cmd_votemap(const fs::path& image_path, const fs::path& model, int stride, const fs::path& png,
                const fs::path& counts, std::ostream& out) {
  const RasterImage image = read_image(image_path);
  const FlowNet net = load_weights(model);
  const VoteMap map = vote_map(image, net, stride);
  std::uint32_t top = 0;
  for (auto c : map.counts) top = std::max(top, c);
  RasterImage shade(map.width, map.height, 1);
  if (top > 0) {
    for (int y = 0; y < map.height; ++y)
      for (int x = 0; x < map.width; ++x)
        shade.at(x, y) = static_cast<float>(std::log1p(double(map.at(x, y))) / std::log1p(double(top)));
  }
  write_image(png, shade);
  if (!counts.empty()) {
    write_json(counts, {{"width", map.width},
                        {"height", map.height},
                        {"stride", stride},
                        {"visited", map.visited},
                        {"out_of_image", map.out_of_image},
                        {"total", map.total()},
                        {"counts", map.counts}});
  }
  out << "votes " << map.total() << ", out of image " << map.out_of_image << ", positions " << map.visited << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Deep active contours: data generation, training, segmentation and evaluation", "deepsnake"};
  app.set_config("--config", "", "TOML/INI file with option values; command-line flags override it");
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "write the built-in synthetic shape corpus");
  fs::path synth_out;
  SynthConfig synth_cfg;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--count", synth_cfg.count)->capture_default_str();
  synth->add_option("--size", synth_cfg.size)->capture_default_str();
  synth->add_option("--seed", synth_cfg.seed)->capture_default_str();
  synth->add_option("--min-radius", synth_cfg.min_radius)->capture_default_str();
  synth->add_option("--max-radius", synth_cfg.max_radius)->capture_default_str();
  synth->add_option("--min-contrast", synth_cfg.min_contrast)->capture_default_str();
  synth->add_option("--texture-amplitude", synth_cfg.texture_amplitude)->capture_default_str();
  synth->add_option("--gradient-amplitude", synth_cfg.gradient_amplitude)->capture_default_str();
  synth->add_option("--noise-sigma", synth_cfg.noise_sigma)->capture_default_str();

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "extract training pairs from image/mask pairs");
  fs::path gen_in, gen_out;
  GenConfig gen_cfg;
  gen->add_option("--input", gen_in, "directory of <name>.png and <name>_mask.png")->required();
  gen->add_option("--out", gen_out, "training set directory")->required();
  gen->add_option("--seed", gen_cfg.seed)->capture_default_str();
  add_gen_options(*gen, gen_cfg);

  // train
  auto* tr = app.add_subcommand("train", "train the flow network");
  fs::path tr_data, tr_out, tr_history;
  TrainConfig tr_cfg;
  NetShape tr_shape;
  bool resume = false;
  tr->add_option("--data", tr_data, "training set directory")->required();
  tr->add_option("--out", tr_out, "weight file to write")->required();
  tr->add_option("--history", tr_history, "history CSV (default <out>.history.csv)");
  tr->add_option("--seed", tr_cfg.seed)->capture_default_str();
  tr->add_flag("--resume", resume, "not supported");
  add_train_options(*tr, tr_cfg, tr_shape);

  // segment
  auto* seg = app.add_subcommand("segment", "evolve a contour on an image");
  SegmentArgs seg_args;
  seg->add_option("--image", seg_args.image)->required();
  seg->add_option("--init", seg_args.init, "initial contour JSON");
  seg->add_option("--init-from-mask", seg_args.init_from_mask, "start from the boundary of this mask");
  seg->add_option("--perturb", seg_args.perturb, "r1 r2 of the random start perturbation")->expected(2);
  seg->add_option("--predictor", seg_args.predictor)
      ->check(CLI::IsMember({"cnn", "oracle", "baseline"}))
      ->capture_default_str();
  seg->add_option("--model", seg_args.model, "weight file for --predictor cnn");
  seg->add_option("--patch-scale", seg_args.patch_scale)->capture_default_str();
  seg->add_option("--sdm-from", seg_args.sdm_from, "ground-truth mask for --predictor oracle");
  seg->add_option("--mu-from-gt", seg_args.mu_from_gt, "ground-truth mask for --predictor baseline");
  seg->add_option("--out", seg_args.out, "final contour JSON (default stdout)");
  seg->add_option("--trace", seg_args.trace, "evolution trace JSON");
  seg->add_option("--mask-out", seg_args.mask_out, "rasterised final contour PNG");
  add_evolution_options(*seg, seg_args.evolution);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "flow and segmentation reports");
  EvaluateArgs ev_args;
  ev->add_option("--data", ev_args.data, "directory of image/mask pairs")->required();
  ev->add_option("--model", ev_args.model, "trained weights to evaluate");
  ev->add_flag("--crossval", ev_args.crossval, "retrain per fold instead of using --model");
  ev->add_option("--out", ev_args.out, "report directory");
  ev->add_option("--folds", ev_args.cv.folds)->capture_default_str();
  ev->add_option("--inits", ev_args.cv.inits_per_image, "perturbed starts per image")->capture_default_str();
  ev->add_option("--threads", ev_args.cv.threads)->capture_default_str();
  ev->add_option("--seed", ev_args.cv.seed)->capture_default_str();
  ev->add_flag("!--no-baseline", ev_args.baseline, "skip the piecewise-constant baseline");
  add_evolution_options(*ev, ev_args.cv.evolution);
  add_gen_options(*ev, ev_args.gen);
  add_train_options(*ev, ev_args.train, ev_args.shape);

  // votemap
  auto* vm = app.add_subcommand("votemap", "accumulate predicted boundary votes");
  fs::path vm_image, vm_model, vm_out, vm_counts;
  int vm_stride = 1;
  vm->add_option("--image", vm_image)->required();
  vm->add_option("--model", vm_model)->required();
  vm->add_option("--stride", vm_stride)->capture_default_str();
  vm->add_option("--out", vm_out, "vote map PNG (log-scaled)")->required();
  vm->add_option("--counts", vm_counts, "raw counts JSON");

  // serve
  auto* sv = app.add_subcommand("serve", "HTTP session API");
  ServerConfig sv_cfg;
  sv->add_option("--host", sv_cfg.host)->capture_default_str();
  sv->add_option("--port", sv_cfg.port)->capture_default_str();
  sv->add_option("--models", sv_cfg.models_dir, "directory of *.weights files")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(synth_out, synth_cfg, out);
    if (*gen) return cmd_gen_data(gen_in, gen_out, gen_cfg, out, err);
    if (*tr) {
      if (resume) {
        err << "error: --resume is not supported; training always starts from a fresh initialisation\n";
        return kExitUsage;
      }
      return cmd_train(tr_data, tr_out, tr_history, tr_cfg, tr_shape, out);
    }
    if (*seg) return cmd_segment(seg_args, out, err);
    if (*ev) return cmd_evaluate(ev_args, out, err);
    if (*vm) return cmd_votemap(vm_image, vm_model, vm_stride, vm_out, vm_counts, out);
    if (*sv) {
      SessionServer server(sv_cfg);
      out << "serving on http://" << sv_cfg.host << ":" << sv_cfg.port << std::endl;
      server.listen();
      return kExitOk;
    }
  } catch (const TrainingDiverged& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace deepsnake
