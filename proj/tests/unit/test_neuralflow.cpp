#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "deepsnake/error.hpp"
#include "deepsnake/neuralflow.hpp"
#include "support/oracles.hpp"

using namespace deepsnake;

namespace {

// Small variant used where the full architecture would only cost time.
NetShape small_shape(int channels = 1) {
  NetShape s;
  s.in_channels = channels;
  s.widths = {4, 8, 8, 16};
  s.input_size = 64;
  s.hidden = 64;
  return s;
}

Patch random_patch(int channels, int size, std::mt19937& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Patch p;
  p.size = size;
  p.channels = channels;
  p.samples.resize(static_cast<std::size_t>(channels) * size * size);
  for (float& v : p.samples) v = u(rng);
  return p;
}

std::vector<TrainingPair> disk_pairs(std::size_t count, std::uint64_t seed, double max_level = 15) {
  const BinaryMask disk = oracle::disk_mask(128, 128, {62, 66}, 30);
  GenConfig cfg;
  cfg.scales = {1.0};
  cfg.level_lo = -max_level;
  cfg.level_hi = max_level;
  std::mt19937_64 rng(seed);
  RasterImage image = to_image(disk);
  std::mt19937 noise(static_cast<std::uint32_t>(seed));
  std::normal_distribution<float> n(0.0f, 0.05f);
  for (float& v : image.samples()) v = std::clamp(0.3f + 0.4f * v + n(noise), 0.0f, 1.0f);
  auto pairs = generate_training_set(image, disk, cfg, rng);
  std::shuffle(pairs.begin(), pairs.end(), rng);
  REQUIRE(pairs.size() >= count);
  pairs.resize(count);
  return pairs;
}

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b));
}

}  // namespace

TEST_CASE("l2_loss") {
  CHECK(l2_loss({1.5, -2}, {1.5, -2}) == 0.0);
  CHECK(l2_loss({1, 0}, {0, 0}) == 1.0);
  CHECK(l2_loss({3, 4}, {0, 0}) == 25.0);
}

TEST_CASE("architecture") {
  const NetShape s{3, {32, 64, 128, 256}, 64, 2048};
  CHECK(s.feature_size() == 4 * 4 * 256);
  const std::size_t conv = (3 * 9 * 32 + 32) + (32 * 9 * 64 + 64) + (64 * 9 * 128 + 128) + (128 * 9 * 256 + 256);
  CHECK(s.parameter_count() == conv + 4096 * 2048 + 2048 + 2048 * 2 + 2);

  FlowNet net(s);
  CHECK(net.parameters().size() == s.parameter_count());
  SUBCASE("zero weights give a zero output") {
    std::mt19937 rng(1);
    const Vec2 out = net.forward(random_patch(3, 64, rng));
    CHECK(out.x == 0.0);
    CHECK(out.y == 0.0);
  }
  SUBCASE("feature extents halve per block") {
    net.init_he(3);
    std::mt19937 rng(2);
    const Patch p = random_patch(3, 64, rng);
    std::vector<float> x(p.samples);
    int side = 64;
    for (int block = 0; block < 4; ++block) {
      const auto z = net.conv_block(block, x, side);
      CHECK(z.size() == static_cast<std::size_t>(s.widths[static_cast<std::size_t>(block)]) * side * side);
      // 2x2 max-pool by hand for the next block.
      const int half = side / 2;
      const int c_out = s.widths[static_cast<std::size_t>(block)];
      x.assign(static_cast<std::size_t>(c_out) * half * half, 0.0f);
      for (int c = 0; c < c_out; ++c)
        for (int y = 0; y < half; ++y)
          for (int xx = 0; xx < half; ++xx) {
            float m = -1.0f;
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx)
                m = std::max(m, z[(static_cast<std::size_t>(c) * side + 2 * y + dy) * side + 2 * xx + dx]);
            x[(static_cast<std::size_t>(c) * half + y) * half + xx] = m;
          }
      side = half;
    }
    CHECK(side == 4);
    CHECK(x.size() == 4096u);
    const Vec2 out = net.forward(p);
    CHECK(std::isfinite(out.x));
    CHECK(std::isfinite(out.y));
  }
  SUBCASE("channel and size mismatch") {
    std::mt19937 rng(1);
    CHECK_THROWS_AS(net.forward(random_patch(1, 64, rng)), ChannelMismatch);
    CHECK_THROWS_AS(net.forward(random_patch(3, 32, rng)), InvalidArgument);
  }
}

TEST_CASE("forward is deterministic and batch independent") {
  FlowNet net(small_shape(3));
  net.init_he(11);
  std::mt19937 rng(4);
  std::vector<Patch> patches;
  for (int i = 0; i < 7; ++i) patches.push_back(random_patch(3, 64, rng));

  const auto all = net.forward(patches);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    CHECK(net.forward(patches[i]) == all[i]);
    const auto pair = net.forward(std::span(patches).subspan(i / 2 * 2, std::min<std::size_t>(2, patches.size() - i / 2 * 2)));
    CHECK(pair[i % 2] == all[i]);
  }
  FlowNet again(small_shape(3));
  again.init_he(11);
  CHECK(again.forward(patches) == all);
}

TEST_CASE("translation covariance of conv blocks") {
  ConvNet<double> net(NetShape{2, {5, 6, 7, 8}, 32, 16});
  net.init_he(5);
  for (std::size_t i = net.layer(0).bias_offset; i < net.layer(0).bias_offset + 5; ++i) net.parameters()[i] = 0.1;

  // Periodic input with period 8; shifting by 2 px.
  auto pattern = [](int c, int x, int y) {
    return 0.5 + 0.3 * std::sin(2 * std::numbers::pi * (x + 2 * c) / 8.0) * std::cos(2 * std::numbers::pi * y / 8.0);
  };
  const int side = 32;
  for (int block : {0, 1}) {
    const int channels = block == 0 ? 2 : 5;
    std::vector<double> a(static_cast<std::size_t>(channels) * side * side), b(a.size());
    for (int c = 0; c < channels; ++c)
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
          a[(static_cast<std::size_t>(c) * side + y) * side + x] = pattern(c, x, y);
          b[(static_cast<std::size_t>(c) * side + y) * side + x] = pattern(c, x - 2, y - 2);
        }
    const auto fa = net.conv_block(block, a, side);
    const auto fb = net.conv_block(block, b, side);
    const int outputs = net.layer(block).outputs;
    double worst = 0.0;
    for (int c = 0; c < outputs; ++c)
      for (int y = 3; y < side - 1; ++y)
        for (int x = 3; x < side - 1; ++x)
          worst = std::max(worst, std::abs(fb[(static_cast<std::size_t>(c) * side + y) * side + x] -
                                           fa[(static_cast<std::size_t>(c) * side + y - 2) * side + x - 2]));
    CHECK(worst <= 1e-12);
  }
}

TEST_CASE("gradient") {
  // Reduced network: 2 input channels, 16x16 input, hidden 128.
  const NetShape shape{2, {3, 4, 5, 6}, 16, 128};
  ConvNet<double> net(shape);
  net.init_he(21);
  std::mt19937 rng(8);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  for (int k = 0; k < ConvNet<double>::kLayers; ++k) {
    const LayerSlice L = net.layer(k);
    for (std::size_t i = 0; i < L.bias_count; ++i) net.parameters()[L.bias_offset + i] = u(rng);
  }
  const int batch = 3;
  std::vector<double> inputs(batch * net.input_length());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (double& v : inputs) v = unit(rng);
  const std::vector<Vec2> targets{{1.0, -2.0}, {-0.5, 3.0}, {0.25, 0.5}};

  std::vector<double> grad(net.parameters().size());
  const double loss = net.loss_and_gradient(inputs, targets, grad);
  CHECK(loss == doctest::Approx(net.loss(inputs, targets)).epsilon(1e-12));

  SUBCASE("central finite differences agree for every layer type") {
    auto check_range = [&](std::size_t begin, std::size_t end, std::size_t samples) {
      std::vector<std::size_t> idx(end - begin);
      std::iota(idx.begin(), idx.end(), begin);
      std::shuffle(idx.begin(), idx.end(), rng);
      if (idx.size() > samples) idx.resize(samples);
      double worst = 0.0;
      const double eps = 1e-4;
      for (std::size_t i : idx) {
        double& w = net.parameters()[i];
        const double saved = w;
        w = saved + eps;
        const double up = net.loss(inputs, targets);
        w = saved - eps;
        const double down = net.loss(inputs, targets);
        w = saved;
        worst = std::max(worst, relative_error(grad[i], (up - down) / (2 * eps)));
      }
      return std::pair{worst, idx.size()};
    };
    const auto conv = check_range(0, net.layer(3).bias_offset + net.layer(3).bias_count, 400);
    const auto hidden = check_range(net.layer(4).weight_offset, net.layer(4).bias_offset + net.layer(4).bias_count, 300);
    const auto out = check_range(net.layer(5).weight_offset, net.parameters().size(), 300);
    CHECK(conv.second >= 200);
    CHECK(hidden.second >= 200);
    CHECK(out.second >= 200);
    CHECK(conv.first < 1e-4);
    CHECK(hidden.first < 1e-4);
    CHECK(out.first < 1e-4);
  }
  SUBCASE("output bias gradient is the mean residual times two") {
    Vec2 expected;
    for (int i = 0; i < batch; ++i) {
      const auto pred = net.forward(std::span<const double>(inputs).subspan(i * net.input_length(), net.input_length()));
      expected += (2.0 / batch) * (Vec2{pred[0], pred[1]} - targets[static_cast<std::size_t>(i)]);
    }
    const std::size_t b = net.layer(5).bias_offset;
    CHECK(grad[b] == doctest::Approx(expected.x).epsilon(1e-12));
    CHECK(grad[b + 1] == doctest::Approx(expected.y).epsilon(1e-12));
  }
  SUBCASE("zero-loss batch has zero gradient") {
    ConvNet<double> constant(shape);
    constant.init_he(3);
    const std::size_t b = constant.layer(5).bias_offset;
    const LayerSlice out = constant.layer(5);
    std::fill_n(constant.parameters().begin() + static_cast<long>(out.weight_offset), out.weight_count, 0.0);
    constant.parameters()[b] = 1.5;
    constant.parameters()[b + 1] = -0.5;
    const std::vector<Vec2> same(batch, Vec2{1.5, -0.5});
    CHECK(constant.loss_and_gradient(inputs, same, grad) == 0.0);
    CHECK(std::all_of(grad.begin(), grad.end(), [](double g) { return g == 0.0; }));
  }
}

TEST_CASE("train") {
  SUBCASE("memorises a small dataset") {
    const auto pairs = disk_pairs(32, 1);
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.learning_rate = 0.0005;
    cfg.epochs = 150;
    cfg.validation_fraction = 0.0;
    cfg.seed = 2;
    const TrainResult r = train(pairs, cfg, small_shape());
    double loss = 0.0;
    for (const auto& p : pairs) loss += l2_loss(r.net.forward(p.patch), p.target);
    loss /= double(pairs.size());
    MESSAGE("memorisation loss " << loss << " (best epoch " << r.best_epoch << ")");
    CHECK(loss < 0.05);
  }
  SUBCASE("returns the snapshot of the lowest validation loss") {
    const std::vector<EpochStats> history{{1, 5.0, 3.0}, {2, 4.0, 2.0}, {3, 3.0, 4.0}, {4, 2.0, 2.0}};
    CHECK(select_best_epoch(history) == 2);

    const auto pairs = disk_pairs(40, 3);
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.learning_rate = 0.0005;
    cfg.epochs = 6;
    cfg.validation_fraction = 0.25;
    std::vector<std::vector<float>> snapshots;
    const TrainResult r = train(pairs, cfg, small_shape(), [&](const EpochStats& s, const FlowNet& net) {
      CHECK(s.epoch == static_cast<int>(snapshots.size()) + 1);
      snapshots.emplace_back(net.parameters().begin(), net.parameters().end());
    });
    REQUIRE(r.history.size() == 6u);
    CHECK(r.best_epoch == select_best_epoch(r.history));
    const auto& best = snapshots[static_cast<std::size_t>(r.best_epoch - 1)];
    CHECK(std::equal(best.begin(), best.end(), r.net.parameters().begin()));
  }
  SUBCASE("fixed seed gives bit-identical weights") {
    const auto pairs = disk_pairs(24, 4);
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.learning_rate = 0.0005;
    cfg.epochs = 3;
    cfg.seed = 9;
    const TrainResult a = train(pairs, cfg, small_shape());
    const TrainResult b = train(pairs, cfg, small_shape());
    CHECK(std::equal(a.net.parameters().begin(), a.net.parameters().end(), b.net.parameters().begin()));
    for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].train_loss == b.history[i].train_loss);
  }
  SUBCASE("full-batch loss is non-increasing at a small learning rate") {
    // Near-boundary samples (|target| <= 3 px) keep this step size in the
    // smooth regime; far targets make the weights grow until it overshoots.
    const auto pairs = disk_pairs(16, 5, 3);
    TrainConfig cfg;
    cfg.batch_size = 16;
    cfg.learning_rate = 0.005;
    cfg.momentum = 0.0;
    cfg.epochs = 12;
    cfg.validation_fraction = 0.0;
    const TrainResult r = train(pairs, cfg, small_shape());
    for (std::size_t i = 1; i < r.history.size(); ++i) {
      CHECK(r.history[i].train_loss <= r.history[i - 1].train_loss);
    }
  }
  SUBCASE("errors") {
    const auto pairs = disk_pairs(16, 6);
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.epochs = 1;
    CHECK_THROWS_AS(train({}, cfg, small_shape()), InvalidArgument);
    cfg.batch_size = 64;
    CHECK_THROWS_AS(train(pairs, cfg, small_shape()), InvalidArgument);
    cfg.batch_size = 8;
    CHECK_THROWS_AS(train(pairs, cfg, small_shape(3)), ChannelMismatch);
    cfg.learning_rate = 1e6;
    cfg.epochs = 5;
    CHECK_THROWS_AS(train(pairs, cfg, small_shape()), TrainingDiverged);
  }
}

TEST_CASE("weight persistence") {
  const auto dir = std::filesystem::temp_directory_path() / "deepsnake_test_weights";
  std::filesystem::create_directories(dir);
  const auto path = dir / "net.bin";

  FlowNet net(NetShape{});
  net.init_he(17);
  save_weights(net, path);
  const FlowNet back = load_weights(path);
  CHECK(back.shape() == net.shape());
  CHECK(std::equal(net.parameters().begin(), net.parameters().end(), back.parameters().begin()));

  std::mt19937 rng(3);
  for (int i = 0; i < 100; ++i) {
    const Patch p = random_patch(1, 64, rng);
    CHECK(back.forward(p) == net.forward(p));
  }
  CHECK_THROWS_AS(back.forward(random_patch(3, 64, rng)), ChannelMismatch);

  SUBCASE("truncated") {
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 4);
    CHECK_THROWS_AS(load_weights(path), FormatError);
    std::filesystem::resize_file(path, 10);
    CHECK_THROWS_AS(load_weights(path), FormatError);
  }
  SUBCASE("bad magic and version") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
    f.close();
    CHECK_THROWS_AS(load_weights(path), FormatError);
    save_weights(net, path);
    std::fstream g(path, std::ios::in | std::ios::out | std::ios::binary);
    g.seekp(8);
    const std::uint32_t version = 99;
    g.write(reinterpret_cast<const char*>(&version), 4);
    g.close();
    CHECK_THROWS_AS(load_weights(path), FormatError);
  }
  SUBCASE("inconsistent dimensions") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8 + 4 * 7);
    const std::uint32_t hidden = 1024;
    f.write(reinterpret_cast<const char*>(&hidden), 4);
    f.close();
    CHECK_THROWS_AS(load_weights(path), FormatError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_weights(dir / "absent.bin"), FormatError); }
  std::filesystem::remove_all(dir);
}

TEST_CASE("history csv") {
  const auto path = std::filesystem::temp_directory_path() / "deepsnake_history.csv";
  const std::vector<EpochStats> history{{1, 2.5, 3.0}, {2, 1.25, 2.0}};
  write_history_csv(path, history);
  std::ifstream in(path);
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  CHECK(header == "epoch,train_loss,val_loss");
  CHECK(first == "1,2.5,3");
  std::filesystem::remove(path);
}
