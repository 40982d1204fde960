#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "deepsnake/error.hpp"
#include "deepsnake/geometry.hpp"
#include "deepsnake/image_io.hpp"
#include "deepsnake/synthetic.hpp"

using namespace deepsnake;

TEST_CASE("synthetic samples") {
  SynthConfig cfg;
  cfg.count = 12;
  const auto corpus = synth_corpus(cfg);
  REQUIRE(corpus.size() == 12);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& s = corpus[i];
    CHECK(s.kind == (i % 2 == 0 ? ShapeKind::Ellipse : ShapeKind::RoundedPolygon));
    CHECK(s.image.width() == 128);
    CHECK(s.image.channels() == 1);
    CHECK(s.image.in_unit_range());
    // The object is a single region clear of the image border.
    const std::size_t area = s.mask.count();
    CHECK(area >= 300);
    for (int k = 0; k < 128; ++k) {
      CHECK_FALSE(s.mask.at(k, 0));
      CHECK_FALSE(s.mask.at(0, k));
      CHECK_FALSE(s.mask.at(k, 127));
      CHECK_FALSE(s.mask.at(127, k));
    }
    // Mean intensities of the two regions differ visibly.
    double in = 0, out = 0;
    for (int y = 0; y < 128; ++y)
      for (int x = 0; x < 128; ++x) (s.mask.at(x, y) ? in : out) += s.image.at(x, y);
    in /= double(area);
    out /= double(128 * 128 - area);
    CHECK(std::abs(in - out) >= 0.15);
    CHECK_NOTHROW(signed_distance_map(s.mask));
  }
  SUBCASE("depends only on config and index") {
    const auto again = synth_sample(cfg, 5);
    CHECK(again.mask == corpus[5].mask);
    CHECK(std::equal(again.image.samples().begin(), again.image.samples().end(), corpus[5].image.samples().begin()));
    SynthConfig other = cfg;
    other.seed = 1;
    CHECK_FALSE(synth_sample(other, 5).mask == corpus[5].mask);
  }
  SUBCASE("config") {
    SynthConfig bad = cfg;
    bad.max_radius = 70;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    const auto round = synth_config_from_json(to_json(cfg));
    CHECK(round.count == cfg.count);
    CHECK(round.noise_sigma == cfg.noise_sigma);
    CHECK_THROWS_AS(synth_config_from_json({{"size", "big"}}), FormatError);
  }
}

TEST_CASE("corpus files") {
  const auto dir = std::filesystem::temp_directory_path() / "deepsnake_corpus_test";
  std::filesystem::remove_all(dir);
  SynthConfig cfg;
  cfg.count = 3;
  write_corpus(dir, synth_corpus(cfg), cfg);
  std::ofstream(dir / "orphan.png") << "x";
  std::vector<std::string> unmatched;
  const auto pairs = find_pairs(dir, &unmatched);
  REQUIRE(pairs.size() == 3);
  CHECK(pairs[0].name == "synth_0000");
  CHECK(unmatched == std::vector<std::string>{"orphan.png"});
  CHECK(read_mask(pairs[1].mask) == synth_sample(cfg, 1).mask);
  CHECK(std::filesystem::exists(dir / "corpus.json"));
  CHECK_THROWS_AS(find_pairs(dir / "missing"), InvalidArgument);
  std::filesystem::remove_all(dir);
}
