#include "doctest.h"

#include "popgrid/config.hpp"

using namespace popgrid;
using config::ConfigError;

TEST_CASE("empty config gives defaults and the top-level seed propagates") {
    const auto c = config::parse_config("seed: 42\n");
    CHECK(c.seed == 42);
    CHECK(c.finetune.seed == 42);
    CHECK(c.forest.fixed.seed == 42);
    CHECK(c.cv.n_folds == 4);
    CHECK(c.forest.grid_search);
    CHECK(c.encoder.architecture == "tiny-cnn");
    CHECK(!c.grid);
    const auto d = config::parse_config("seed: 42\nfinetune: {seed: 3}\n");
    CHECK(d.finetune.seed == 3);
    CHECK(d.pretext.seed == 42);
}

TEST_CASE("a full config parses and paths resolve against the base directory") {
    const auto c = config::parse_config(R"(
seed: 5
paths:
  imagery: data/mosaic.tif
  tiles: /abs/tiles.jsonl
  output: out
grid:
  origin_x: 500000
  origin_y: 8000000
  n_rows: 20
  n_cols: 20
  crs: epsg:32736
  district_id: SYN
encoder:
  architecture: resnet18
  pretraining: barlow_twins
finetune:
  head_epochs: 3
  augment: false
pretext:
  method: deepcluster
  barlow:
    augmentations: [grayscale, {kind: solarization, probability: 0.3}]
  deepcluster: {k: 4}
forest:
  grid_search: false
  num_estimators: 50
cv:
  pipeline: feature-forest
explain:
  tiles: [a, b]
  tsne: {perplexity: 5}
)",
                                        "/base");
    CHECK(c.paths.imagery == "/base/data/mosaic.tif");
    CHECK(c.paths.tiles == "/abs/tiles.jsonl");
    REQUIRE(c.grid);
    CHECK(c.grid->crs_code == "EPSG:32736");
    CHECK(c.grid->cell_size == 100.0);
    CHECK(c.encoder.pretraining == enc::Pretraining::barlow_twins);
    CHECK(c.finetune.head_epochs == 3);
    CHECK(!c.finetune.augment);
    CHECK(c.pretext.method == pretext::Method::deepcluster);
    REQUIRE(c.pretext.barlow.view_augmentations.size() == 2);
    CHECK(c.pretext.barlow.view_augmentations[0].probability == pretext::default_probability(pretext::Augmentation::grayscale));
    CHECK(c.pretext.barlow.view_augmentations[1].probability == 0.3);
    CHECK(c.pretext.deepcluster.k == 4);
    CHECK(c.forest.fixed.num_estimators == 50);
    CHECK(c.cv.pipeline == config::CvPipeline::feature_forest);
    CHECK(c.explain.tiles == std::vector<std::string>{"a", "b"});
    CHECK(c.explain.tsne.perplexity == 5);
}

TEST_CASE("unknown keys and wrong types are rejected with the key path") {
    CHECK_THROWS_WITH_AS(config::parse_config("forest:\n  num_estimator: 10\n"),
                         doctest::Contains("forest.num_estimator' (did you mean 'num_estimators'"), ConfigError);
    CHECK_THROWS_WITH_AS(config::parse_config("sed: 1\n"), doctest::Contains("unknown key 'sed'"), ConfigError);
    CHECK_THROWS_WITH_AS(config::parse_config("cv: {n_folds: four}\n"), doctest::Contains("cv.n_folds"), ConfigError);
    CHECK_THROWS_WITH_AS(config::parse_config("cv: {n_folds: 1}\n"), doctest::Contains("cv.n_folds"), ConfigError);
    CHECK_THROWS_WITH_AS(config::parse_config("seed: -1\n"), doctest::Contains("seed"), ConfigError);
    CHECK_THROWS_AS(config::parse_config("finetune: {train_fraction: 1.5}\n"), ConfigError);
    CHECK_THROWS_AS(config::parse_config("pretext: {barlow: {augmentations: [sparkle]}}\n"), ConfigError);
    CHECK_THROWS_AS(config::parse_config("grid: {n_rows: 2, n_cols: 2, crs: 'EPSG:4326', district_id: X}\n"), ConfigError);
    CHECK_THROWS_AS(config::parse_config("encoder: {architecture: vgg}\n"), ConfigError);
    CHECK_THROWS_AS(config::parse_config("a: [\n"), ConfigError);
    CHECK_THROWS_AS(config::parse_config("- 1\n- 2\n"), ConfigError);
    CHECK_THROWS_AS(config::parse_config("seed: 1\nseed: 2\n"), ConfigError);
}

TEST_CASE("overrides") {
    const std::vector<std::string> o{"forest.num_estimators=7", "cv.pipeline=null-model", "paths.output=o2",
                                     "explain.tiles=[x, y]", "synth.district_id='007'"};
    const auto c = config::parse_config("forest: {num_estimators: 3}\n", "/b", o);
    CHECK(c.forest.fixed.num_estimators == 7);
    CHECK(c.cv.pipeline == config::CvPipeline::null);
    CHECK(c.paths.output == "/b/o2");
    CHECK(c.explain.tiles.size() == 2);
    CHECK(c.synth.district_id == "007");
    CHECK_THROWS_AS(config::parse_config("", {}, std::vector<std::string>{"nokey"}), ConfigError);
    CHECK_THROWS_AS(config::parse_config("", {}, std::vector<std::string>{"forest.typo=1"}), ConfigError);
    CHECK_THROWS_AS(config::parse_config("seed: 1\n", {}, std::vector<std::string>{"seed.x=1"}), ConfigError);
}

TEST_CASE("format_config round-trips") {
    const auto c = config::parse_config(R"(
seed: 9
paths: {imagery: m.tif, output: out}
grid: {origin_x: 1.5, origin_y: 2.25, n_rows: 3, n_cols: 4, crs: 'EPSG:32736', district_id: D}
encoder: {architecture: {stem: [{type: conv, out: 4, kernel: 3}], stages: []}}
finetune: {base_lr_bottom: 1.0e-7}
)",
                                        "/cfg");
    const auto text = config::format_config(c, "/cfg");
    const auto back = config::parse_config(text, "/cfg");
    CHECK(back.to_json() == c.to_json());
    CHECK(back.hash() == c.hash());
    CHECK(back.paths.imagery == "/cfg/m.tif");
    CHECK(config::parse_config("seed: 10\n").hash() != config::parse_config("seed: 11\n").hash());
}
