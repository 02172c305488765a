#include "doctest.h"
#include "test_util.hpp"

#include "popgrid/common.hpp"
#include "popgrid/encoder.hpp"
#include "popgrid/finetune.hpp"
#include "popgrid/synth.hpp"

#include <chrono>
#include <fstream>

using namespace popgrid;
using nlohmann::json;

namespace {

imagery::Chip blob_chip(const std::string& id, int blobs, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    imagery::Chip chip;
    chip.tile_id = id;
    chip.pixels_raw = synth::render_blob_chip(blobs, rng);
    return imagery::prepare_for_model(chip, {});
}

json two_conv_arch() {
    return json{{"name", "two-conv"},
                {"stem", json::array({json{{"type", "avgpool"}, {"kernel", 16}, {"stride", 16}},
                                      json{{"type", "conv"}, {"out", 4}, {"kernel", 3}, {"padding", 1}, {"bias", true}},
                                      json{{"type", "relu"}}})},
                {"stages", json::array({json::array({json{{"type", "conv"}, {"out", 6}, {"kernel", 3}, {"stride", 2},
                                                          {"padding", 1}, {"bias", true}},
                                                     json{{"type", "relu"}}})})}};
}

json bn_arch() {
    return json{{"stem", json::array({json{{"type", "avgpool"}, {"kernel", 8}},
                                      json{{"type", "conv"}, {"out", 4}, {"kernel", 3}, {"padding", 1}},
                                      json{{"type", "bn"}, {"name", "bn"}}, json{{"type", "relu"}}})},
                {"stages", json::array({json::array({json{{"type", "basic"}, {"out", 8}, {"stride", 2}, {"name", "b"}}})})}};
}

}  // namespace

TEST_CASE("presets have the documented shapes") {
    auto r50 = enc::Encoder::from_architecture("resnet50", 1);
    CHECK(r50.conv_count() == 49);
    CHECK(r50.repr_dim() == 2048);
    CHECK(r50.n_stages() == 4);
    auto r18 = enc::Encoder::from_architecture("resnet18", 1);
    CHECK(r18.repr_dim() == 512);
    CHECK(r18.conv_count() == 17);
    auto tiny = enc::Encoder::from_architecture("tiny-cnn", 1);
    CHECK(tiny.repr_dim() == 32);
    CHECK_THROWS_AS(enc::Encoder::from_architecture("vgg", 1), Error);
    CHECK_THROWS_AS(enc::Encoder::from_architecture(json{{"stem", json::array()}, {"stages", json::array()}, {"x", 1}}, 1),
                    Error);
}

TEST_CASE("resnet18 produces a finite 512-d representation for a chip") {
    auto e = enc::Encoder::from_architecture("resnet18", 3);
    const auto chip = blob_chip("t", 4, 1);
    const auto reps = enc::extract(e, std::span(&chip, 1));
    REQUIRE(reps[0].vector.size() == 512);
    for (double v : reps[0].vector) CHECK(std::isfinite(v));
}

TEST_CASE("global average pooling of a constant feature map returns the constant") {
    json arch{{"stem", json::array({json{{"type", "conv"}, {"out", 3}, {"kernel", 1}, {"bias", true}, {"name", "k"}}})},
              {"stages", json::array({json::array({json{{"type", "relu"}}})})}};
    auto e = enc::Encoder::from_architecture(arch, 5);
    for (auto* p : e.parameters()) {
        if (p->name == "k.weight") std::fill(p->value.begin(), p->value.end(), 0.0);
        if (p->name == "k.bias") p->value = {0.25, 1.5, 3.0};
    }
    const auto chip = blob_chip("t", 3, 2);
    const auto rep = enc::extract(e, std::span(&chip, 1))[0].vector;
    CHECK(rep == std::vector<double>{0.25, 1.5, 3.0});
}

TEST_CASE("extraction is deterministic and independent of batch composition") {
    auto e = enc::Encoder::from_architecture(bn_arch(), 9);
    // Non-trivial frozen statistics.
    for (auto* p : e.parameters()) {
        if (p->name.find("running_mean") != std::string::npos) std::fill(p->value.begin(), p->value.end(), 0.1);
        if (p->name.find("running_var") != std::string::npos) std::fill(p->value.begin(), p->value.end(), 2.0);
    }
    std::vector<imagery::Chip> batch;
    for (int i = 0; i < 32; ++i) batch.push_back(blob_chip("t" + std::to_string(i), i % 16, 100 + i));
    const auto single = enc::extract(e, std::span(&batch[7], 1));
    const auto all = enc::extract(e, batch);
    REQUIRE(all.size() == 32);
    for (std::size_t k = 0; k < single[0].vector.size(); ++k) CHECK(std::abs(single[0].vector[k] - all[7].vector[k]) < 1e-5);
    std::vector<imagery::Chip> twice{batch[3], batch[3]};
    const auto dup = enc::extract(e, twice);
    CHECK(dup[0].vector == dup[1].vector);
    for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i].tile_id == batch[i].tile_id);
}

TEST_CASE("head and backbone gradients of the l2 loss match central differences") {
    auto e = enc::Encoder::from_architecture(two_conv_arch(), 11);
    e.attach_head(0.3);
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0.0, 0.5);
    for (auto& w : e.head().weight.value) w = n(rng);
    const auto chip = blob_chip("t", 6, 3);
    const auto x = enc::chip_tensor(chip);
    const double y = 4.0;
    nn::ForwardContext ctx;
    auto loss = [&] {
        const double d = e.head().forward(e.represent(x, ctx)) - y;
        return d * d;
    };
    for (auto* p : e.parameters()) p->zero_grad();
    const auto rep = e.represent(x, ctx);
    const double err = e.head().forward(rep) - y;
    std::vector<double> grad_rep(rep.size());
    for (std::size_t k = 0; k < rep.size(); ++k) {
        e.head().weight.grad[k] += 2 * err * rep[k];
        grad_rep[k] = 2 * err * e.head().weight.value[k];
    }
    e.head().bias.grad[0] += 2 * err;
    e.backward_represent(grad_rep);

    const double h = 1e-5;
    int checked = 0;
    for (auto* p : e.parameters()) {
        if (!p->trainable) continue;
        for (std::size_t i = 0; i < p->numel(); i += std::max<std::size_t>(1, p->numel() / 7)) {
            const double orig = p->value[i];
            p->value[i] = orig + h;
            const double lp = loss();
            p->value[i] = orig - h;
            const double lm = loss();
            p->value[i] = orig;
            const double fd = (lp - lm) / (2 * h);
            if (std::abs(fd) < 1e-9 && std::abs(p->grad[i]) < 1e-9) continue;  // inactive ReLU path
            INFO(p->name << "[" << i << "] fd=" << fd << " analytic=" << p->grad[i]);
            CHECK(testutil::rel_err(fd, p->grad[i]) < 1e-4);
            ++checked;
        }
    }
    CHECK(checked > 20);
}

TEST_CASE("checkpoints round-trip and loading fails cleanly on damage") {
    const auto dir = testutil::scratch_dir("encoder_ckpt");
    auto e = enc::Encoder::from_architecture(two_conv_arch(), 21);
    e.attach_head(2.5);
    const auto m = enc::save_checkpoint(e, dir, "enc", enc::Pretraining::scratch, 21);
    CHECK(m.fingerprint == sha256_file(dir / "enc.pgwb"));

    auto a = enc::load_encoder(dir / "enc.json");
    auto b = enc::load_encoder(dir / "enc.json");
    CHECK(a.fingerprint() == b.fingerprint());
    CHECK(a.fingerprint() == m.fingerprint);
    CHECK(a.has_head());
    const auto chip = blob_chip("t", 5, 8);
    CHECK(enc::extract(a, std::span(&chip, 1))[0].vector == enc::extract(e, std::span(&chip, 1))[0].vector);
    CHECK(enc::predict(a, chip) == enc::predict(e, chip));

    SUBCASE("corrupted bytes are caught by the fingerprint") {
        auto bytes = read_binary_file(dir / "enc.pgwb");
        bytes[bytes.size() / 2] ^= 0x5a;
        write_file_atomic(dir / "enc.pgwb", bytes);
        CHECK_THROWS_WITH_AS(enc::load_encoder(dir / "enc.json"), doctest::Contains("fingerprint"), Error);
    }
    SUBCASE("truncated file without a fingerprint") {
        auto bytes = read_binary_file(dir / "enc.pgwb");
        bytes.resize(bytes.size() - 10);
        write_file_atomic(dir / "enc.pgwb", bytes);
        auto manifest = enc::load_manifest(dir / "enc.json");
        manifest.fingerprint.clear();
        CHECK_THROWS_WITH_AS(enc::load_encoder(manifest, dir), doctest::Contains("truncated"), Error);
    }
    SUBCASE("shape mismatch names the first mismatching layer") {
        auto tensors = enc::decode_weights(read_binary_file(dir / "enc.pgwb"));
        for (auto& t : tensors) {
            if (t.name == "stage1.conv.weight" || t.name == "stages.0.0.weight") {
                t.shape[0] = 5;
                t.values.resize(t.values.size() / 6 * 5);
            }
        }
        write_file_atomic(dir / "enc.pgwb", enc::encode_weights(tensors));
        auto manifest = enc::load_manifest(dir / "enc.json");
        manifest.fingerprint.clear();
        CHECK_THROWS_WITH_AS(enc::load_encoder(manifest, dir), doctest::Contains("stages.0.0.weight"), Error);
    }
}

TEST_CASE("scratch manifests initialise from the recorded seed") {
    enc::EncoderManifest m;
    m.architecture = "tiny-cnn";
    m.repr_dim = 32;
    m.seed = 99;
    const auto a = enc::load_encoder(m);
    const auto b = enc::load_encoder(m);
    CHECK(a.fingerprint() == b.fingerprint());
    m.seed = 100;
    CHECK(enc::load_encoder(m).fingerprint() != a.fingerprint());
    m.repr_dim = 64;
    CHECK_THROWS_AS(enc::load_encoder(m), Error);
    m.repr_dim = 32;
    m.pretraining = enc::Pretraining::swav;
    CHECK_THROWS_AS(enc::load_encoder(m), Error);
    CHECK_THROWS_AS(enc::manifest_from_json(json{{"architecture", "tiny-cnn"}, {"repr_dim", 32}, {"pretraining", "scratch"},
                                                 {"weigths_uri", "x"}}),
                    Error);
}

TEST_CASE("MC dropout: zero rate gives zero spread, fixed seeds reproduce") {
    auto e = enc::Encoder::from_architecture("tiny-cnn", 31);
    e.attach_head(20.0);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& w : e.head().weight.value) w = n(rng);
    std::vector<imagery::Chip> chips;
    for (int i = 0; i < 4; ++i) chips.push_back(blob_chip("c" + std::to_string(i), 3 * i, 40 + i));

    const auto zero = enc::predict_mc_dropout(e, chips, 30, 0.0, 7);
    for (std::size_t i = 0; i < chips.size(); ++i) {
        CHECK(zero[i].std == 0.0);
        CHECK(zero[i].mean == enc::predict(e, chips[i]));
    }

    const auto a = enc::predict_mc_dropout(e, chips, 30, 0.1, 7);
    const auto b = enc::predict_mc_dropout(e, chips, 30, 0.1, 7);
    for (std::size_t i = 0; i < chips.size(); ++i) {
        CHECK(a[i].mean == b[i].mean);
        CHECK(a[i].std == b[i].std);
        CHECK(a[i].std >= 0.0);
    }
    CHECK(e.stage_dropout() == 0.0);

    // Same chip at two positions with the same stream seed.
    std::vector<imagery::Chip> dup{chips[2], chips[2]};
    const std::vector<std::uint64_t> seeds{123, 123};
    const auto d = enc::predict_mc_dropout(e, dup, 30, 0.1, seeds);
    CHECK(d[0].mean == d[1].mean);
    CHECK(d[0].std == d[1].std);

    // Mean lies within the range of the individual passes.
    e.set_stage_dropout(0.1);
    std::mt19937_64 pass_rng(123);
    nn::ForwardContext ctx{&pass_rng};
    const auto x = enc::chip_tensor(chips[2]);
    double lo = 1e300, hi = -1e300;
    for (int k = 0; k < 30; ++k) {
        const double y = std::max(0.0, e.head().forward(e.represent(x, ctx)));
        lo = std::min(lo, y);
        hi = std::max(hi, y);
    }
    e.set_stage_dropout(0.0);
    CHECK(d[0].mean >= lo);
    CHECK(d[0].mean <= hi);
    CHECK(hi > lo);
}

TEST_CASE("early stopping halts after `patience` non-improving epochs") {
    enc::EarlyStopper s(2);
    const std::vector<double> losses{5.0, 4.0, 3.0, 3.0, 3.5, 2.0};
    int stopped_at = -1;
    for (std::size_t i = 0; i < losses.size(); ++i) {
        if (s.observe(losses[i])) {
            stopped_at = static_cast<int>(i) + 1;
            break;
        }
    }
    CHECK(stopped_at == 5);
    CHECK(s.best() == 3.0);
    enc::EarlyStopper strict(1);
    CHECK_FALSE(strict.observe(1.0));
    CHECK(strict.observe(1.0));  // equal is not an improvement
}

TEST_CASE("finetune on constant labels fits the bias immediately") {
    std::vector<enc::LabelledChip> data;
    for (int i = 0; i < 12; ++i) data.push_back({blob_chip("k" + std::to_string(i), i % 5, 300 + i), 7.0});
    enc::FinetuneConfig cfg;
    cfg.batch_size = 4;
    cfg.max_epochs = 2;
    cfg.seed = 3;
    auto res = enc::finetune(enc::Encoder::from_architecture(two_conv_arch(), 1), data, cfg);
    REQUIRE(res.log.rows.size() >= 1 + 5);
    CHECK(res.log.rows[5].phase == "head");
    CHECK(res.log.rows[5].val_loss <= 1e-2);
    CHECK(res.encoder.head().bias.value[0] == doctest::Approx(7.0).epsilon(1e-2));
    CHECK(res.train_ids.size() + res.val_ids.size() == data.size());
}

TEST_CASE("finetune on blob counts lowers the training loss and returns the best checkpoint") {
    std::vector<enc::LabelledChip> data;
    std::mt19937_64 rng(17);
    for (int i = 0; i < 250; ++i) {
        const int blobs = static_cast<int>(rng() % 11);
        data.push_back({blob_chip("b" + std::to_string(i), blobs, 1000 + i), static_cast<double>(blobs)});
    }
    const auto before = data;
    enc::FinetuneConfig cfg;
    cfg.max_epochs = 3;
    cfg.seed = 5;
    const auto t0 = std::chrono::steady_clock::now();
    auto res = enc::finetune(enc::Encoder::from_architecture("tiny-cnn", 2), data, cfg);
    MESSAGE("finetune wall time " << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s");
    const auto& rows = res.log.rows;
    CHECK(rows.back().train_loss < rows.front().train_loss);
    CHECK(rows.front().phase == "init");

    double min_val = 1e300;
    for (const auto& r : rows) min_val = std::min(min_val, r.val_loss);
    CHECK(res.best_val_loss == min_val);
    std::vector<enc::LabelledChip> val;
    for (const auto& lc : data) {
        if (std::find(res.val_ids.begin(), res.val_ids.end(), lc.chip.tile_id) != res.val_ids.end()) val.push_back(lc);
    }
    CHECK(enc::evaluate_l2(res.encoder, val) == doctest::Approx(min_val).epsilon(1e-12));
    for (const auto& r : rows) CHECK(enc::evaluate_l2(res.encoder, val) <= r.val_loss + 1e-12);

    for (std::size_t i = 0; i < data.size(); ++i) CHECK(data[i].chip.pixels_model == before[i].chip.pixels_model);
    CHECK(res.log.to_csv().rfind("epoch,phase,train_loss,val_loss,lr_top\n", 0) == 0);
}

TEST_CASE("finetune rejects bad input") {
    enc::FinetuneConfig cfg;
    auto e = enc::Encoder::from_architecture(two_conv_arch(), 1);
    CHECK_THROWS_AS(enc::finetune(e, {}, cfg), Error);
    std::vector<enc::LabelledChip> neg{{blob_chip("a", 1, 1), -1.0}, {blob_chip("b", 1, 2), 1.0}};
    CHECK_THROWS_AS(enc::finetune(e, neg, cfg), Error);
    cfg.train_fraction = 1.0;
    std::vector<enc::LabelledChip> ok{{blob_chip("a", 1, 1), 1.0}, {blob_chip("b", 1, 2), 1.0}};
    CHECK_THROWS_AS(enc::finetune(e, ok, cfg), Error);
}
