#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "vigilnet/augment.hpp"
#include "vigilnet/data.hpp"
#include "vigilnet/errors.hpp"
#include "vigilnet/network.hpp"
#include "vigilnet/train.hpp"

using namespace vigilnet;
using namespace vigilnet::train;

namespace {

net::NetworkConfig tiny_config() {
  net::NetworkConfig cfg;
  cfg.variant = net::Variant::kOursEarly;
  cfg.depth_multiplier = 0.35;
  cfg.frames = 10;
  cfg.spatial = 32;
  cfg.classes = 2;
  return cfg;
}

// Distortion-free pipeline matched to a square record: window plus resize
// that degenerates to a copy.
augment::AugmentConfig identity_augment(int side, int frames) {
  augment::AugmentConfig cfg;
  cfg.flip_probability = 0.0;
  cfg.brightness_delta_max = 0.0;
  cfg.min_area_fraction = 1.0;
  cfg.aspect_lo = 1.0;
  cfg.aspect_hi = 1.0;
  cfg.out_height = side;
  cfg.out_width = side;
  cfg.out_frames = frames;
  return cfg;
}

std::map<std::string, std::vector<float>> snapshot(net::Model& model) {
  std::map<std::string, std::vector<float>> out;
  for (const auto& p : model.parameters()) {
    out.emplace(p.name, p.tensor->values());
  }
  return out;
}

std::set<std::string> trainable_names(const std::map<std::string, bool>& m) {
  std::set<std::string> out;
  for (const auto& [name, on] : m) {
    if (on) out.insert(name);
  }
  return out;
}

void force_constant_predictor(net::Model& model) {
  for (const auto& p : model.parameters()) {
    if (p.name == "classifier.weight") {
      std::fill(p.tensor->values().begin(), p.tensor->values().end(), 0.0f);
    } else if (p.name == "classifier.bias") {
      (*p.tensor)[0] = 1.0f;
      (*p.tensor)[1] = 0.0f;
    }
  }
}

}  // namespace

TEST_CASE("learning rate decays in steps down to the floor") {
  TrainConfig cfg;
  CHECK(lr_at(0, cfg) == 0.01);
  CHECK(lr_at(1000000, cfg) == 0.0001);

  TrainConfig flat;
  flat.decay_factor = 1.0;
  CHECK(lr_at(0, flat) == flat.lr_initial);
  CHECK(lr_at(987654, flat) == flat.lr_initial);

  TrainConfig halving;
  halving.lr_initial = 0.01;
  halving.lr_min = 0.0001;
  halving.decay_factor = 0.5;
  halving.decay_every = 100;
  CHECK(lr_at(100, halving) == doctest::Approx(0.005).epsilon(1e-12));
  CHECK(lr_at(99, halving) == doctest::Approx(0.01).epsilon(1e-12));

  double prev = lr_at(0, cfg);
  for (long long s = 1; s < 3000; s += 7) {
    const double cur = lr_at(s, cfg);
    CHECK(cur <= prev);
    CHECK(cur >= cfg.lr_min);
    prev = cur;
  }
  CHECK_THROWS_AS(lr_at(-1, cfg), ConfigError);
}

TEST_CASE("sgd update matches hand arithmetic") {
  Tensor w({1}, {1.0f});
  Tensor g({1}, {2.0f});
  Tensor v({1}, {0.0f});
  sgd_update(w, g, v, 0.1, 0.9, 0.0);
  CHECK(v[0] == 2.0f);
  CHECK(w[0] == doctest::Approx(0.8).epsilon(1e-7));

  Tensor w2({1}, {2.0f});
  Tensor g2({1}, {0.0f});
  Tensor v2({1}, {0.0f});
  sgd_update(w2, g2, v2, 0.1, 0.0, 0.5);
  CHECK(v2[0] == 1.0f);
  CHECK(w2[0] == doctest::Approx(1.9).epsilon(1e-7));

  Tensor w3({2}, {0.5f, -1.5f});
  Tensor g3({2}, {0.0f, 0.0f});
  Tensor v3({2}, {0.0f, 0.0f});
  const std::vector<float> before = w3.values();
  sgd_update(w3, g3, v3, 0.1, 0.0, 0.0);
  CHECK(w3.values() == before);

  Tensor bad({3});
  CHECK_THROWS_AS(sgd_update(w3, bad, v3, 0.1, 0.0, 0.0), ShapeError);
}

TEST_CASE("one sgd step descends a quadratic objective") {
  Tensor w({1}, {1.0f});
  Tensor v({1}, {0.0f});
  const double f0 = static_cast<double>(w[0]) * w[0];
  Tensor g({1}, {2.0f * w[0]});
  sgd_update(w, g, v, 1e-3, 0.0, 0.0);
  const double f1 = static_cast<double>(w[0]) * w[0];
  CHECK(f1 < f0);
}

TEST_CASE("weight decay alone shrinks magnitudes every step") {
  Tensor w({3}, {1.0f, -2.0f, 0.25f});
  Tensor g({3});
  Tensor v({3});
  for (int step = 0; step < 50; ++step) {
    const std::vector<float> before = w.values();
    sgd_update(w, g, v, 0.5, 0.0, 0.1);
    v = Tensor({3});  // isolate the decay term from momentum accumulation
    for (int i = 0; i < 3; ++i) {
      CHECK(std::abs(w[i]) < std::abs(before[static_cast<std::size_t>(i)]));
    }
  }
}

TEST_CASE("freeze policies produce nested trainable sets") {
  auto model = net::build_model(tiny_config(), 1);
  const auto all = trainable_names(freeze_mask(model, FreezePolicy::kAll));
  const auto most = trainable_names(freeze_mask(model, FreezePolicy::kMost));
  const auto final_ =
      trainable_names(freeze_mask(model, FreezePolicy::kFinal));

  CHECK(all.size() == model.parameters().size());
  CHECK(final_ == std::set<std::string>{"classifier.bias",
                                        "classifier.weight"});
  for (const auto& name : most) {
    CHECK(name.rfind("stem.", 0) != 0);
    CHECK(name.rfind("block0.", 0) != 0);
  }
  CHECK(most.count("block1.dw.weight") == 1);

  CHECK(final_.size() < most.size());
  CHECK(most.size() < all.size());
  for (const auto& name : final_) CHECK(most.count(name) == 1);
  for (const auto& name : most) CHECK(all.count(name) == 1);
}

TEST_CASE("frozen parameters survive sgd steps bit for bit") {
  auto model = net::build_model(tiny_config(), 2);
  const auto mask = freeze_mask(model, FreezePolicy::kMost);
  const auto before = snapshot(model);

  std::map<std::string, Tensor> grads;
  for (const auto& p : model.parameters()) {
    grads.emplace(p.name, Tensor::full(p.tensor->shape(), 0.1f));
  }
  TrainConfig cfg;
  OptimizerState state;
  for (int i = 0; i < 5; ++i) {
    sgd_step(model, grads, mask, state, cfg);
  }
  CHECK(state.step == 5);

  int frozen_seen = 0;
  int trained_seen = 0;
  for (const auto& p : model.parameters()) {
    if (!mask.at(p.name)) {
      CHECK(p.tensor->values() == before.at(p.name));
      ++frozen_seen;
    } else if (p.tensor->values() != before.at(p.name)) {
      ++trained_seen;
    }
  }
  CHECK(frozen_seen > 0);
  CHECK(trained_seen > 0);
}

TEST_CASE("training is bit-reproducible for a fixed seed") {
  auto dataset = data::generate_synthetic(6, 31, 10, 32, 32);
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.max_steps = 4;
  cfg.eval_every = 2;
  const auto fn = make_augment_fn(identity_augment(32, 10));

  auto model_a = net::build_model(tiny_config(), 7);
  auto model_b = net::build_model(tiny_config(), 7);
  const auto hist_a = train::train(model_a, dataset, {}, cfg, fn, 99);
  const auto hist_b = train::train(model_b, dataset, {}, cfg, fn, 99);

  REQUIRE(hist_a.size() == hist_b.size());
  CHECK(hist_a.size() == 2);
  for (std::size_t i = 0; i < hist_a.size(); ++i) {
    CHECK(hist_a[i].step == hist_b[i].step);
    CHECK(hist_a[i].lr == hist_b[i].lr);
    CHECK(hist_a[i].loss == hist_b[i].loss);
    CHECK(hist_a[i].eval_accuracy == hist_b[i].eval_accuracy);
  }
  const auto snap_a = snapshot(model_a);
  const auto snap_b = snapshot(model_b);
  CHECK(snap_a == snap_b);
}

TEST_CASE("zero learning rate leaves parameters alone and loss flat") {
  auto dataset = data::generate_synthetic(2, 5, 10, 32, 32);
  dataset.resize(1);
  TrainConfig cfg;
  cfg.lr_initial = 0.0;
  cfg.lr_min = 0.0;
  cfg.batch_size = 1;
  cfg.max_steps = 6;
  cfg.eval_every = 2;

  auto model = net::build_model(tiny_config(), 3);
  const auto before = snapshot(model);
  const auto fn = make_augment_fn(identity_augment(32, 10));
  const auto history = train::train(model, dataset, {}, cfg, fn, 5);
  CHECK(snapshot(model) == before);
  REQUIRE(history.size() == 3);
  CHECK(history[1].loss == history[0].loss);
  CHECK(history[2].loss == history[0].loss);
}

TEST_CASE("training rejects empty datasets and reports divergence") {
  auto model = net::build_model(tiny_config(), 4);
  TrainConfig cfg;
  cfg.max_steps = 1;
  cfg.batch_size = 1;
  const auto fn = make_augment_fn(identity_augment(32, 10));
  CHECK_THROWS_AS(train::train(model, {}, {}, cfg, fn, 1), ConfigError);

  auto dataset = data::generate_synthetic(2, 6, 10, 32, 32);
  for (const auto& p : model.parameters()) {
    if (p.name == "classifier.bias") {
      (*p.tensor)[0] = std::nanf("");
    }
  }
  CHECK_THROWS_AS(train::train(model, dataset, {}, cfg, fn, 1), DivergenceError);

  auto intact = net::build_model(tiny_config(), 4);
  cfg.max_steps = 0;
  CHECK(train::train(intact, dataset, {}, cfg, fn, 1).empty());
}

TEST_CASE("evaluate scores a constant predictor at the base rate") {
  auto model = net::build_model(tiny_config(), 8);
  force_constant_predictor(model);

  auto balanced = data::generate_synthetic(8, 21, 10, 32, 32);
  CHECK(evaluate(model, balanced) == 0.5);

  std::vector<data::VideoRecord> one = {balanced[0]};
  REQUIRE(one[0].label == 0);
  CHECK(evaluate(model, one) == 1.0);

  CHECK_THROWS_AS(evaluate(model, {}), ConfigError);
}

TEST_CASE("inference input centers the window and the crop") {
  auto records = data::generate_synthetic(2, 11, 20, 48, 64);
  net::NetworkConfig cfg = tiny_config();

  const Tensor t = inference_input(records[0], cfg);
  CHECK(t.shape() == std::vector<int>{32, 32, 10, 1});

  auto square = data::generate_synthetic(2, 12, 10, 32, 32);
  const Tensor s = inference_input(square[0], cfg);
  CHECK(s.values() == data::window_tensor(square[0], 0, 10).values());

  // A 20-frame record with a 10-frame model window starts at frame 5, so
  // the window straddles the record's middle frame.
  cfg.spatial = 48;
  auto wide = data::generate_synthetic(2, 13, 20, 48, 48);
  const Tensor w = inference_input(wide[0], cfg);
  CHECK(w.values() == data::window_tensor(wide[0], 5, 10).values());
}

TEST_CASE("history file is tab-separated with a header") {
  std::vector<HistoryRow> rows = {{10, 0.01, 0.7, 0.5}, {20, 0.01, 0.6, 0.75}};
  const std::string path = "train_test_history.tsv";
  write_history(path, rows);
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  std::getline(in, line);
  CHECK(line == "step\tlr\tloss\teval_accuracy");
  int count = 0;
  while (std::getline(in, line)) {
    CHECK(std::count(line.begin(), line.end(), '\t') == 3);
    ++count;
  }
  CHECK(count == 2);
  in.close();
  std::remove(path.c_str());
}
