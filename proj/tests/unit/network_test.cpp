#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "doctest.h"
#include "vigilnet/autograd.hpp"
#include "vigilnet/errors.hpp"
#include "vigilnet/network.hpp"
#include "vigilnet/rng.hpp"
#include "vigilnet/tensor.hpp"

using namespace vigilnet;
using net::Model;
using net::NetworkConfig;
using net::Variant;

namespace {

Tensor rand_input(const std::vector<int>& dims, Rng& rng) {
  Tensor t(dims);
  for (auto& v : t.values()) v = static_cast<float>(rng.uniform(0.0, 1.0));
  return t;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0;
}

// Randomizes BN statistics and scale/shift so folding is non-trivial.
void scramble_bn(Model& m, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& b : m.buffers()) {
    const bool is_var = b.name.find("running_var") != std::string::npos;
    for (auto& v : b.tensor->values()) {
      v = is_var ? static_cast<float>(0.5 + rng.uniform())
                 : static_cast<float>(rng.normal(0.0, 0.3));
    }
  }
  for (auto& p : m.parameters()) {
    if (!p.bn_scale_shift) continue;
    const bool is_gamma = p.name.find("gamma") != std::string::npos;
    for (auto& v : p.tensor->values()) {
      v = is_gamma ? static_cast<float>(0.5 + rng.uniform())
                   : static_cast<float>(rng.normal(0.0, 0.3));
    }
  }
}

NetworkConfig small_cfg(Variant v, int frames) {
  NetworkConfig c;
  c.variant = v;
  c.depth_multiplier = 0.35;
  c.frames = frames;
  c.spatial = 64;
  return c;
}

struct ExpectedRow {
  const char* dims;
  const char* op;
  int t, c, n;
  const char* stride;
};

void check_trace(const std::vector<net::TraceRow>& got,
                 const std::vector<ExpectedRow>& want) {
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    CAPTURE(i);
    CHECK(got[i].input_dims == want[i].dims);
    CHECK(got[i].op == want[i].op);
    CHECK(got[i].t == want[i].t);
    CHECK(got[i].c == want[i].c);
    CHECK(got[i].n == want[i].n);
    CHECK(got[i].stride == want[i].stride);
  }
}

}  // namespace

TEST_CASE("channel scaling rounds to multiples of eight with a floor") {
  CHECK(net::scale_channels(48, 1.0) == 48);
  CHECK(net::scale_channels(48, 0.35) == 16);
  CHECK(net::scale_channels(32, 1.4) == 48);

  const int base[] = {32, 16, 24, 32, 64, 96, 160, 320, 1280};
  const int at14[] = {48, 24, 32, 48, 88, 136, 224, 448, 1792};
  const int at035[] = {16, 8, 8, 16, 24, 32, 56, 112, 448};
  for (int i = 0; i < 9; ++i) {
    CAPTURE(base[i]);
    CHECK(net::scale_channels(base[i], 1.4) == at14[i]);
    CHECK(net::scale_channels(base[i], 0.35) == at035[i]);
  }
  // Never below 90% of the unrounded value: 32*0.35 = 11.2 rounds down to 8,
  // which is below 10.08, so it bumps to 16.
  CHECK(net::scale_channels(32, 0.35) == 16);
  // Hard floor of 8.
  CHECK(net::scale_channels(8, 0.1) == 8);
  CHECK_THROWS_AS(net::scale_channels(0, 1.0), ConfigError);
  CHECK_THROWS_AS(net::scale_channels(32, 0.0), ConfigError);
}

TEST_CASE("shape trace of the early-fusion network at multiplier 1.4") {
  NetworkConfig cfg;
  cfg.variant = Variant::kOursEarly;
  cfg.depth_multiplier = 1.4;
  cfg.frames = 10;
  cfg.spatial = 224;
  const Model m = net::build_model(cfg);
  check_trace(net::shape_trace(m),
              {
                  {"224x224x10x1", "conv3d", 0, 48, 1, "2"},
                  {"112x112x5x48", "bottleneck3d", 1, 24, 1, "[1, 1, 5]"},
                  {"112x112x24", "bottleneck", 6, 32, 2, "2"},
                  {"56x56x32", "bottleneck", 6, 48, 3, "2"},
                  {"28x28x48", "bottleneck", 6, 88, 4, "2"},
                  {"14x14x88", "bottleneck", 6, 136, 3, "1"},
                  {"14x14x136", "bottleneck", 6, 224, 3, "2"},
                  {"7x7x224", "bottleneck", 6, 448, 1, "1"},
                  {"7x7x448", "conv2d 1x1", 0, 1792, 1, "1"},
                  {"7x7x1792", "avgpool", 0, 0, 1, "-"},
                  {"1x1x1792", "conv2d 1x1", 0, 2, 1, "1"},
              });
}

TEST_CASE("shape trace of the per-frame 2D network at multiplier 1.4") {
  NetworkConfig cfg;
  cfg.variant = Variant::kMobileNet2d;
  cfg.depth_multiplier = 1.4;
  cfg.frames = 1;
  cfg.spatial = 224;
  const Model m = net::build_model(cfg);
  check_trace(net::shape_trace(m),
              {
                  {"224x224x1", "conv2d", 0, 48, 1, "2"},
                  {"112x112x48", "bottleneck", 1, 24, 1, "1"},
                  {"112x112x24", "bottleneck", 6, 32, 2, "2"},
                  {"56x56x32", "bottleneck", 6, 48, 3, "2"},
                  {"28x28x48", "bottleneck", 6, 88, 4, "2"},
                  {"14x14x88", "bottleneck", 6, 136, 3, "1"},
                  {"14x14x136", "bottleneck", 6, 224, 3, "2"},
                  {"7x7x224", "bottleneck", 6, 448, 1, "1"},
                  {"7x7x448", "conv2d 1x1", 0, 1792, 1, "1"},
                  {"7x7x1792", "avgpool", 0, 0, 1, "-"},
                  {"1x1x1792", "conv2d 1x1", 0, 2, 1, "1"},
              });
}

TEST_CASE("slow-fusion trace keeps the frame axis until the pool") {
  NetworkConfig cfg;
  cfg.variant = Variant::kSlowFusion;
  cfg.depth_multiplier = 1.0;
  cfg.frames = 10;
  cfg.spatial = 224;
  const auto rows = net::shape_trace(net::build_model(cfg));
  REQUIRE(rows.size() == 11);
  CHECK(rows[0].input_dims == "224x224x10x1");
  CHECK(rows[0].op == "conv3d");
  CHECK(rows[1].input_dims == "112x112x10x32");
  CHECK(rows[1].op == "bottleneck3d");
  CHECK(rows[8].input_dims == "7x7x10x320");
  CHECK(rows[9].input_dims == "7x7x10x1280");
  CHECK(rows[9].op == "avgpool");
  CHECK(rows[10].input_dims == "1x1x1280");
}

TEST_CASE("bottleneck builders wire expand, depthwise and projection") {
  Rng rng(11);
  SUBCASE("expansion widens by t and projection narrows to c") {
    auto b = net::build_bottleneck2d(24, 6, 32, 2, 1.0, rng);
    REQUIRE(b.expand.has_value());
    CHECK(b.expand->weights.shape() == std::vector<int>{24, 144});
    CHECK(b.expand->relu6);
    CHECK(b.dw.conv.weights.shape() == std::vector<int>{3, 3, 1, 144});
    CHECK(b.dw.conv.stride == std::array<int, 3>{2, 2, 1});
    CHECK(b.project.weights.shape() == std::vector<int>{144, 32});
    CHECK_FALSE(b.project.relu6);
    CHECK_FALSE(b.skip);
  }
  SUBCASE("t of 1 drops the expansion stage") {
    auto b = net::build_bottleneck2d(48, 1, 24, 1, 1.0, rng);
    CHECK_FALSE(b.expand.has_value());
    CHECK(b.dw.conv.weights.shape() == std::vector<int>{3, 3, 1, 48});
    CHECK(b.project.weights.shape() == std::vector<int>{48, 24});
  }
  SUBCASE("skip only at stride 1 with matching channels") {
    CHECK(net::build_bottleneck2d(32, 6, 32, 1, 1.0, rng).skip);
    CHECK_FALSE(net::build_bottleneck2d(32, 6, 32, 2, 1.0, rng).skip);
    CHECK_FALSE(net::build_bottleneck2d(24, 6, 32, 1, 1.0, rng).skip);
  }
  SUBCASE("3D builder honours kernel and temporal stride") {
    auto b = net::build_bottleneck3d(48, 1, 24, {1, 1, 5}, {3, 3, 5}, 1.0, rng);
    CHECK_FALSE(b.expand.has_value());
    CHECK(b.dw.conv.weights.shape() == std::vector<int>{3, 3, 5, 48});
    CHECK(b.dw.conv.stride == std::array<int, 3>{1, 1, 5});
    CHECK(b.project.weights.shape() == std::vector<int>{48, 24});
    CHECK_FALSE(b.skip);  // the temporal stride is not 1
    CHECK_THROWS_AS(
        net::build_bottleneck3d(48, 1, 24, {1, 1, 0}, {3, 3, 5}, 1.0, rng),
        ConfigError);
  }
}

TEST_CASE("skip connections appear exactly where stride and width allow") {
  NetworkConfig cfg;
  cfg.variant = Variant::kOursEarly;
  cfg.depth_multiplier = 1.0;
  cfg.frames = 10;
  cfg.spatial = 224;
  Model m = net::build_model(cfg);
  int skips = 0;
  for (const auto& layer : m.layers) {
    if (const auto* b = std::get_if<net::Bottleneck>(&layer)) {
      skips += b->skip ? 1 : 0;
    }
  }
  // Second and later repeats of each bottleneck row: 1+2+3+2+2+0.
  CHECK(skips == 10);
  // The temporal-collapse bottleneck strides, so it cannot skip.
  CHECK_FALSE(std::get<net::Bottleneck>(m.layers[1]).skip);
}

TEST_CASE("config validation rejects malformed setups") {
  NetworkConfig cfg = small_cfg(Variant::kOursEarly, 4);
  cfg.spatial = 100;
  CHECK_THROWS_AS(net::build_model(cfg), ConfigError);
  cfg = small_cfg(Variant::kOursEarly, 0);
  CHECK_THROWS_AS(net::build_model(cfg), ConfigError);
  cfg = small_cfg(Variant::kMobileNet2d, 4);  // per-frame column wants 1
  CHECK_THROWS_AS(net::build_model(cfg), ConfigError);
  cfg = small_cfg(Variant::kOursEarly, 4);
  cfg.classes = 3;
  CHECK_THROWS_AS(net::build_model(cfg), ConfigError);
  cfg = small_cfg(Variant::kOursEarly, 4);
  cfg.depth_multiplier = -1.0;
  CHECK_THROWS_AS(net::build_model(cfg), ConfigError);
  CHECK_THROWS_AS(net::variant_from_string("resnet"), ConfigError);
  CHECK(net::variant_from_string("late_fusion") == Variant::kLateFusion);
}

TEST_CASE("forward produces two logits, batched or not") {
  Model m = net::build_model(small_cfg(Variant::kOursEarly, 4), 5);
  Rng rng(1);
  const Tensor one = rand_input({64, 64, 4, 1}, rng);
  const Tensor logits = m.forward(one);
  REQUIRE(logits.shape() == std::vector<int>{2});
  CHECK(logits.all_finite());

  const Tensor batch = rand_input({3, 64, 64, 4, 1}, rng);
  const Tensor out = m.forward(batch);
  REQUIRE(out.shape() == std::vector<int>{3, 2});
  CHECK(out.all_finite());

  const auto probs = m.predict(one);
  REQUIRE(probs.size() == 2);
  CHECK(probs[0] + probs[1] == doctest::Approx(1.0).epsilon(1e-5));
  CHECK_THROWS_AS(m.predict(batch), UsageError);

  const Tensor bad = rand_input({64, 64, 3, 1}, rng);
  CHECK_THROWS_AS(m.forward(bad), ShapeError);
  CHECK_THROWS_AS(Model{}.forward(one), UsageError);
}

TEST_CASE("batch rows are independent: permuting inputs permutes outputs") {
  Model m = net::build_model(small_cfg(Variant::kOursEarly, 4), 5);
  scramble_bn(m, 77);
  Rng rng(2);
  const Tensor batch = rand_input({3, 64, 64, 4, 1}, rng);
  const Tensor out = m.forward(batch);

  const int perm[3] = {2, 0, 1};
  Tensor shuffled({3, 64, 64, 4, 1});
  const std::int64_t sample = 64 * 64 * 4;
  for (int i = 0; i < 3; ++i) {
    std::memcpy(shuffled.data() + i * sample, batch.data() + perm[i] * sample,
                sizeof(float) * sample);
  }
  const Tensor out2 = m.forward(shuffled);
  for (int i = 0; i < 3; ++i) {
    CHECK(out2[i * 2] == out[perm[i] * 2]);
    CHECK(out2[i * 2 + 1] == out[perm[i] * 2 + 1]);
  }
}

TEST_CASE("frame-averaged fusion equals the 2D column on identical frames") {
  const std::uint64_t seed = 9;
  Model late = net::build_model(small_cfg(Variant::kLateFusion, 5), seed);
  Model flat = net::build_model(small_cfg(Variant::kMobileNet2d, 1), seed);
  scramble_bn(late, 31);
  scramble_bn(flat, 31);

  Rng rng(3);
  const Tensor frame = rand_input({64, 64, 1, 1}, rng);
  Tensor stacked({64, 64, 5, 1});
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      for (int f = 0; f < 5; ++f) {
        stacked[(std::int64_t(y) * 64 + x) * 5 + f] =
            frame[std::int64_t(y) * 64 + x];
      }
    }
  }
  const Tensor a = late.forward(stacked);
  const Tensor b = flat.forward(frame);
  REQUIRE(a.shape() == b.shape());
  CHECK(a[0] == b[0]);
  CHECK(a[1] == b[1]);
}

TEST_CASE("a zeroed residual block behaves as the identity") {
  Model m = net::build_model(small_cfg(Variant::kOursEarly, 4), 5);
  scramble_bn(m, 13);
  int idx = -1;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (const auto* b = std::get_if<net::Bottleneck>(&m.layers[i])) {
      if (b->skip) {
        idx = static_cast<int>(i);
        break;
      }
    }
  }
  REQUIRE(idx >= 0);

  Model zeroed = m;
  auto& blk = std::get<net::Bottleneck>(zeroed.layers[idx]);
  for (auto& v : blk.project.bn.gamma.values()) v = 0.0f;
  for (auto& v : blk.project.bn.beta.values()) v = 0.0f;

  Model removed = m;
  removed.layers.erase(removed.layers.begin() + idx);
  removed.names.erase(removed.names.begin() + idx);

  Rng rng(4);
  const Tensor in = rand_input({64, 64, 4, 1}, rng);
  const Tensor a = zeroed.forward(in);
  const Tensor b = removed.forward(in);
  CHECK(a[0] == b[0]);
  CHECK(a[1] == b[1]);
}

TEST_CASE("parameter naming and traversal") {
  Model m = net::build_model(small_cfg(Variant::kOursEarly, 4), 5);
  std::map<std::string, Tensor*> by_name;
  for (auto& p : m.parameters()) by_name[p.name] = p.tensor;
  CHECK(by_name.count("stem.conv.weight") == 1);
  CHECK(by_name.count("stem.bn.gamma") == 1);
  CHECK(by_name.count("block0.dw.weight") == 1);
  // The first bottleneck has t == 1, so no expansion stage.
  CHECK(by_name.count("block0.expand.weight") == 0);
  CHECK(by_name.count("block1.expand.weight") == 1);
  CHECK(by_name.count("head.weight") == 1);
  CHECK(by_name.count("classifier.weight") == 1);
  CHECK(by_name.count("classifier.bias") == 1);
  CHECK(by_name.size() == m.parameters().size());  // unique names

  std::size_t bn_count = 0;
  for (auto& p : m.parameters()) bn_count += p.bn_scale_shift ? 1 : 0;
  CHECK(m.buffers().size() == bn_count);  // mean+var pairs gamma+beta
  CHECK(m.state_tensor_count() ==
        static_cast<int>(m.parameters().size() + m.buffers().size()));
  CHECK(net::count_params(Model{}) == 0);
}

TEST_CASE("traced forward trains batch norm and feeds the tape") {
  Model m = net::build_model(small_cfg(Variant::kOursEarly, 4), 5);
  Rng rng(6);
  const Tensor batch = rand_input({2, 64, 64, 4, 1}, rng);
  const std::vector<int> targets{0, 1};

  float rm_before = 0.0f;
  for (auto& b : m.buffers()) {
    if (b.name == "stem.bn.running_mean") rm_before = (*b.tensor)[0];
  }

  autograd::Tape tape;
  auto tf = net::trace_forward(m, tape, batch, &targets, nullptr);
  CHECK(tape.value(tf.logits).shape() == std::vector<int>{2, 2});
  REQUIRE(tf.loss >= 0);
  CHECK(std::isfinite(double(tape.value(tf.loss)[0])));
  CHECK(tf.probs.shape() == std::vector<int>{2, 2});

  float rm_after = 0.0f;
  for (auto& b : m.buffers()) {
    if (b.name == "stem.bn.running_mean") rm_after = (*b.tensor)[0];
  }
  CHECK(rm_before != rm_after);  // running statistics were committed

  tape.backward(tf.loss);
  std::map<std::string, autograd::Tape::Id> ids(tf.param_ids.begin(),
                                                tf.param_ids.end());
  CHECK(tape.has_grad(ids.at("classifier.weight")));
  CHECK(tape.has_grad(ids.at("stem.conv.weight")));

  // Freezing a leaf removes its gradient entirely.
  std::map<std::string, bool> mask;
  for (auto& p : m.parameters()) mask[p.name] = false;
  mask["classifier.weight"] = true;
  mask["classifier.bias"] = true;
  autograd::Tape tape2;
  auto tf2 = net::trace_forward(m, tape2, batch, &targets, &mask);
  tape2.backward(tf2.loss);
  std::map<std::string, autograd::Tape::Id> ids2(tf2.param_ids.begin(),
                                                 tf2.param_ids.end());
  CHECK(tape2.has_grad(ids2.at("classifier.weight")));
  CHECK_FALSE(tape2.has_grad(ids2.at("stem.conv.weight")));
  CHECK_FALSE(tape2.has_grad(ids2.at("block3.project.weight")));

  Model stripped = net::strip_for_inference(m);
  autograd::Tape tape3;
  CHECK_THROWS_AS(net::trace_forward(stripped, tape3, batch, &targets, nullptr),
                  UsageError);
}

TEST_CASE("multiply-accumulate accounting") {
  NetworkConfig cfg;
  cfg.variant = Variant::kOursEarly;
  cfg.depth_multiplier = 1.0;
  cfg.frames = 10;
  cfg.spatial = 224;
  const Model m = net::build_model(cfg);
  const auto rows = net::flops_by_row(m);
  REQUIRE(rows.size() == 11);
  // Stem: 112*112*5 outputs, 3*3*3 taps, 1 -> 32 channels.
  CHECK(rows[0].second == 112LL * 112 * 5 * 27 * 32);
  // Head: 7*7 outputs, 320 -> 1280 channels.
  CHECK(rows[8].second == 49LL * 320 * 1280);
  CHECK(rows[9].second == 0);          // pooling multiplies nothing
  CHECK(rows[10].second == 1280 * 2);  // classifier
  long long total = 0;
  for (const auto& [name, macs] : rows) total += macs;
  CHECK(total == net::count_flops(m));

  SUBCASE("fusion placement orders cost: early < per-frame < volumetric") {
    NetworkConfig late = cfg, flat = cfg, slow = cfg;
    late.variant = Variant::kLateFusion;
    slow.variant = Variant::kSlowFusion;
    const long long early_macs = net::count_flops(m);
    const long long late_macs = net::count_flops(net::build_model(late));
    const long long slow_macs = net::count_flops(net::build_model(slow));
    CHECK(early_macs < late_macs);
    CHECK(late_macs < slow_macs);
  }

  SUBCASE("per-frame column cost scales linearly in frames") {
    NetworkConfig late = cfg, flat = cfg;
    late.variant = Variant::kLateFusion;
    late.frames = 5;
    flat.variant = Variant::kMobileNet2d;
    flat.frames = 1;
    const long long one = net::count_flops(net::build_model(flat));
    const long long five = net::count_flops(net::build_model(late));
    const long long cls = 1280 * 2;
    CHECK(five == 5 * (one - cls) + cls);
  }

  SUBCASE("cost and size are monotone in the multiplier") {
    NetworkConfig a = cfg, b = cfg, c = cfg;
    a.depth_multiplier = 0.35;
    b.depth_multiplier = 0.75;
    c.depth_multiplier = 1.4;
    const Model ma = net::build_model(a);
    const Model mb = net::build_model(b);
    const Model mc = net::build_model(c);
    CHECK(net::count_params(ma) < net::count_params(mb));
    CHECK(net::count_params(mb) < net::count_params(mc));
    CHECK(net::count_flops(ma) < net::count_flops(mb));
    CHECK(net::count_flops(mb) < net::count_flops(mc));
  }
}

TEST_CASE("seeded builds are reproducible") {
  Model a = net::build_model(small_cfg(Variant::kOursEarly, 4), 21);
  Model b = net::build_model(small_cfg(Variant::kOursEarly, 4), 21);
  Model c = net::build_model(small_cfg(Variant::kOursEarly, 4), 22);
  auto pa = a.parameters();
  auto pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(same_bits(*pa[i].tensor, *pb[i].tensor));
  }
  CHECK_FALSE(same_bits(*a.parameters()[0].tensor, *c.parameters()[0].tensor));
}

TEST_CASE("weight files round trip losslessly") {
  const auto dir = std::filesystem::temp_directory_path();
  const std::string path = (dir / "network_test_weights.bin").string();
  Model m = net::build_model(small_cfg(Variant::kOursEarly, 4), 17);
  scramble_bn(m, 23);
  net::save_weights(m, path);

  Model back = net::load_weights(path);
  CHECK(back.config.variant == m.config.variant);
  CHECK(back.config.depth_multiplier == m.config.depth_multiplier);
  CHECK(back.config.frames == m.config.frames);
  CHECK(back.config.spatial == m.config.spatial);
  auto pa = m.parameters();
  auto pb = back.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CAPTURE(pa[i].name);
    CHECK(pa[i].name == pb[i].name);
    CHECK(same_bits(*pa[i].tensor, *pb[i].tensor));
  }
  auto ba = m.buffers();
  auto bb = back.buffers();
  REQUIRE(ba.size() == bb.size());
  for (std::size_t i = 0; i < ba.size(); ++i) {
    CHECK(same_bits(*ba[i].tensor, *bb[i].tensor));
  }
  Rng rng(8);
  const Tensor in = rand_input({64, 64, 4, 1}, rng);
  CHECK(same_bits(m.forward(in), back.forward(in)));

  SUBCASE("loading into a mismatched model is rejected") {
    Model other = net::build_model(small_cfg(Variant::kSlowFusion, 4), 17);
    CHECK_THROWS_AS(net::load_weights_into(other, path),
                    ManifestMismatchError);
    NetworkConfig cfg = small_cfg(Variant::kOursEarly, 4);
    cfg.depth_multiplier = 0.75;
    Model wider = net::build_model(cfg, 17);
    CHECK_THROWS_AS(net::load_weights_into(wider, path),
                    ManifestMismatchError);
    Model same = net::build_model(small_cfg(Variant::kOursEarly, 4), 99);
    net::load_weights_into(same, path);
    CHECK(same_bits(m.forward(in), same.forward(in)));
  }

  SUBCASE("damaged files raise distinct errors") {
    std::ifstream src(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(src)),
                      std::istreambuf_iterator<char>());
    src.close();

    auto write_variant = [&](const std::string& name, auto mutate) {
      std::string copy = bytes;
      mutate(copy);
      const std::string p = (dir / name).string();
      std::ofstream out(p, std::ios::binary | std::ios::trunc);
      out.write(copy.data(), static_cast<std::streamsize>(copy.size()));
      out.close();
      return p;
    };

    const auto bad_magic = write_variant(
        "nt_bad_magic.bin", [](std::string& s) { s[0] = 'X'; });
    CHECK_THROWS_AS(net::load_weights(bad_magic), BadMagicError);

    const auto bad_version = write_variant(
        "nt_bad_version.bin", [](std::string& s) { s[4] = 9; });
    CHECK_THROWS_AS(net::load_weights(bad_version), BadVersionError);

    const auto truncated = write_variant("nt_truncated.bin", [](std::string& s) {
      s.resize(s.size() - 10);
    });
    CHECK_THROWS_AS(net::load_weights(truncated), TruncatedError);

    const auto trailing = write_variant(
        "nt_trailing.bin", [](std::string& s) { s.push_back('\0'); });
    CHECK_THROWS_AS(net::load_weights(trailing), CorruptRecordError);

    std::filesystem::remove(bad_magic);
    std::filesystem::remove(bad_version);
    std::filesystem::remove(truncated);
    std::filesystem::remove(trailing);
  }

  SUBCASE("folded models refuse to serialize") {
    Model folded = net::strip_for_inference(m, true);
    CHECK_THROWS_AS(net::save_weights(folded, path + ".folded"), UsageError);
  }
  std::filesystem::remove(path);
}

TEST_CASE("stripping preserves the function") {
  Model m = net::build_model(small_cfg(Variant::kOursEarly, 4), 29);
  scramble_bn(m, 41);
  m.optimizer_slots["stem.conv.weight"] = Tensor({3, 3, 3, 1, 16});
  Rng rng(10);

  Model plain = net::strip_for_inference(m);
  CHECK(plain.inference_only);
  CHECK(plain.optimizer_slots.empty());
  CHECK(plain.state_tensor_count() < m.state_tensor_count());
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor in = rand_input({64, 64, 4, 1}, rng);
    CHECK(same_bits(m.forward(in), plain.forward(in)));
  }

  Model folded = net::strip_for_inference(m, true);
  CHECK(folded.bn_folded);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor in = rand_input({64, 64, 4, 1}, rng);
    const Tensor a = m.forward(in);
    const Tensor b = folded.forward(in);
    for (int i = 0; i < 2; ++i) {
      const double denom = std::max({std::abs(double(a[i])),
                                     std::abs(double(b[i])), 1.0});
      CHECK(std::abs(double(a[i]) - double(b[i])) / denom <= 1e-6);
    }
  }
  // Folding twice must not rescale again.
  Model twice = net::strip_for_inference(folded, true);
  const Tensor in = rand_input({64, 64, 4, 1}, rng);
  CHECK(same_bits(folded.forward(in), twice.forward(in)));
}
