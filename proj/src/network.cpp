#include "vigilnet/network.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

#include "vigilnet/errors.hpp"

namespace vigilnet::net {
namespace {

using autograd::Tape;
using ops::ActShape;
using ops::BnMode;
using Op = LayerSpec::Op;

template <class... Ts>
struct Overload : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overload(Ts...) -> Overload<Ts...>;

constexpr std::array<int, 3> kNoStride{1, 1, 1};

void validate_config(const NetworkConfig& c) {
  if (c.spatial <= 0 || c.spatial % 32 != 0) {
    throw ConfigError("spatial extent must be a positive multiple of 32, got " +
                      std::to_string(c.spatial));
  }
  if (c.frames < 1) {
    throw ConfigError("frame count must be at least 1, got " +
                      std::to_string(c.frames));
  }
  if (c.classes != 2) {
    throw ConfigError("the classifier is two-way; classes must be 2, got " +
                      std::to_string(c.classes));
  }
  if (!(c.depth_multiplier > 0.0)) {
    throw ConfigError("depth multiplier must be positive");
  }
  if (c.variant == Variant::kMobileNet2d && c.frames != 1) {
    throw ConfigError("the per-frame 2D variant takes a single frame, got " +
                      std::to_string(c.frames));
  }
}

// The frame extent seen by the convolution column. The per-frame-column
// variant folds frames into the batch before the column runs.
int column_frames(const NetworkConfig& c) {
  return (c.variant == Variant::kLateFusion ||
          c.variant == Variant::kMobileNet2d)
             ? 1
             : c.frames;
}

bool is_3d_stem(Variant v) {
  return v == Variant::kOursEarly || v == Variant::kSlowFusion;
}

// Kernel implied by an architecture row; 3D rows must already have their
// temporal stride resolved.
std::array<int, 3> row_kernel(Variant variant, const LayerSpec& row) {
  switch (row.op) {
    case Op::kConv3d:
      return {3, 3, is_3d_stem(variant) ? 3 : 1};
    case Op::kBottleneck3d:
      return variant == Variant::kSlowFusion
                 ? std::array<int, 3>{3, 3, 3}
                 : std::array<int, 3>{3, 3, row.stride[2]};
    case Op::kBottleneck2d:
      return {3, 3, 1};
    default:
      return {1, 1, 1};
  }
}

Tensor init_full_conv(std::array<int, 3> k, int cin, int cout, Rng& rng) {
  Tensor w({k[0], k[1], k[2], cin, cout});
  double stddev = std::sqrt(2.0 / (double(k[0]) * k[1] * k[2] * cin));
  for (auto& v : w.values()) v = static_cast<float>(rng.normal(0.0, stddev));
  return w;
}

Tensor init_depthwise_conv(std::array<int, 3> k, int channels, Rng& rng) {
  Tensor w({k[0], k[1], k[2], channels});
  double stddev = std::sqrt(2.0 / (double(k[0]) * k[1] * k[2]));
  for (auto& v : w.values()) v = static_cast<float>(rng.normal(0.0, stddev));
  return w;
}

Tensor init_pointwise(int cin, int cout, Rng& rng) {
  Tensor w({cin, cout});
  double stddev = std::sqrt(2.0 / double(cin));
  for (auto& v : w.values()) v = static_cast<float>(rng.normal(0.0, stddev));
  return w;
}

PointwiseStage make_pointwise_stage(int cin, int cout, bool relu, Rng& rng) {
  PointwiseStage s;
  s.weights = init_pointwise(cin, cout, rng);
  s.bn = ops::BatchNormParams::identity(cout);
  s.relu6 = relu;
  return s;
}

DepthwiseStage make_depthwise_stage(int channels, std::array<int, 3> kernel,
                                    std::array<int, 3> stride, Rng& rng) {
  DepthwiseStage s;
  s.conv.kernel = kernel;
  s.conv.stride = stride;
  s.conv.in_channels = channels;
  s.conv.out_channels = channels;
  s.conv.weights = init_depthwise_conv(kernel, channels, rng);
  s.bn = ops::BatchNormParams::identity(channels);
  return s;
}

Bottleneck make_bottleneck(int in_ch, int t, int out_ch,
                           std::array<int, 3> stride,
                           std::array<int, 3> kernel, Rng& rng) {
  if (t < 1) {
    throw ConfigError("expansion factor must be at least 1, got " +
                      std::to_string(t));
  }
  if (in_ch <= 0 || out_ch <= 0) {
    throw ConfigError("bottleneck channel counts must be positive");
  }
  Bottleneck b;
  const int mid = in_ch * t;
  if (t > 1) b.expand = make_pointwise_stage(in_ch, mid, true, rng);
  b.dw = make_depthwise_stage(mid, kernel, stride, rng);
  b.project = make_pointwise_stage(mid, out_ch, false, rng);
  b.skip = stride == kNoStride && in_ch == out_ch;
  return b;
}

struct Cursor {
  int h, w, f, c;
};

void advance_cursor(Cursor& cur, const LayerSpec& row, int out_ch) {
  switch (row.op) {
    case Op::kAvgPool:
      cur.h = cur.w = cur.f = 1;
      break;
    case Op::kClassifier:
      cur.c = out_ch;
      break;
    default:
      cur.h = ops::same_out_extent(cur.h, row.stride[0]);
      cur.w = ops::same_out_extent(cur.w, row.stride[1]);
      cur.f = ops::same_out_extent(cur.f, row.stride[2]);
      cur.c = out_ch;
      break;
  }
}

int row_out_channels(const LayerSpec& row, const Cursor& cur,
                     const NetworkConfig& config) {
  switch (row.op) {
    case Op::kAvgPool:
      return cur.c;
    case Op::kClassifier:
      return config.classes;
    default:
      return scale_channels(row.c, config.depth_multiplier);
  }
}

std::string dims_str(const Cursor& cur) {
  std::ostringstream os;
  os << cur.h << 'x' << cur.w;
  if (cur.f > 1) os << 'x' << cur.f;
  os << 'x' << cur.c;
  return os.str();
}

std::string stride_str(const LayerSpec& row) {
  if (row.op == Op::kAvgPool) return "-";
  const auto& s = row.stride;
  if (s[0] == s[1] && (s[2] == s[0] || s[2] == 1)) return std::to_string(s[0]);
  std::ostringstream os;
  os << '[' << s[0] << ", " << s[1] << ", " << s[2] << ']';
  return os.str();
}

std::string op_str(const LayerSpec& row, Variant variant) {
  switch (row.op) {
    case Op::kConv3d:
      return is_3d_stem(variant) ? "conv3d" : "conv2d";
    case Op::kBottleneck3d:
      return "bottleneck3d";
    case Op::kBottleneck2d:
      return "bottleneck";
    case Op::kConv2d1x1:
    case Op::kClassifier:
      return "conv2d 1x1";
    case Op::kAvgPool:
      return "avgpool";
  }
  return "?";
}

// Per-channel inference-time factors of a batch norm: y = x*scale + shift.
void bn_fold_factors(const ops::BatchNormParams& bn,
                     std::vector<double>& scale, std::vector<double>& shift) {
  const int c = bn.gamma.size();
  scale.resize(c);
  shift.resize(c);
  for (int i = 0; i < c; ++i) {
    const double s =
        double(bn.gamma[i]) / std::sqrt(double(bn.running_var[i]) + bn.epsilon);
    scale[i] = s;
    shift[i] = double(bn.beta[i]) - double(bn.running_mean[i]) * s;
  }
}

// Inference always executes conv + batch norm as one fused pass: the bn
// affine runs inside the convolution's double accumulator, one rounding
// total. Folded stages carry the factors precomputed; unfolded ones derive
// them from the bn tensors per call, so both forms produce the same bits.

Tensor apply_pointwise_stage(const PointwiseStage& s, const Tensor& x0) {
  Tensor x;
  if (s.bn_folded) {
    x = ops::pointwise_conv_affine(x0, s.weights, s.folded_scale,
                                   s.folded_shift);
  } else {
    std::vector<double> scale, shift;
    bn_fold_factors(s.bn, scale, shift);
    x = ops::pointwise_conv_affine(x0, s.weights, scale, shift);
  }
  return s.relu6 ? ops::relu6(x) : x;
}

Tensor apply_conv_stage(const ConvStage& s, const Tensor& x0) {
  Tensor x;
  if (s.bn_folded) {
    x = ops::conv3d_affine(x0, s.conv, s.folded_scale, s.folded_shift);
  } else {
    std::vector<double> scale, shift;
    bn_fold_factors(s.bn, scale, shift);
    x = ops::conv3d_affine(x0, s.conv, scale, shift);
  }
  return ops::relu6(x);
}

Tensor apply_depthwise_stage(const DepthwiseStage& s, const Tensor& x0) {
  Tensor x;
  if (s.bn_folded) {
    x = ops::depthwise_conv3d_affine(x0, s.conv, s.folded_scale,
                                     s.folded_shift);
  } else {
    std::vector<double> scale, shift;
    bn_fold_factors(s.bn, scale, shift);
    x = ops::depthwise_conv3d_affine(x0, s.conv, scale, shift);
  }
  return ops::relu6(x);
}

Tensor apply_bottleneck(const Bottleneck& b, const Tensor& x0) {
  Tensor x = x0;
  if (b.expand) x = apply_pointwise_stage(*b.expand, x);
  x = apply_depthwise_stage(b.dw, x);
  x = apply_pointwise_stage(b.project, x);
  return b.skip ? ops::residual_add(x, x0) : x;
}

void collect_refs(Model& m, bool want_buffers, std::vector<ParamRef>& out) {
  // Folded stages carry their batch norm inside the convolution epilogue;
  // the bn tensors are dead state and stay out of both listings.
  auto push_bn = [&](const std::string& prefix, ops::BatchNormParams& bn,
                     bool folded) {
    if (folded) return;
    if (want_buffers) {
      out.push_back({prefix + ".running_mean", &bn.running_mean, false});
      out.push_back({prefix + ".running_var", &bn.running_var, false});
    } else {
      out.push_back({prefix + ".gamma", &bn.gamma, true});
      out.push_back({prefix + ".beta", &bn.beta, true});
    }
  };
  auto push_weight = [&](const std::string& name, Tensor& t) {
    if (!want_buffers) out.push_back({name, &t, false});
  };
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const std::string& base = m.names[i];
    std::visit(Overload{
                   [&](ConvStage& s) {
                     push_weight(base + ".conv.weight", s.conv.weights);
                     push_bn(base + ".bn", s.bn, s.bn_folded);
                   },
                   [&](Bottleneck& b) {
                     if (b.expand) {
                       push_weight(base + ".expand.weight", b.expand->weights);
                       push_bn(base + ".expand.bn", b.expand->bn,
                               b.expand->bn_folded);
                     }
                     push_weight(base + ".dw.weight", b.dw.conv.weights);
                     push_bn(base + ".dw.bn", b.dw.bn, b.dw.bn_folded);
                     push_weight(base + ".project.weight", b.project.weights);
                     push_bn(base + ".project.bn", b.project.bn,
                             b.project.bn_folded);
                   },
                   [&](PointwiseStage& s) {
                     push_weight(base + ".weight", s.weights);
                     push_bn(base + ".bn", s.bn, s.bn_folded);
                   },
                   [&](GlobalPoolStage&) {},
                   [&](ClassifierStage& s) {
                     push_weight(base + ".weight", s.weights);
                     if (!want_buffers)
                       out.push_back({base + ".bias", &s.bias, false});
                   },
               },
               m.layers[i]);
  }
}

// Read-only traversals borrow the mutable collector; the refs are not
// written through.
std::vector<ParamRef> named_params(const Model& m) {
  std::vector<ParamRef> out;
  collect_refs(const_cast<Model&>(m), false, out);
  return out;
}

void check_forward_input(const Model& m, const ActShape& s) {
  if (m.layers.empty()) throw UsageError("forward on an empty model");
  if (s.c != 1) {
    throw ShapeError("expected single-channel input, got " +
                     std::to_string(s.c) + " channels");
  }
  if (s.f != m.config.frames) {
    throw ShapeError("model takes " + std::to_string(m.config.frames) +
                     " frames, input has " + std::to_string(s.f));
  }
}

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kOursEarly:
      return "ours_early";
    case Variant::kMobileNet2d:
      return "mobilenet2d";
    case Variant::kLateFusion:
      return "late_fusion";
    case Variant::kSlowFusion:
      return "slow_fusion";
  }
  return "?";
}

Variant variant_from_string(const std::string& name) {
  if (name == "ours_early") return Variant::kOursEarly;
  if (name == "mobilenet2d") return Variant::kMobileNet2d;
  if (name == "late_fusion") return Variant::kLateFusion;
  if (name == "slow_fusion") return Variant::kSlowFusion;
  throw ConfigError("unknown variant: " + name);
}

int scale_channels(int base_c, double multiplier) {
  if (base_c <= 0) {
    throw ConfigError("base channel count must be positive, got " +
                      std::to_string(base_c));
  }
  if (!(multiplier > 0.0)) {
    throw ConfigError("channel multiplier must be positive");
  }
  const double target = base_c * multiplier;
  int c = static_cast<int>(std::lround(target / 8.0)) * 8;
  if (c < 8) c = 8;
  if (c < 0.9 * target) c += 8;
  return c;
}

std::vector<LayerSpec> architecture_rows(Variant variant) {
  std::vector<LayerSpec> rows;
  switch (variant) {
    case Variant::kOursEarly:
      rows.push_back({Op::kConv3d, 0, 32, 1, {2, 2, 2}});
      // Temporal stride 0 = collapse whatever temporal extent remains.
      rows.push_back({Op::kBottleneck3d, 1, 16, 1, {1, 1, 0}});
      break;
    case Variant::kMobileNet2d:
    case Variant::kLateFusion:
      rows.push_back({Op::kConv3d, 0, 32, 1, {2, 2, 1}});
      rows.push_back({Op::kBottleneck2d, 1, 16, 1, {1, 1, 1}});
      break;
    case Variant::kSlowFusion:
      rows.push_back({Op::kConv3d, 0, 32, 1, {2, 2, 1}});
      rows.push_back({Op::kBottleneck3d, 1, 16, 1, {1, 1, 1}});
      break;
  }
  rows.push_back({Op::kBottleneck2d, 6, 24, 2, {2, 2, 1}});
  rows.push_back({Op::kBottleneck2d, 6, 32, 3, {2, 2, 1}});
  rows.push_back({Op::kBottleneck2d, 6, 64, 4, {2, 2, 1}});
  rows.push_back({Op::kBottleneck2d, 6, 96, 3, {1, 1, 1}});
  rows.push_back({Op::kBottleneck2d, 6, 160, 3, {2, 2, 1}});
  rows.push_back({Op::kBottleneck2d, 6, 320, 1, {1, 1, 1}});
  rows.push_back({Op::kConv2d1x1, 0, 1280, 1, {1, 1, 1}});
  rows.push_back({Op::kAvgPool, 0, 0, 1, {1, 1, 1}});
  rows.push_back({Op::kClassifier, 0, 0, 1, {1, 1, 1}});
  if (variant == Variant::kSlowFusion) {
    for (auto& r : rows) {
      if (r.op == Op::kBottleneck2d) r.op = Op::kBottleneck3d;
    }
  }
  return rows;
}

Bottleneck build_bottleneck2d(int in_ch, int t, int base_c, int s,
                              double multiplier, Rng& rng) {
  return make_bottleneck(in_ch, t, scale_channels(base_c, multiplier),
                         {s, s, 1}, {3, 3, 1}, rng);
}

Bottleneck build_bottleneck3d(int in_ch, int t, int base_c,
                              std::array<int, 3> stride,
                              std::array<int, 3> kernel, double multiplier,
                              Rng& rng) {
  for (int i = 0; i < 3; ++i) {
    if (stride[i] < 1 || kernel[i] < 1) {
      throw ConfigError("bottleneck kernel and stride must be positive");
    }
  }
  return make_bottleneck(in_ch, t, scale_channels(base_c, multiplier), stride,
                         kernel, rng);
}

Model build_model(const NetworkConfig& config, std::uint64_t seed) {
  validate_config(config);
  Model m;
  m.config = config;
  Rng rng(seed);
  Cursor cur{config.spatial, config.spatial, column_frames(config), 1};
  int block = 0;
  for (LayerSpec row : architecture_rows(config.variant)) {
    if (row.op == Op::kBottleneck3d && row.stride[2] == 0) {
      row.stride[2] = cur.f;
    }
    const auto kernel = row_kernel(config.variant, row);
    const int out_ch = row_out_channels(row, cur, config);
    switch (row.op) {
      case Op::kConv3d: {
        ConvStage s;
        s.conv.kernel = kernel;
        s.conv.stride = row.stride;
        s.conv.in_channels = cur.c;
        s.conv.out_channels = out_ch;
        s.conv.weights = init_full_conv(kernel, cur.c, out_ch, rng);
        s.bn = ops::BatchNormParams::identity(out_ch);
        m.layers.emplace_back(std::move(s));
        m.names.push_back("stem");
        break;
      }
      case Op::kBottleneck3d:
      case Op::kBottleneck2d: {
        const int in_ch = cur.c;
        for (int r = 0; r < row.n; ++r) {
          m.layers.emplace_back(make_bottleneck(r == 0 ? in_ch : out_ch, row.t,
                                                out_ch,
                                                r == 0 ? row.stride : kNoStride,
                                                kernel, rng));
          m.names.push_back("block" + std::to_string(block++));
        }
        break;
      }
      case Op::kConv2d1x1:
        m.layers.emplace_back(make_pointwise_stage(cur.c, out_ch, true, rng));
        m.names.push_back("head");
        break;
      case Op::kAvgPool:
        m.layers.emplace_back(GlobalPoolStage{});
        m.names.push_back("pool");
        break;
      case Op::kClassifier: {
        ClassifierStage s;
        s.weights = init_pointwise(cur.c, config.classes, rng);
        s.bias = Tensor({config.classes});
        m.layers.emplace_back(std::move(s));
        m.names.push_back("classifier");
        break;
      }
    }
    advance_cursor(cur, row, out_ch);
    m.rows.push_back(row);
  }
  return m;
}

std::vector<ParamRef> Model::parameters() {
  std::vector<ParamRef> out;
  collect_refs(*this, false, out);
  return out;
}

std::vector<ParamRef> Model::buffers() {
  std::vector<ParamRef> out;
  collect_refs(*this, true, out);
  return out;
}

int Model::state_tensor_count() {
  return static_cast<int>(parameters().size() + buffers().size() +
                          optimizer_slots.size());
}

Tensor Model::forward(const Tensor& input) const {
  const ActShape in = ops::act_shape(input);
  check_forward_input(*this, in);
  const bool late = config.variant == Variant::kLateFusion;
  Tensor x = input;
  if (late) {
    if (!in.batched) x = x.reshaped({1, in.h, in.w, in.f, in.c});
    x = ops::frames_to_batch(x);
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (late && std::holds_alternative<ClassifierStage>(layers[i])) {
      x = ops::batch_group_mean(x, config.frames);
    }
    x = std::visit(
        Overload{
            [&](const ConvStage& l) { return apply_conv_stage(l, x); },
            [&](const Bottleneck& l) { return apply_bottleneck(l, x); },
            [&](const PointwiseStage& l) {
              return apply_pointwise_stage(l, x);
            },
            [&](const GlobalPoolStage&) { return ops::global_avg_pool(x); },
            [&](const ClassifierStage& l) {
              return ops::bias_add(ops::pointwise_conv(x, l.weights), l.bias);
            },
        },
        layers[i]);
  }
  const ActShape out = ops::act_shape(x);
  if (out.batched && in.batched) return x.reshaped({out.n, out.c});
  return x.reshaped({out.c});
}

std::vector<float> Model::predict(const Tensor& input) const {
  if (ops::act_shape(input).batched) {
    throw UsageError("predict takes one unbatched input");
  }
  const Tensor logits = forward(input);
  double hi = logits[0];
  for (int i = 1; i < logits.size(); ++i) hi = std::max<double>(hi, logits[i]);
  double z = 0.0;
  std::vector<double> e(logits.size());
  for (int i = 0; i < logits.size(); ++i) {
    e[i] = std::exp(double(logits[i]) - hi);
    z += e[i];
  }
  std::vector<float> probs(e.size());
  for (std::size_t i = 0; i < e.size(); ++i) {
    probs[i] = static_cast<float>(e[i] / z);
  }
  return probs;
}

TracedForward trace_forward(Model& model, autograd::Tape& tape,
                            const Tensor& input,
                            const std::vector<int>* targets,
                            const std::map<std::string, bool>* trainable) {
  const ActShape in = ops::act_shape(input);
  check_forward_input(model, in);
  if (model.inference_only || model.bn_folded) {
    throw UsageError("model was stripped for inference and cannot be trained");
  }
  TracedForward tf;
  std::map<std::string, Tape::Id> leaf;
  for (const auto& p : model.parameters()) {
    bool req = true;
    if (trainable) {
      auto it = trainable->find(p.name);
      if (it != trainable->end()) req = it->second;
    }
    const Tape::Id id = tape.leaf(*p.tensor, req);
    leaf.emplace(p.name, id);
    tf.param_ids.emplace_back(p.name, id);
  }
  Tensor in5 =
      in.batched ? input : input.reshaped({1, in.h, in.w, in.f, in.c});
  Tape::Id x = tape.leaf(std::move(in5), false);
  const bool late = model.config.variant == Variant::kLateFusion;
  if (late) x = tape.frames_to_batch(x);

  auto traced_bn = [&](Tape::Id h, ops::BatchNormParams& bn,
                       const std::string& prefix) {
    ops::BatchNormParams stats = bn;
    stats.mode = BnMode::kTraining;
    Tape::BnUpdate upd;
    const Tape::Id y = tape.batch_norm(h, leaf.at(prefix + ".gamma"),
                                       leaf.at(prefix + ".beta"), stats, &upd);
    bn.running_mean = std::move(upd.running_mean);
    bn.running_var = std::move(upd.running_var);
    return y;
  };
  auto traced_pw = [&](Tape::Id h, PointwiseStage& st,
                       const std::string& base) {
    h = tape.pointwise_conv(h, leaf.at(base + ".weight"));
    h = traced_bn(h, st.bn, base + ".bn");
    return st.relu6 ? tape.relu6(h) : h;
  };

  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const std::string& base = model.names[i];
    if (late && std::holds_alternative<ClassifierStage>(model.layers[i])) {
      x = tape.batch_group_mean(x, model.config.frames);
    }
    std::visit(Overload{
                   [&](ConvStage& l) {
                     x = tape.conv3d(x, leaf.at(base + ".conv.weight"),
                                     l.conv.kernel, l.conv.stride);
                     x = traced_bn(x, l.bn, base + ".bn");
                     x = tape.relu6(x);
                   },
                   [&](Bottleneck& l) {
                     const Tape::Id x0 = x;
                     if (l.expand) x = traced_pw(x, *l.expand, base + ".expand");
                     x = tape.depthwise_conv3d(x, leaf.at(base + ".dw.weight"),
                                               l.dw.conv.kernel,
                                               l.dw.conv.stride);
                     x = traced_bn(x, l.dw.bn, base + ".dw.bn");
                     x = tape.relu6(x);
                     x = traced_pw(x, l.project, base + ".project");
                     if (l.skip) x = tape.residual_add(x, x0);
                   },
                   [&](PointwiseStage& l) { x = traced_pw(x, l, base); },
                   [&](GlobalPoolStage&) { x = tape.global_avg_pool(x); },
                   [&](ClassifierStage& l) {
                     x = tape.pointwise_conv(x, leaf.at(base + ".weight"));
                     x = tape.bias_add(x, leaf.at(base + ".bias"));
                   },
               },
               model.layers[i]);
  }
  const ActShape out = ops::act_shape(tape.value(x));
  tf.logits = tape.reshape(x, {out.n, out.c});
  if (targets) {
    tf.loss = tape.softmax_cross_entropy(tf.logits, *targets, &tf.probs);
  }
  return tf;
}

std::vector<TraceRow> shape_trace(const Model& model) {
  std::vector<TraceRow> out;
  const NetworkConfig& cfg = model.config;
  Cursor cur{cfg.spatial, cfg.spatial, column_frames(cfg), 1};
  for (const LayerSpec& row : model.rows) {
    TraceRow tr;
    tr.input_dims = dims_str(cur);
    tr.op = op_str(row, cfg.variant);
    tr.t = row.t;
    const int out_ch = row_out_channels(row, cur, cfg);
    tr.c = row.op == Op::kAvgPool ? 0 : out_ch;
    tr.n = row.n;
    tr.stride = stride_str(row);
    out.push_back(std::move(tr));
    advance_cursor(cur, row, out_ch);
  }
  return out;
}

long long count_params(const Model& model) {
  long long total = 0;
  for (const auto& p : named_params(model)) total += p.tensor->size();
  return total;
}

std::vector<std::pair<std::string, long long>> flops_by_row(
    const Model& model) {
  const NetworkConfig& cfg = model.config;
  const bool late = cfg.variant == Variant::kLateFusion;
  std::vector<std::pair<std::string, long long>> out;
  Cursor cur{cfg.spatial, cfg.spatial, column_frames(cfg), 1};
  for (const LayerSpec& row : model.rows) {
    const auto k = row_kernel(cfg.variant, row);
    const int out_ch = row_out_channels(row, cur, cfg);
    long long macs = 0;
    switch (row.op) {
      case Op::kConv3d: {
        const long long pos = 1LL * ops::same_out_extent(cur.h, row.stride[0]) *
                              ops::same_out_extent(cur.w, row.stride[1]) *
                              ops::same_out_extent(cur.f, row.stride[2]);
        macs = pos * k[0] * k[1] * k[2] * cur.c * out_ch;
        break;
      }
      case Op::kBottleneck3d:
      case Op::kBottleneck2d: {
        Cursor in = cur;
        for (int r = 0; r < row.n; ++r) {
          const auto s = r == 0 ? row.stride : kNoStride;
          const int ci = r == 0 ? cur.c : out_ch;
          const int mid = ci * row.t;
          const long long in_pos = 1LL * in.h * in.w * in.f;
          const int oh = ops::same_out_extent(in.h, s[0]);
          const int ow = ops::same_out_extent(in.w, s[1]);
          const int of = ops::same_out_extent(in.f, s[2]);
          const long long out_pos = 1LL * oh * ow * of;
          if (row.t > 1) macs += in_pos * ci * mid;
          macs += out_pos * k[0] * k[1] * k[2] * mid;
          macs += out_pos * mid * out_ch;
          in = {oh, ow, of, out_ch};
        }
        break;
      }
      case Op::kConv2d1x1:
        macs = 1LL * cur.h * cur.w * cur.f * cur.c * out_ch;
        break;
      case Op::kAvgPool:
        macs = 0;
        break;
      case Op::kClassifier:
        macs = 1LL * cur.h * cur.w * cur.f * cur.c * cfg.classes;
        break;
    }
    if (late && row.op != Op::kClassifier) macs *= cfg.frames;
    out.emplace_back(op_str(row, cfg.variant), macs);
    advance_cursor(cur, row, out_ch);
  }
  return out;
}

long long count_flops(const Model& model) {
  long long total = 0;
  for (const auto& [name, macs] : flops_by_row(model)) total += macs;
  return total;
}

namespace {

// Pins the batch norm factors and drops its tensors. Inference already runs
// the bn affine inside the convolution (see apply_conv_stage and friends),
// so folding changes no bits; it saves recomputing the factors per call and
// removes four tensors of dead state per stage.
template <typename Stage>
void fold_stage_bn(Stage& s) {
  bn_fold_factors(s.bn, s.folded_scale, s.folded_shift);
  s.bn = {};
  s.bn_folded = true;
}

}  // namespace

Model strip_for_inference(const Model& model, bool fold_bn) {
  Model out = model;
  out.optimizer_slots.clear();
  out.inference_only = true;
  const bool fold = fold_bn && !out.bn_folded;
  for (auto& layer : out.layers) {
    std::visit(Overload{
                   [&](ConvStage& s) {
                     s.bn.mode = BnMode::kInference;
                     if (fold) fold_stage_bn(s);
                   },
                   [&](Bottleneck& b) {
                     if (b.expand) {
                       b.expand->bn.mode = BnMode::kInference;
                       if (fold) fold_stage_bn(*b.expand);
                     }
                     b.dw.bn.mode = BnMode::kInference;
                     b.project.bn.mode = BnMode::kInference;
                     if (fold) {
                       fold_stage_bn(b.dw);
                       fold_stage_bn(b.project);
                     }
                   },
                   [&](PointwiseStage& s) {
                     s.bn.mode = BnMode::kInference;
                     if (fold) fold_stage_bn(s);
                   },
                   [&](GlobalPoolStage&) {},
                   [&](ClassifierStage&) {},
               },
               layer);
  }
  if (fold) out.bn_folded = true;
  return out;
}

}  // namespace vigilnet::net
