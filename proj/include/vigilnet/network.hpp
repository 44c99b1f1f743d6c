#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "vigilnet/autograd.hpp"
#include "vigilnet/ops.hpp"
#include "vigilnet/rng.hpp"
#include "vigilnet/tensor.hpp"

namespace vigilnet::net {

// Where temporal information enters the network: the first layers (3D stem
// and first bottleneck), per-frame feature averaging before the classifier,
// or 3D operations throughout.
enum class Variant { kOursEarly, kMobileNet2d, kLateFusion, kSlowFusion };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& name);

// One declarative architecture row: operator, expansion factor t, base
// output channels c (pre-multiplier), repeat count n, and the stride used by
// the first repeat.
struct LayerSpec {
  enum class Op {
    kConv3d,
    kBottleneck3d,
    kBottleneck2d,
    kConv2d1x1,
    kAvgPool,
    kClassifier,
  };
  Op op;
  int t = 0;  // 0 = not a bottleneck
  int c = 0;  // base output channels; 0 where not applicable
  int n = 1;
  std::array<int, 3> stride{1, 1, 1};
};

// Base (multiplier 1.0) rows for a variant. Temporal kernel/stride of the
// 3D rows are resolved against the frame count at build time.
std::vector<LayerSpec> architecture_rows(Variant variant);

struct NetworkConfig {
  Variant variant = Variant::kOursEarly;
  double depth_multiplier = 1.0;
  int frames = 10;
  int spatial = 224;  // input height == width; must be divisible by 32
  int classes = 2;
};

// Scales a base channel count: round to the nearest multiple of 8, never
// below 8, and never below 90% of the unrounded value (bump one step up).
int scale_channels(int base_c, double multiplier);

// ---- Instantiated stages -----------------------------------------------
// Convolutions carry no bias while batch norm follows them; folding BN at
// strip time absorbs it into a per-channel affine epilogue on the
// convolution (kept in double, applied before the single rounding).

struct ConvStage {  // full convolution + BN + ReLU6 (the stem)
  ops::ConvParams conv;
  ops::BatchNormParams bn;
  std::vector<double> folded_scale, folded_shift;
  bool bn_folded = false;
};

struct PointwiseStage {  // 1x1(x1) convolution + BN, ReLU6 unless linear
  Tensor weights;  // [in_channels, out_channels]
  ops::BatchNormParams bn;
  bool relu6 = true;
  std::vector<double> folded_scale, folded_shift;
  bool bn_folded = false;
};

struct DepthwiseStage {  // depthwise convolution + BN + ReLU6
  ops::ConvParams conv;
  ops::BatchNormParams bn;
  std::vector<double> folded_scale, folded_shift;
  bool bn_folded = false;
};

// Inverted residual: optional expand (absent when t == 1), depthwise
// filter, linear projection; skip iff stride 1 and channels match.
struct Bottleneck {
  std::optional<PointwiseStage> expand;
  DepthwiseStage dw;
  PointwiseStage project;
  bool skip = false;
};

struct GlobalPoolStage {};

struct ClassifierStage {  // final 1x1 convolution, with bias
  Tensor weights;  // [in_channels, classes]
  Tensor bias;     // [classes]
};

using Layer =
    std::variant<ConvStage, Bottleneck, PointwiseStage, GlobalPoolStage,
                 ClassifierStage>;

// A named handle on one parameter or buffer tensor inside a model.
struct ParamRef {
  std::string name;
  Tensor* tensor;
  bool bn_scale_shift = false;  // gamma/beta: excluded from weight decay
};

struct Model {
  NetworkConfig config;
  std::vector<LayerSpec> rows;       // declarative rows the model was built from
  std::vector<Layer> layers;         // one entry per instantiated stage
  std::vector<std::string> names;    // parallel to layers: stem, block0, ...
  bool inference_only = false;
  bool bn_folded = false;
  // Optimizer velocity slots, keyed by parameter name; owned here so that
  // training state travels with the model but strips away cleanly.
  std::map<std::string, Tensor> optimizer_slots;

  // Trainable parameters in a fixed traversal order.
  std::vector<ParamRef> parameters();
  // Batch-norm running statistics, same traversal order.
  std::vector<ParamRef> buffers();
  // Parameters + buffers + optimizer slots.
  int state_tensor_count();

  // Inference forward pass (batch-norm uses running statistics). Input is
  // [h,w,f,1] or [n,h,w,f,1] with f == config.frames; returns logits
  // [classes] or [n, classes].
  Tensor forward(const Tensor& input) const;
  // Softmax probabilities for one unbatched input.
  std::vector<float> predict(const Tensor& input) const;
};

Model build_model(const NetworkConfig& config, std::uint64_t seed = 42);

// Standalone block builders. base_c is scaled by `multiplier`; in_ch is the
// already-materialized input channel count.
Bottleneck build_bottleneck2d(int in_ch, int t, int base_c, int s,
                              double multiplier, Rng& rng);
Bottleneck build_bottleneck3d(int in_ch, int t, int base_c,
                              std::array<int, 3> stride,
                              std::array<int, 3> kernel, double multiplier,
                              Rng& rng);

// Training-mode forward recorded on a tape. Registers every parameter as a
// leaf (trainable per `trainable`, everything trainable when null), commits
// refreshed BN running statistics into the model, and, when targets are
// given, appends the mean cross-entropy loss.
struct TracedForward {
  autograd::Tape::Id logits = -1;
  autograd::Tape::Id loss = -1;
  Tensor probs;  // filled when targets are given
  std::vector<std::pair<std::string, autograd::Tape::Id>> param_ids;
};
TracedForward trace_forward(Model& model, autograd::Tape& tape,
                            const Tensor& input,
                            const std::vector<int>* targets,
                            const std::map<std::string, bool>* trainable);

// One row of the architecture trace: the stage's input dimensions plus the
// declarative row fields, formatted like the published table; a final
// pseudo-row carries the logits shape.
struct TraceRow {
  std::string input_dims;  // "224x224x10x1" (3D stages) or "112x112x24"
  std::string op;          // conv3d / bottleneck3d / bottleneck / conv2d 1x1 / avgpool
  int t = 0;               // 0 where absent
  int c = 0;               // scaled output channels, 0 where absent
  int n = 1;
  std::string stride;      // "2" or "[1, 1, 5]"; "-" where absent
};
std::vector<TraceRow> shape_trace(const Model& model);

long long count_params(const Model& model);
// Multiply-accumulates of one forward pass on a single sample.
long long count_flops(const Model& model);
// Per-row MAC counts in trace order; sums to count_flops. For the
// per-frame-column variant each shared-column row already includes the
// frame factor.
std::vector<std::pair<std::string, long long>> flops_by_row(const Model& model);

// Removes training-only state: optimizer slots dropped, batch norm pinned
// to inference mode. With fold_bn, each batch norm is absorbed into its
// convolution's per-channel affine epilogue and its tensors dropped.
// Forward outputs are bit-identical to the source model either way, since
// inference executes conv + bn fused to begin with.
Model strip_for_inference(const Model& model, bool fold_bn = false);

// Weight file round trip. Layout: magic "DSW1", format version u32 LE,
// metadata (variant u8, multiplier f64, frames u32, spatial u32,
// classes u32), tensor count u32, then per tensor: name length u16 +
// UTF-8 name, rank u8, extents u32 each, raw f32 LE values. Parameters and
// BN running statistics are stored; folded models are not serializable.
void save_weights(const Model& model, const std::string& path);
Model load_weights(const std::string& path);
// Loads into an existing model; file metadata and tensor manifest must
// match the model exactly.
void load_weights_into(Model& model, const std::string& path);

}  // namespace vigilnet::net
