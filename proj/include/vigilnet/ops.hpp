#pragma once

#include <array>
#include <vector>

#include "vigilnet/tensor.hpp"

namespace vigilnet::ops {

// Convolution description. Kernel and stride are ordered
// [height, width, frames]. Padding is always SAME: each output extent is
// ceil(in / stride) and the input is zero-padded symmetrically, with the
// extra cell (for odd totals) at the trailing edge.
template <typename T>
struct ConvParamsT {
  std::array<int, 3> kernel{1, 1, 1};
  std::array<int, 3> stride{1, 1, 1};
  int in_channels = 0;
  int out_channels = 0;
  // Full convolution: [kh, kw, kf, in_channels, out_channels].
  // Depthwise: [kh, kw, kf, channels] (one filter per channel).
  TensorT<T> weights;
};

using ConvParams = ConvParamsT<float>;

enum class BnMode { kTraining, kInference };

template <typename T>
struct BatchNormParamsT {
  TensorT<T> gamma;
  TensorT<T> beta;
  TensorT<T> running_mean;
  TensorT<T> running_var;
  T epsilon = static_cast<T>(1e-3);
  T momentum = static_cast<T>(0.99);
  BnMode mode = BnMode::kTraining;

  static BatchNormParamsT identity(int channels) {
    BatchNormParamsT p;
    p.gamma = TensorT<T>::full({channels}, T(1));
    p.beta = TensorT<T>({channels});
    p.running_mean = TensorT<T>({channels});
    p.running_var = TensorT<T>::full({channels}, T(1));
    return p;
  }
};

using BatchNormParams = BatchNormParamsT<float>;

// SAME-padding arithmetic, shared by every convolution and the cost model.
int same_out_extent(int in, int stride);
int same_pad_begin(int in, int kernel, int stride);

// Activations are rank 4 [h, w, f, c] or rank 5 [n, h, w, f, c].
// Normalized view used by the kernels; n is 1 for unbatched input.
struct ActShape {
  int n, h, w, f, c;
  bool batched;
};

template <typename T>
ActShape act_shape(const TensorT<T>& t);

std::vector<int> act_dims(const ActShape& s, int f, int c);  // keeps batchedness

// ---- Forward ----------------------------------------------------------

template <typename T>
TensorT<T> conv3d(const TensorT<T>& input, const ConvParamsT<T>& p);

template <typename T>
TensorT<T> depthwise_conv3d(const TensorT<T>& input, const ConvParamsT<T>& p);

// 1x1x1 convolution over channels; weights are [in_channels, out_channels].
template <typename T>
TensorT<T> pointwise_conv(const TensorT<T>& input, const TensorT<T>& weights);

// Convolutions with a per-output-channel affine epilogue: each output is
// sum*scale[c] + shift[c], applied inside the double accumulator with a
// single rounding. This is the absorbed (folded) form of an inference-mode
// batch norm that follows the convolution.
template <typename T>
TensorT<T> conv3d_affine(const TensorT<T>& input, const ConvParamsT<T>& p,
                         const std::vector<double>& scale,
                         const std::vector<double>& shift);
template <typename T>
TensorT<T> depthwise_conv3d_affine(const TensorT<T>& input,
                                   const ConvParamsT<T>& p,
                                   const std::vector<double>& scale,
                                   const std::vector<double>& shift);
template <typename T>
TensorT<T> pointwise_conv_affine(const TensorT<T>& input,
                                 const TensorT<T>& weights,
                                 const std::vector<double>& scale,
                                 const std::vector<double>& shift);

// Adds a per-channel bias over the last axis.
template <typename T>
TensorT<T> bias_add(const TensorT<T>& input, const TensorT<T>& bias);

template <typename T>
TensorT<T> relu6(const TensorT<T>& input);

template <typename T>
struct BatchNormResultT {
  TensorT<T> out;
  // Updated running statistics (training mode only; copies otherwise).
  TensorT<T> new_running_mean;
  TensorT<T> new_running_var;
  // Saved batch statistics for the backward pass.
  TensorT<T> saved_mean;
  TensorT<T> saved_inv_std;
};

template <typename T>
BatchNormResultT<T> batch_norm(const TensorT<T>& input,
                               const BatchNormParamsT<T>& p);

// Pools height, width and frames away entirely: [.., h, w, f, c] -> [.., 1, 1, 1, c].
template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& input);

template <typename T>
TensorT<T> residual_add(const TensorT<T>& a, const TensorT<T>& b);

// Moves the frame axis into the batch: [n,h,w,f,c] -> [n*f,h,w,1,c], frames
// of a sample kept adjacent. Used to run a per-frame column once over all
// frames.
template <typename T>
TensorT<T> frames_to_batch(const TensorT<T>& input);

// Averages groups of `group` consecutive batch rows: [n*group,1,1,1,c] ->
// [n,1,1,1,c]. Inverse companion of frames_to_batch after pooling.
template <typename T>
TensorT<T> batch_group_mean(const TensorT<T>& input, int group);

// Two-way softmax with cross-entropy. Logits hold exactly 2 values per
// sample; targets are class indices in {0, 1}. loss is the mean over the
// batch; probs has the logits' shape.
template <typename T>
struct SoftmaxXentResultT {
  TensorT<T> probs;
  std::vector<T> sample_losses;
  T loss;
};

template <typename T>
SoftmaxXentResultT<T> softmax_cross_entropy(const TensorT<T>& logits,
                                            const std::vector<int>& targets);

// ---- Backward ---------------------------------------------------------
// Each returns cotangents for the inputs that were requested; pass
// need_* = false to skip work (the tensor is left empty).

template <typename T>
struct ConvGradsT {
  TensorT<T> input;
  TensorT<T> weights;
};

template <typename T>
ConvGradsT<T> conv3d_backward(const TensorT<T>& input, const ConvParamsT<T>& p,
                              const TensorT<T>& grad_out, bool need_input,
                              bool need_weights);

template <typename T>
ConvGradsT<T> depthwise_conv3d_backward(const TensorT<T>& input,
                                        const ConvParamsT<T>& p,
                                        const TensorT<T>& grad_out,
                                        bool need_input, bool need_weights);

template <typename T>
ConvGradsT<T> pointwise_conv_backward(const TensorT<T>& input,
                                      const TensorT<T>& weights,
                                      const TensorT<T>& grad_out,
                                      bool need_input, bool need_weights);

template <typename T>
TensorT<T> bias_add_backward(const TensorT<T>& grad_out, int channels);

template <typename T>
TensorT<T> relu6_backward(const TensorT<T>& input, const TensorT<T>& grad_out);

template <typename T>
struct BatchNormGradsT {
  TensorT<T> input;
  TensorT<T> gamma;
  TensorT<T> beta;
};

template <typename T>
BatchNormGradsT<T> batch_norm_backward(const TensorT<T>& input,
                                       const BatchNormParamsT<T>& p,
                                       const BatchNormResultT<T>& saved,
                                       const TensorT<T>& grad_out,
                                       bool need_input, bool need_scale_shift);

template <typename T>
TensorT<T> global_avg_pool_backward(const std::vector<int>& input_shape,
                                    const TensorT<T>& grad_out);

// Upstream is the cotangent of the mean loss (usually 1).
template <typename T>
TensorT<T> softmax_cross_entropy_backward(const TensorT<T>& probs,
                                          const std::vector<int>& targets,
                                          T upstream);

template <typename T>
TensorT<T> frames_to_batch_backward(const TensorT<T>& grad_out, int frames);

template <typename T>
TensorT<T> batch_group_mean_backward(const TensorT<T>& grad_out, int group);

}  // namespace vigilnet::ops
