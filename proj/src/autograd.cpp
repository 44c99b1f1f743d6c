#include "vigilnet/autograd.hpp"

#include <utility>

namespace vigilnet::autograd {

template <typename T>
typename TapeT<T>::Id TapeT<T>::push_value(TensorT<T> value, bool needs) {
  values_.push_back(std::move(value));
  requires_.push_back(needs ? 1 : 0);
  return static_cast<Id>(values_.size() - 1);
}

template <typename T>
void TapeT<T>::check_id(Id id) const {
  if (id < 0 || id >= static_cast<Id>(values_.size())) {
    throw UsageError("tape id " + std::to_string(id) + " is not on this tape");
  }
}

template <typename T>
typename TapeT<T>::Id TapeT<T>::leaf(TensorT<T> value, bool requires_grad) {
  if (value.empty()) throw UsageError("cannot register an empty leaf");
  return push_value(std::move(value), requires_grad);
}

template <typename T>
const TensorT<T>& TapeT<T>::value(Id id) const {
  check_id(id);
  return values_[static_cast<std::size_t>(id)];
}

template <typename T>
bool TapeT<T>::requires_grad(Id id) const {
  check_id(id);
  return requires_[static_cast<std::size_t>(id)] != 0;
}

template <typename T>
void TapeT<T>::record(Id out, std::function<void()> vjp) {
  nodes_.push_back(Node{out, std::move(vjp)});
}

template <typename T>
void TapeT<T>::accumulate(Id id, TensorT<T> g) {
  if (!requires_[static_cast<std::size_t>(id)]) return;
  auto it = grads_.find(id);
  if (it == grads_.end()) {
    grads_.emplace(id, std::move(g));
    return;
  }
  TensorT<T>& acc = it->second;
  const T* src = g.data();
  T* dst = acc.data();
  for (std::int64_t i = 0; i < acc.size(); ++i) dst[i] += src[i];
}

template <typename T>
typename TapeT<T>::Id TapeT<T>::conv3d(Id input, Id weights,
                                       std::array<int, 3> kernel,
                                       std::array<int, 3> stride) {
  check_id(input);
  check_id(weights);
  const TensorT<T>& w = value(weights);
  if (w.rank() != 5) {
    throw ShapeError("conv3d weights must be rank 5, got " + w.shape_str());
  }
  ops::ConvParamsT<T> p;
  p.kernel = kernel;
  p.stride = stride;
  p.in_channels = w.extent(3);
  p.out_channels = w.extent(4);
  p.weights = w;
  bool req = requires_grad(input) || requires_grad(weights);
  Id out = push_value(ops::conv3d(value(input), p), req);
  if (req) {
    record(out, [this, input, weights, out, kernel, stride]() {
      ops::ConvParamsT<T> q;
      q.kernel = kernel;
      q.stride = stride;
      q.weights = value(weights);
      q.in_channels = q.weights.extent(3);
      q.out_channels = q.weights.extent(4);
      auto g = ops::conv3d_backward(value(input), q, upstream(out),
                                    requires_grad(input),
                                    requires_grad(weights));
      if (!g.input.empty()) accumulate(input, std::move(g.input));
      if (!g.weights.empty()) accumulate(weights, std::move(g.weights));
    });
  }
  return out;
}

template <typename T>
typename TapeT<T>::Id TapeT<T>::depthwise_conv3d(Id input, Id weights,
                                                 std::array<int, 3> kernel,
                                                 std::array<int, 3> stride) {
  check_id(input);
  check_id(weights);
  const TensorT<T>& w = value(weights);
  if (w.rank() != 4) {
    throw ShapeError("depthwise weights must be rank 4, got " + w.shape_str());
  }
  ops::ConvParamsT<T> p;
  p.kernel = kernel;
  p.stride = stride;
  p.in_channels = w.extent(3);
  p.out_channels = w.extent(3);
  p.weights = w;
  bool req = requires_grad(input) || requires_grad(weights);
  Id out = push_value(ops::depthwise_conv3d(value(input), p), req);
  if (req) {
    record(out, [this, input, weights, out, kernel, stride]() {
      ops::ConvParamsT<T> q;
      q.kernel = kernel;
      q.stride = stride;
      q.weights = value(weights);
      q.in_channels = q.weights.extent(3);
      q.out_channels = q.weights.extent(3);
      auto g = ops::depthwise_conv3d_backward(value(input), q, upstream(out),
                                              requires_grad(input),
                                              requires_grad(weights));
      if (!g.input.empty()) accumulate(input, std::move(g.input));
      if (!g.weights.empty()) accumulate(weights, std::move(g.weights));
    });
  }
  return out;
}

template <typename T>
typename TapeT<T>::Id TapeT<T>::pointwise_conv(Id input, Id weights) {
  check_id(input);
  check_id(weights);
  bool req = requires_grad(input) || requires_grad(weights);
  Id out = push_value(ops::pointwise_conv(value(input), value(weights)), req);
  if (req) {
    record(out, [this, input, weights, out]() {
      auto g = ops::pointwise_conv_backward(value(input), value(weights),
                                            upstream(out),
                                            requires_grad(input),
                                            requires_grad(weights));
      if (!g.input.empty()) accumulate(input, std::move(g.input));
      if (!g.weights.empty()) accumulate(weights, std::move(g.weights));
    });
  }
  return out;
}

template <typename T>
typename TapeT<T>::Id TapeT<T>::bias_add(Id input, Id bias) {
  check_id(input);
  check_id(bias);
  bool req = requires_grad(input) || requires_grad(bias);
  Id out = push_value(ops::bias_add(value(input), value(bias)), req);
  if (req) {
    int channels = value(bias).extent(0);
    record(out, [this, input, bias, out, channels]() {
      if (requires_grad(input)) accumulate(input, upstream(out));
      if (requires_grad(bias)) {
        accumulate(bias, ops::bias_add_backward(upstream(out), channels));
      }
    });
  }
  return out;
}

template <typename T>
typename TapeT<T>::Id TapeT<T>::relu6(Id input) {
  check_id(input);
  bool req = requires_grad(input);
  Id out = push_value(ops::relu6(value(input)), req);
  if (req) {
    record(out, [this, input, out]() {
      accumulate(input, ops::relu6_backward(value(input), upstream(out)));
    });
  }
  return out;
}

template <typename T>
typename TapeT<T>::Id TapeT<T>::batch_norm(Id input, Id gamma, Id beta,
                                           const ops::BatchNormParamsT<T>& stats,
                                           BnUpdate* updated) {
  check_id(input);
  check_id(gamma);
  check_id(beta);
  ops::BatchNormParamsT<T> p = stats;
  p.gamma = value(gamma);
  p.beta = value(beta);
  auto r = ops::batch_norm(value(input), p);
  if (updated) {
    updated->running_mean = r.new_running_mean;
    updated->running_var = r.new_running_var;
  }
  bool req = requires_grad(input) || requires_grad(gamma) ||
             requires_grad(beta);
  Id out = push_value(std::move(r.out), req);
  if (req) {
    ops::BatchNormResultT<T> saved;
    saved.saved_mean = std::move(r.saved_mean);
    saved.saved_inv_std = std::move(r.saved_inv_std);
    record(out, [this, input, gamma, beta, out, stats,
                 saved = std::move(saved)]() {
      ops::BatchNormParamsT<T> q = stats;
      q.gamma = value(gamma);
      q.beta = value(beta);
      bool need_ss = requires_grad(gamma) || requires_grad(beta);
      auto g = ops::batch_norm_backward(value(input), q, saved, upstream(out),
                                        requires_grad(input), need_ss);
      if (!g.input.empty()) accumulate(input, std::move(g.input));
      if (!g.gamma.empty()) accumulate(gamma, std::move(g.gamma));
      if (!g.beta.empty()) accumulate(beta, std::move(g.beta));
    });
  }
  return out;
}

template <typename T>
typename TapeT<T>::Id TapeT<T>::residual_add(Id a, Id b) {
  check_id(a);
  check_id(b);
  bool req = requires_grad(a) || requires_grad(b);
  Id out = push_value(ops::residual_add(value(a), value(b)), req);
  if (req) {
    record(out, [this, a, b, out]() {
      if (requires_grad(a)) accumulate(a, upstream(out));
      if (requires_grad(b)) accumulate(b, upstream(out));
    });
  }
  return out;
}

template <typename T>
typename TapeT<T>::Id TapeT<T>::global_avg_pool(Id input) {
  check_id(input);
  bool req = requires_grad(input);
  Id out = push_value(ops::global_avg_pool(value(input)), req);
  if (req) {
    std::vector<int> in_shape = value(input).shape();
    record(out, [this, input, out, in_shape]() {
      accumulate(input, ops::global_avg_pool_backward(in_shape, upstream(out)));
    });
  }
  return out;
}

template <typename T>
typename TapeT<T>::Id TapeT<T>::reshape(Id input, std::vector<int> dims) {
  check_id(input);
  bool req = requires_grad(input);
  Id out = push_value(value(input).reshaped(dims), req);
  if (req) {
    std::vector<int> in_shape = value(input).shape();
    record(out, [this, input, out, in_shape]() {
      accumulate(input, upstream(out).reshaped(in_shape));
    });
  }
  return out;
}

template <typename T>
typename TapeT<T>::Id TapeT<T>::frames_to_batch(Id input) {
  check_id(input);
  bool req = requires_grad(input);
  int frames = value(input).extent(3);
  Id out = push_value(ops::frames_to_batch(value(input)), req);
  if (req) {
    record(out, [this, input, out, frames]() {
      accumulate(input, ops::frames_to_batch_backward(upstream(out), frames));
    });
  }
  return out;
}

template <typename T>
typename TapeT<T>::Id TapeT<T>::batch_group_mean(Id input, int group) {
  check_id(input);
  bool req = requires_grad(input);
  Id out = push_value(ops::batch_group_mean(value(input), group), req);
  if (req) {
    record(out, [this, input, out, group]() {
      accumulate(input, ops::batch_group_mean_backward(upstream(out), group));
    });
  }
  return out;
}

template <typename T>
typename TapeT<T>::Id TapeT<T>::softmax_cross_entropy(Id logits,
                                                      std::vector<int> targets,
                                                      TensorT<T>* probs_out) {
  check_id(logits);
  auto r = ops::softmax_cross_entropy(value(logits), targets);
  if (probs_out) *probs_out = r.probs;
  bool req = requires_grad(logits);
  Id out = push_value(TensorT<T>({1}, {r.loss}), req);
  if (req) {
    record(out, [this, logits, out, targets = std::move(targets),
                 probs = std::move(r.probs)]() {
      T up = upstream(out)[0];
      accumulate(logits,
                 ops::softmax_cross_entropy_backward(probs, targets, up));
    });
  }
  return out;
}

template <typename T>
void TapeT<T>::backward(Id output) {
  check_id(output);
  if (nodes_.empty()) {
    throw UsageError("backward on a tape with no recorded operations");
  }
  if (value(output).size() != 1) {
    throw UsageError("backward output must be scalar, got " +
                     value(output).shape_str());
  }
  if (!requires_grad(output)) {
    throw UsageError("backward output does not depend on any "
                     "gradient-requiring leaf");
  }
  grads_.clear();
  grads_.emplace(output, TensorT<T>::full(value(output).shape(), T(1)));
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (grads_.find(it->out) == grads_.end()) continue;
    it->vjp();
  }
  backward_run_ = true;
}

template <typename T>
bool TapeT<T>::has_grad(Id id) const {
  check_id(id);
  return grads_.find(id) != grads_.end();
}

template <typename T>
const TensorT<T>& TapeT<T>::grad(Id id) const {
  check_id(id);
  if (!backward_run_) throw UsageError("grad requested before backward");
  auto it = grads_.find(id);
  if (it == grads_.end()) {
    throw UsageError("no gradient recorded for id " + std::to_string(id));
  }
  return it->second;
}

template <typename T>
TensorT<T> TapeT<T>::grad_or_zero(Id id) const {
  check_id(id);
  if (!backward_run_) throw UsageError("grad requested before backward");
  auto it = grads_.find(id);
  if (it == grads_.end()) return TensorT<T>(value(id).shape());
  return it->second;
}

template class TapeT<float>;
template class TapeT<double>;

}  // namespace vigilnet::autograd
