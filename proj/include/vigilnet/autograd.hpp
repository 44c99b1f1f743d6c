#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "vigilnet/ops.hpp"

namespace vigilnet::autograd {

// Reverse-mode tape. Leaves are registered with leaf(); traced operations
// compute the forward value immediately and record a pull-back closure.
// backward() walks the recorded operations in reverse and accumulates
// cotangents into every value that requires a gradient. Values reachable
// only from frozen leaves record no closure, so their subgraphs cost
// nothing on the way back.
template <typename T>
class TapeT {
 public:
  using Id = int;

  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  Id leaf(TensorT<T> value, bool requires_grad = false);
  const TensorT<T>& value(Id id) const;
  bool requires_grad(Id id) const;
  std::size_t node_count() const { return nodes_.size(); }

  Id conv3d(Id input, Id weights, std::array<int, 3> kernel,
            std::array<int, 3> stride);
  Id depthwise_conv3d(Id input, Id weights, std::array<int, 3> kernel,
                      std::array<int, 3> stride);
  Id pointwise_conv(Id input, Id weights);
  Id bias_add(Id input, Id bias);
  Id relu6(Id input);

  struct BnUpdate {
    TensorT<T> running_mean;
    TensorT<T> running_var;
  };
  // gamma and beta are differentiable leaves; running statistics, epsilon,
  // momentum and mode come from `stats` (its gamma/beta fields are ignored).
  // In training mode the refreshed running statistics are written to
  // *updated when given.
  Id batch_norm(Id input, Id gamma, Id beta,
                const ops::BatchNormParamsT<T>& stats,
                BnUpdate* updated = nullptr);

  Id residual_add(Id a, Id b);
  Id global_avg_pool(Id input);
  Id reshape(Id input, std::vector<int> dims);
  Id frames_to_batch(Id input);
  Id batch_group_mean(Id input, int group);
  // Returns the scalar mean loss over the batch; per-sample probabilities
  // are written to *probs_out when given.
  Id softmax_cross_entropy(Id logits, std::vector<int> targets,
                           TensorT<T>* probs_out = nullptr);

  // Seeds d(output)=1 and pulls gradients back through the tape. `output`
  // must be a scalar produced by a recorded operation.
  void backward(Id output);

  bool backward_run() const { return backward_run_; }
  bool has_grad(Id id) const;
  const TensorT<T>& grad(Id id) const;
  TensorT<T> grad_or_zero(Id id) const;

 private:
  struct Node {
    Id out;
    std::function<void()> vjp;
  };

  Id push_value(TensorT<T> value, bool needs);
  void record(Id out, std::function<void()> vjp);
  void accumulate(Id id, TensorT<T> g);
  const TensorT<T>& upstream(Id id) const { return grads_.at(id); }
  void check_id(Id id) const;

  std::vector<TensorT<T>> values_;
  std::vector<char> requires_;
  std::vector<Node> nodes_;
  std::unordered_map<Id, TensorT<T>> grads_;
  bool backward_run_ = false;
};

using Tape = TapeT<float>;
using Tape64 = TapeT<double>;

extern template class TapeT<float>;
extern template class TapeT<double>;

}  // namespace vigilnet::autograd
