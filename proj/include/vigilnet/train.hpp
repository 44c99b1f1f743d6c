#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "vigilnet/augment.hpp"
#include "vigilnet/data.hpp"
#include "vigilnet/network.hpp"
#include "vigilnet/rng.hpp"
#include "vigilnet/tensor.hpp"

namespace vigilnet::train {

// Which parameters stay fixed during training: none of them, the temporal
// front of the network (stem plus the first bottleneck stage), or everything
// except the classifier.
enum class FreezePolicy { kAll, kMost, kFinal };

std::string to_string(FreezePolicy policy);
FreezePolicy freeze_policy_from_string(const std::string& name);

struct TrainConfig {
  double lr_initial = 0.01;
  double lr_min = 0.0001;
  double decay_factor = 0.94;  // in (0, 1]
  int decay_every = 100;       // steps per decay; callers often map epochs
  double momentum = 0.9;       // in [0, 1)
  double weight_decay = 4e-5;
  int batch_size = 16;
  FreezePolicy freeze_policy = FreezePolicy::kAll;
  int max_steps = 0;
  int eval_every = 0;  // history row cadence; 0 records only the final step
};

// Stepped exponential decay with a floor:
// max(lr_min, lr_initial * decay_factor^floor(step / decay_every)).
double lr_at(long long step, const TrainConfig& config);

// One history row per eval interval. step counts batches consumed; loss is
// the mean batch loss since the previous row.
struct HistoryRow {
  long long step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double eval_accuracy = 0.0;
};

// Tab-separated history with a header line: step, lr, loss, eval_accuracy.
void write_history(const std::string& path,
                   const std::vector<HistoryRow>& history);

// In-place SGD update of one tensor: g' = g + weight_decay * w,
// v' = momentum * v + g', w' = w - lr * v'. Arithmetic runs in double with
// one rounding per element per tensor.
void sgd_update(Tensor& weights, const Tensor& grads, Tensor& velocity,
                double lr, double momentum, double weight_decay);

// Velocities live in model.optimizer_slots; this carries the step counter
// that drives the learning-rate schedule.
struct OptimizerState {
  long long step = 0;
};

// Applies sgd_update to every trainable parameter, creating zero velocity
// slots on first use. Weight decay skips batch-norm gamma/beta. Advances
// the step counter.
void sgd_step(net::Model& model, const std::map<std::string, Tensor>& grads,
              const std::map<std::string, bool>& trainable,
              OptimizerState& state, const TrainConfig& config);

// Per-parameter trainable flags for a policy. kMost freezes the stem and
// the first bottleneck stage; kFinal leaves only the classifier trainable.
// The trainable sets are nested: kFinal within kMost within kAll.
std::map<std::string, bool> freeze_mask(net::Model& model,
                                        FreezePolicy policy);

// Produces one training sample from a record; the rng is a per-sample
// stream split off the loop's root seed.
using AugmentFn = std::function<Tensor(const data::VideoRecord&, Rng&)>;

// The standard distortion pipeline as an AugmentFn.
AugmentFn make_augment_fn(const augment::AugmentConfig& config);

// Deterministic inference-time preprocessing: temporal window centered on
// the middle frame, center square crop, bilinear resize to the model input.
Tensor inference_input(const data::VideoRecord& record,
                       const net::NetworkConfig& config);

// Fraction of records whose argmax logit matches the label, using
// inference_input preprocessing. Throws ConfigError on an empty dataset.
double evaluate(const net::Model& model,
                const std::vector<data::VideoRecord>& dataset);

// Minibatch SGD for max_steps steps, sampling records uniformly with
// replacement. Deterministic for a fixed seed, dataset, and config. History
// accuracy is measured on eval_set, or on train_set when eval_set is empty.
// Throws ConfigError on an empty dataset and DivergenceError when the mean
// batch loss stops being finite.
std::vector<HistoryRow> train(net::Model& model,
                              const std::vector<data::VideoRecord>& train_set,
                              const std::vector<data::VideoRecord>& eval_set,
                              const TrainConfig& config,
                              const AugmentFn& augment_fn, std::uint64_t seed);

}  // namespace vigilnet::train
