#include "vigilnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "vigilnet/autograd.hpp"
#include "vigilnet/errors.hpp"

namespace vigilnet::train {

std::string to_string(FreezePolicy policy) {
  switch (policy) {
    case FreezePolicy::kAll: return "all";
    case FreezePolicy::kMost: return "most";
    case FreezePolicy::kFinal: return "final";
  }
  throw ConfigError("unknown freeze policy");
}

FreezePolicy freeze_policy_from_string(const std::string& name) {
  if (name == "all") return FreezePolicy::kAll;
  if (name == "most") return FreezePolicy::kMost;
  if (name == "final") return FreezePolicy::kFinal;
  throw ConfigError("unknown freeze policy '" + name +
                    "' (expected all, most, or final)");
}

namespace {

void check_config(const TrainConfig& c) {
  if (c.lr_initial < 0 || c.lr_min < 0 || c.lr_min > c.lr_initial) {
    throw ConfigError("learning rates must satisfy 0 <= lr_min <= lr_initial");
  }
  if (c.decay_factor <= 0 || c.decay_factor > 1) {
    throw ConfigError("decay_factor must lie in (0, 1]");
  }
  if (c.decay_every < 1) throw ConfigError("decay_every must be positive");
  if (c.momentum < 0 || c.momentum >= 1) {
    throw ConfigError("momentum must lie in [0, 1)");
  }
  if (c.weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (c.batch_size < 1) throw ConfigError("batch_size must be positive");
  if (c.max_steps < 0) throw ConfigError("max_steps must be >= 0");
  if (c.eval_every < 0) throw ConfigError("eval_every must be >= 0");
}

int argmax(const Tensor& logits) {
  int best = 0;
  for (std::int64_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = static_cast<int>(i);
  }
  return best;
}

}  // namespace

double lr_at(long long step, const TrainConfig& config) {
  if (step < 0) throw ConfigError("step must be >= 0");
  const double decayed =
      config.lr_initial *
      std::pow(config.decay_factor,
               static_cast<double>(step / config.decay_every));
  return std::max(config.lr_min, decayed);
}

void write_history(const std::string& path,
                   const std::vector<HistoryRow>& history) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "step\tlr\tloss\teval_accuracy\n";
  for (const auto& row : history) {
    out << row.step << '\t' << row.lr << '\t' << row.loss << '\t'
        << row.eval_accuracy << '\n';
  }
  if (!out.flush()) throw IoError("failed writing " + path);
}

void sgd_update(Tensor& weights, const Tensor& grads, Tensor& velocity,
                double lr, double momentum, double weight_decay) {
  if (!weights.same_shape(grads) || !weights.same_shape(velocity)) {
    throw ShapeError("sgd_update shapes disagree: weights " +
                     weights.shape_str() + ", grads " + grads.shape_str() +
                     ", velocity " + velocity.shape_str());
  }
  float* w = weights.data();
  const float* g = grads.data();
  float* v = velocity.data();
  for (std::int64_t i = 0; i < weights.size(); ++i) {
    const double adjusted = g[i] + weight_decay * w[i];
    const double vel = momentum * v[i] + adjusted;
    v[i] = static_cast<float>(vel);
    w[i] = static_cast<float>(w[i] - lr * vel);
  }
}

void sgd_step(net::Model& model, const std::map<std::string, Tensor>& grads,
              const std::map<std::string, bool>& trainable,
              OptimizerState& state, const TrainConfig& config) {
  const double lr = lr_at(state.step, config);
  for (const auto& p : model.parameters()) {
    const auto flag = trainable.find(p.name);
    if (flag != trainable.end() && !flag->second) continue;
    Tensor& v = model.optimizer_slots[p.name];
    if (!v.same_shape(*p.tensor)) v = Tensor(p.tensor->shape());
    const auto g = grads.find(p.name);
    const Tensor zero = g == grads.end() ? Tensor(p.tensor->shape()) : Tensor();
    const double wd = p.bn_scale_shift ? 0.0 : config.weight_decay;
    sgd_update(*p.tensor, g == grads.end() ? zero : g->second, v, lr,
               config.momentum, wd);
  }
  ++state.step;
}

std::map<std::string, bool> freeze_mask(net::Model& model,
                                        FreezePolicy policy) {
  // The temporal front: the stem and every block of the first bottleneck
  // row. Blocks are named in row order, so those are block0..block(n-1).
  std::vector<std::string> frozen;
  if (policy == FreezePolicy::kMost) {
    frozen.push_back("stem.");
    for (const auto& row : model.rows) {
      if (row.op == net::LayerSpec::Op::kBottleneck3d ||
          row.op == net::LayerSpec::Op::kBottleneck2d) {
        for (int i = 0; i < row.n; ++i) {
          frozen.push_back("block" + std::to_string(i) + ".");
        }
        break;
      }
    }
  }
  std::map<std::string, bool> mask;
  for (const auto& p : model.parameters()) {
    bool on = true;
    switch (policy) {
      case FreezePolicy::kAll:
        break;
      case FreezePolicy::kFinal:
        on = p.name.rfind("classifier.", 0) == 0;
        break;
      case FreezePolicy::kMost:
        for (const auto& prefix : frozen) {
          if (p.name.rfind(prefix, 0) == 0) {
            on = false;
            break;
          }
        }
        break;
    }
    mask.emplace(p.name, on);
  }
  return mask;
}

AugmentFn make_augment_fn(const augment::AugmentConfig& config) {
  return [config](const data::VideoRecord& record, Rng& rng) {
    return augment::augment_sample(record, config, rng);
  };
}

Tensor inference_input(const data::VideoRecord& record,
                       const net::NetworkConfig& config) {
  const int start = (record.frames - config.frames + 1) / 2;
  Tensor t = data::window_tensor(record, start, config.frames);
  if (record.height == config.spatial && record.width == config.spatial) {
    return t;
  }
  const int side = std::min(record.height, record.width);
  augment::CropBox box{(record.height - side) / 2, (record.width - side) / 2,
                       side, side};
  return augment::crop_and_resize(t, box, config.spatial, config.spatial);
}

double evaluate(const net::Model& model,
                const std::vector<data::VideoRecord>& dataset) {
  if (dataset.empty()) throw ConfigError("evaluation dataset is empty");
  int correct = 0;
  for (const auto& record : dataset) {
    if (record.label >= model.config.classes) {
      throw ConfigError("record label " + std::to_string(record.label) +
                        " out of range for " +
                        std::to_string(model.config.classes) + " classes");
    }
    const Tensor logits = model.forward(inference_input(record, model.config));
    if (argmax(logits) == record.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

std::vector<HistoryRow> train(net::Model& model,
                              const std::vector<data::VideoRecord>& train_set,
                              const std::vector<data::VideoRecord>& eval_set,
                              const TrainConfig& config,
                              const AugmentFn& augment_fn,
                              std::uint64_t seed) {
  check_config(config);
  if (train_set.empty()) throw ConfigError("training dataset is empty");
  for (const auto& r : train_set) {
    if (r.label >= model.config.classes) {
      throw ConfigError("record label " + std::to_string(r.label) +
                        " out of range for " +
                        std::to_string(model.config.classes) + " classes");
    }
  }
  const auto& measured = eval_set.empty() ? train_set : eval_set;
  const auto trainable = freeze_mask(model, config.freeze_policy);

  Rng root(seed);
  OptimizerState state;
  std::vector<HistoryRow> history;
  double loss_accum = 0.0;
  int loss_count = 0;
  const int n = static_cast<int>(train_set.size());

  for (int step = 1; step <= config.max_steps; ++step) {
    const double lr = lr_at(state.step, config);
    std::vector<int> targets;
    Tensor batch;
    for (int b = 0; b < config.batch_size; ++b) {
      const int idx = root.uniform_int(0, n - 1);
      Rng sample_rng = root.split();
      Tensor sample = augment_fn(train_set[static_cast<std::size_t>(idx)],
                                 sample_rng);
      if (sample.rank() != 4) {
        throw ShapeError("augment_fn must produce a [h,w,f,c] sample, got " +
                         sample.shape_str());
      }
      if (b == 0) {
        std::vector<int> dims = sample.shape();
        dims.insert(dims.begin(), config.batch_size);
        batch = Tensor(std::move(dims));
      } else if (sample.size() * config.batch_size != batch.size()) {
        throw ShapeError("augment_fn produced mismatched sample shapes");
      }
      std::copy(sample.values().begin(), sample.values().end(),
                batch.data() + static_cast<std::int64_t>(b) * sample.size());
      targets.push_back(train_set[static_cast<std::size_t>(idx)].label);
    }

    autograd::Tape tape;
    auto traced = net::trace_forward(model, tape, batch, &targets, &trainable);
    const double loss = tape.value(traced.loss)[0];
    if (!std::isfinite(loss)) {
      throw DivergenceError("mean batch loss became " + std::to_string(loss) +
                            " at step " + std::to_string(step));
    }
    tape.backward(traced.loss);
    std::map<std::string, Tensor> grads;
    for (const auto& [name, id] : traced.param_ids) {
      if (trainable.at(name)) grads.emplace(name, tape.grad_or_zero(id));
    }
    sgd_step(model, grads, trainable, state, config);

    loss_accum += loss;
    ++loss_count;
    const bool due = config.eval_every > 0 && step % config.eval_every == 0;
    if (due || step == config.max_steps) {
      HistoryRow row;
      row.step = step;
      row.lr = lr;
      row.loss = loss_accum / loss_count;
      row.eval_accuracy = evaluate(model, measured);
      history.push_back(row);
      loss_accum = 0.0;
      loss_count = 0;
    }
  }
  return history;
}

}  // namespace vigilnet::train
