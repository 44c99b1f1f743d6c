// Command line entry points: dataset synthesis, training, evaluation,
// one-shot inference, the streaming monitor, and the cost/latency bench.
// Every run is reproducible from its --seed plus the config echo written
// next to each artifact.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vigilnet/augment.hpp"
#include "vigilnet/data.hpp"
#include "vigilnet/errors.hpp"
#include "vigilnet/network.hpp"
#include "vigilnet/rng.hpp"
#include "vigilnet/stream.hpp"
#include "vigilnet/tensor.hpp"
#include "vigilnet/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace vigilnet;

namespace {

// Desk-scale defaults; 224 / 1.4 stay available behind flags.
struct NetFlags {
  std::string variant = "ours_early";
  double multiplier = 0.35;
  int frames = 10;
  int spatial = 96;
};

void add_net_flags(CLI::App* cmd, NetFlags& f) {
  cmd->add_option("--variant", f.variant,
                  "ours_early, mobilenet2d, late_fusion or slow_fusion");
  cmd->add_option("--multiplier", f.multiplier, "channel width multiplier");
  cmd->add_option("--frames", f.frames, "frames per input window");
  cmd->add_option("--spatial", f.spatial, "input height and width");
}

net::NetworkConfig to_network_config(const NetFlags& f) {
  net::NetworkConfig cfg;
  cfg.variant = net::variant_from_string(f.variant);
  cfg.depth_multiplier = f.multiplier;
  cfg.frames = f.frames;
  cfg.spatial = f.spatial;
  return cfg;
}

json network_json(const net::NetworkConfig& cfg) {
  return json{{"variant", net::to_string(cfg.variant)},
              {"multiplier", cfg.depth_multiplier},
              {"frames", cfg.frames},
              {"spatial", cfg.spatial},
              {"classes", cfg.classes}};
}

void write_run_config(const std::string& path, const json& config) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << config.dump(2) << '\n';
}

// Center square crop + resize of one window to the model's input size.
Tensor fit_window(const Tensor& window, int spatial) {
  const int h = window.extent(0);
  const int w = window.extent(1);
  if (h == spatial && w == spatial) return window;
  const int side = std::min(h, w);
  augment::CropBox box{(h - side) / 2, (w - side) / 2, side, side};
  return augment::crop_and_resize(window, box, spatial, spatial);
}

int run_synth(const std::string& out_dir, int count, int frames, int height,
              int width, bool force, std::uint64_t seed) {
  const fs::path dir(out_dir);
  const fs::path records_path = dir / "records.ddr1";
  const fs::path manifest_path = dir / "manifest.tsv";
  if (!force && (fs::exists(records_path) || fs::exists(manifest_path))) {
    throw UsageError(out_dir + " already holds a dataset; pass --force to overwrite");
  }
  const auto records = data::generate_synthetic(count, seed, frames, height, width);
  fs::create_directories(dir);
  data::write_records(records, records_path.string());
  data::ManifestEntry entry;
  entry.path = "records.ddr1";
  entry.count = static_cast<long long>(records.size());
  entry.frames = frames;
  entry.height = height;
  entry.width = width;
  data::write_manifest({entry}, manifest_path.string());
  write_run_config((dir / "run_config.json").string(),
                   json{{"command", "synth"},
                        {"seed", seed},
                        {"count", count},
                        {"frames", frames},
                        {"height", height},
                        {"width", width},
                        {"out", out_dir}});
  std::cout << "wrote " << records.size() << " records to "
            << records_path.string() << '\n';
  return 0;
}

int run_train(CLI::App* cmd, const std::string& manifest,
              const std::string& out, std::string history_path,
              const NetFlags& net_flags, train::TrainConfig tc,
              const std::string& freeze, bool finetune,
              const std::string& eval_manifest, double flip_prob,
              double brightness, double min_area, std::uint64_t seed) {
  // Preset first, explicit flags win.
  if (finetune) {
    if (cmd->count("--lr") == 0) tc.lr_initial = 0.005;
    if (cmd->count("--wd") == 0) tc.weight_decay = 1e-7;
  }
  tc.freeze_policy = train::freeze_policy_from_string(freeze);

  const auto records = data::load_manifest_records(manifest);
  std::vector<data::VideoRecord> eval_records;
  if (!eval_manifest.empty()) {
    eval_records = data::load_manifest_records(eval_manifest);
  }
  if (cmd->count("--decay-every") == 0) {
    // Default decay cadence: two passes over the training set.
    const long long per_epoch =
        (static_cast<long long>(records.size()) + tc.batch_size - 1) /
        tc.batch_size;
    tc.decay_every = static_cast<int>(std::max(1LL, 2 * per_epoch));
  }

  const net::NetworkConfig cfg = to_network_config(net_flags);
  net::Model model = net::build_model(cfg, seed);

  augment::AugmentConfig ac;
  ac.flip_probability = flip_prob;
  ac.brightness_delta_max = brightness;
  ac.min_area_fraction = min_area;
  ac.out_height = cfg.spatial;
  ac.out_width = cfg.spatial;
  ac.out_frames = cfg.frames;
  ac.seed = seed;

  const auto history = train::train(model, records, eval_records, tc,
                                    train::make_augment_fn(ac), seed);
  net::save_weights(model, out);
  if (history_path.empty()) history_path = out + ".history.tsv";
  train::write_history(history_path, history);
  write_run_config(
      out + ".run.json",
      json{{"command", "train"},
           {"seed", seed},
           {"manifest", manifest},
           {"eval_manifest", eval_manifest},
           {"network", network_json(cfg)},
           {"train",
            json{{"lr_initial", tc.lr_initial},
                 {"lr_min", tc.lr_min},
                 {"decay_factor", tc.decay_factor},
                 {"decay_every", tc.decay_every},
                 {"momentum", tc.momentum},
                 {"weight_decay", tc.weight_decay},
                 {"batch_size", tc.batch_size},
                 {"freeze", train::to_string(tc.freeze_policy)},
                 {"max_steps", tc.max_steps},
                 {"eval_every", tc.eval_every}}},
           {"augment",
            json{{"flip_probability", ac.flip_probability},
                 {"brightness_delta_max", ac.brightness_delta_max},
                 {"min_area_fraction", ac.min_area_fraction},
                 {"aspect_lo", ac.aspect_lo},
                 {"aspect_hi", ac.aspect_hi}}},
           {"weights", out},
           {"history", history_path}});
  if (!history.empty()) {
    const auto& last = history.back();
    std::printf("step %lld\tlr %.6f\tloss %.4f\teval_accuracy %.4f\n",
                last.step, last.lr, last.loss, last.eval_accuracy);
  }
  std::cout << "wrote " << out << " and " << history_path << '\n';
  return 0;
}

int run_eval(const std::string& weights, const std::string& manifest) {
  const net::Model model = net::load_weights(weights);
  const auto records = data::load_manifest_records(manifest);
  const double accuracy = train::evaluate(model, records);
  std::printf("accuracy\t%.4f\trecords\t%zu\n", accuracy, records.size());
  return 0;
}

int run_infer(const std::string& weights, const std::string& records_path) {
  const net::Model model = net::load_weights(weights);
  const auto records = data::read_records(records_path);
  const int window = model.config.frames;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    if (rec.frames < window) {
      throw UsageError("record " + std::to_string(i) + " has " +
                       std::to_string(rec.frames) + " frames, model needs " +
                       std::to_string(window));
    }
    const int windows = rec.frames / window;
    for (int w = 0; w < windows; ++w) {
      const int first = w * window;
      const Tensor input = fit_window(
          data::window_tensor(rec, first, window), model.config.spatial);
      const float prob = model.predict(input)[1];
      std::printf("%zu\t%d-%d\t%.4f\n", i, first, first + window - 1, prob);
    }
  }
  return 0;
}

int run_monitor(const std::string& weights, const std::string& source_kind,
                const std::string& records_path, const std::string& dir_path,
                double fps, double duration, double threshold, bool warn_only,
                double delay, bool loop, int clip_frames,
                const std::string& events_path, std::uint64_t seed) {
  const net::Model model =
      net::strip_for_inference(net::load_weights(weights));

  std::unique_ptr<stream::FrameSource> source;
  if (source_kind == "synth") {
    if (duration <= 0) {
      throw UsageError("the synthetic source never ends; pass --duration");
    }
    source = std::make_unique<stream::SyntheticSource>(
        seed, fps, clip_frames, model.config.spatial, model.config.spatial);
  } else if (source_kind == "records") {
    if (records_path.empty()) throw UsageError("--records is required");
    source = std::make_unique<stream::RecordReplaySource>(
        data::read_records(records_path), fps, loop);
    if (loop && duration <= 0) {
      throw UsageError("a looped replay never ends; pass --duration");
    }
  } else if (source_kind == "dir") {
    if (dir_path.empty()) throw UsageError("--dir is required");
    source = std::make_unique<stream::DirectoryReplaySource>(dir_path, fps);
  } else {
    throw UsageError("unknown source '" + source_kind +
                     "'; expected synth, records or dir");
  }

  stream::MonitorConfig mc;
  mc.policy.threshold = threshold;
  mc.policy.emit_ok_events = !warn_only;
  mc.duration_s = duration;
  mc.processing_delay_s = delay;

  std::ofstream events_file;
  std::ostream* sink = &std::cout;
  if (!events_path.empty()) {
    events_file.open(events_path);
    if (!events_file) throw IoError("cannot write " + events_path);
    sink = &events_file;
  }

  const stream::RunSummary summary =
      stream::run_monitor(*source, model, mc, sink);

  if (!events_path.empty()) {
    write_run_config(events_path + ".run.json",
                     json{{"command", "monitor"},
                          {"seed", seed},
                          {"weights", weights},
                          {"source", source_kind},
                          {"fps", fps},
                          {"duration_s", duration},
                          {"threshold", threshold},
                          {"warn_only", warn_only},
                          {"processing_delay_s", delay},
                          {"events", events_path}});
  }

  std::printf("summary\n");
  std::printf("  stop_reason\t%s\n", summary.stop_reason.c_str());
  std::printf("  frames_received\t%lld\n", summary.frames_received);
  std::printf("  frames_consumed\t%lld\n", summary.frames_consumed);
  std::printf("  inferences\t%lld\n", summary.inference_count);
  std::printf("  mean_latency_ms\t%.3f\n", summary.mean_latency_ms);
  std::printf("  max_latency_ms\t%.3f\n", summary.max_latency_ms);
  std::printf("  warn_events\t%lld\n", summary.warn_count);
  std::printf("  ok_events\t%lld\n", summary.ok_count);
  std::printf("  results_dropped\t%lld\n", summary.results_dropped);
  std::printf("  single_flight\t%s\n", summary.single_flight_ok ? "ok" : "VIOLATED");
  std::printf("  freshness\t%s\n", summary.freshness_ok ? "ok" : "VIOLATED");
  std::printf("  overlap_observed\t%s\n", summary.overlap_observed ? "yes" : "no");
  if (!summary.single_flight_ok || !summary.freshness_ok) return 1;
  return 0;
}

std::vector<std::string> split_csv(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int run_bench(const std::string& variants_csv, const std::string& mults_csv,
              const std::string& frames_csv, int spatial, int reps,
              int warmup, const std::string& out_path, std::uint64_t seed) {
  if (reps < 1 || warmup < 0) {
    throw ConfigError("bench needs reps >= 1 and warmup >= 0");
  }
  std::ostringstream table;
  table << "variant\tmultiplier\tframes\tspatial\tparams\tmacs\tmacs_2d_tail"
           "\tlatency_ms_median\treps\tlatency_ms_stddev\n";
  for (const std::string& variant : split_csv(variants_csv)) {
    for (const std::string& mult : split_csv(mults_csv)) {
      for (const std::string& frames : split_csv(frames_csv)) {
        net::NetworkConfig cfg;
        cfg.variant = net::variant_from_string(variant);
        cfg.depth_multiplier = std::stod(mult);
        cfg.frames = std::stoi(frames);
        cfg.spatial = spatial;
        const net::Model model = net::build_model(cfg, seed);
        const long long params = net::count_params(model);
        const long long macs = net::count_flops(model);
        long long tail = 0;
        for (const auto& [op, row_macs] : net::flops_by_row(model)) {
          if (op != "conv3d" && op != "conv2d" && op != "bottleneck3d") {
            tail += row_macs;
          }
        }

        const net::Model runner = net::strip_for_inference(model, true);
        Rng rng(seed);
        Tensor input({cfg.spatial, cfg.spatial, cfg.frames, 1});
        for (std::int64_t i = 0; i < input.size(); ++i) {
          input[i] = static_cast<float>(rng.uniform());
        }
        for (int i = 0; i < warmup; ++i) (void)runner.predict(input);
        std::vector<double> ms(static_cast<std::size_t>(reps));
        for (int i = 0; i < reps; ++i) {
          const auto t0 = std::chrono::steady_clock::now();
          (void)runner.predict(input);
          const auto t1 = std::chrono::steady_clock::now();
          ms[static_cast<std::size_t>(i)] =
              std::chrono::duration<double, std::milli>(t1 - t0).count();
        }
        std::sort(ms.begin(), ms.end());
        const std::size_t mid = ms.size() / 2;
        const double median = ms.size() % 2 == 1
                                  ? ms[mid]
                                  : 0.5 * (ms[mid - 1] + ms[mid]);
        double mean = 0.0;
        for (double v : ms) mean += v;
        mean /= static_cast<double>(ms.size());
        double var = 0.0;
        for (double v : ms) var += (v - mean) * (v - mean);
        const double stddev =
            ms.size() > 1 ? std::sqrt(var / static_cast<double>(ms.size() - 1))
                          : 0.0;

        char row[256];
        std::snprintf(row, sizeof(row),
                      "%s\t%s\t%s\t%d\t%lld\t%lld\t%lld\t%.3f\t%d\t%.3f\n",
                      variant.c_str(), mult.c_str(), frames.c_str(), spatial,
                      params, macs, tail, median, reps, stddev);
        table << row;
      }
    }
  }
  std::cout << table.str();
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw IoError("cannot write " + out_path);
    out << table.str();
    write_run_config(out_path + ".run.json",
                     json{{"command", "bench"},
                          {"seed", seed},
                          {"variants", variants_csv},
                          {"multipliers", mults_csv},
                          {"frames", frames_csv},
                          {"spatial", spatial},
                          {"reps", reps},
                          {"warmup", warmup},
                          {"out", out_path}});
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"drowsiness monitor: synthesis, training, inference, bench"};
  app.require_subcommand(1);
  std::uint64_t seed = 42;

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string synth_out;
  int synth_count = 200;
  int synth_frames = 10;
  int synth_height = 240;
  int synth_width = 320;
  bool synth_force = false;
  synth->add_option("out", synth_out, "output directory")->required();
  synth->add_option("--count", synth_count, "number of records");
  synth->add_option("--frames", synth_frames, "frames per record");
  synth->add_option("--height", synth_height, "frame height");
  synth->add_option("--width", synth_width, "frame width");
  synth->add_flag("--force", synth_force, "overwrite an existing dataset");
  synth->add_option("--seed", seed, "rng seed");

  // train
  auto* tr = app.add_subcommand("train", "train a model on a manifest");
  std::string train_manifest;
  std::string train_out = "weights.dsw1";
  std::string train_history;
  std::string train_eval_manifest;
  std::string train_freeze = "all";
  bool finetune = false;
  NetFlags train_net;
  train::TrainConfig tc;
  double flip_prob = 0.5;
  double brightness = 48.0 / 255.0;
  double min_area = 0.55;
  tr->add_option("manifest", train_manifest, "training manifest")->required();
  tr->add_option("--out", train_out, "weight file to write");
  tr->add_option("--history", train_history,
                 "history file (default: <out>.history.tsv)");
  tr->add_option("--eval-manifest", train_eval_manifest,
                 "held-out set for the history's accuracy column");
  add_net_flags(tr, train_net);
  tr->add_option("--lr", tc.lr_initial, "initial learning rate");
  tr->add_option("--lr-min", tc.lr_min, "learning rate floor");
  tr->add_option("--momentum", tc.momentum, "sgd momentum");
  tr->add_option("--wd", tc.weight_decay, "weight decay");
  tr->add_option("--batch", tc.batch_size, "batch size");
  tr->add_option("--steps", tc.max_steps, "optimization steps");
  tr->add_option("--decay-every", tc.decay_every,
                 "steps per lr decay (default: two epochs)");
  tr->add_option("--decay-factor", tc.decay_factor, "lr decay factor");
  tr->add_option("--eval-every", tc.eval_every,
                 "history row cadence (0: final step only)");
  tr->add_option("--freeze", train_freeze, "freeze policy: all, most or final");
  tr->add_flag("--finetune", finetune, "preset: --lr 0.005 --wd 1e-7");
  tr->add_option("--flip-prob", flip_prob, "horizontal flip probability");
  tr->add_option("--brightness", brightness, "max brightness shift");
  tr->add_option("--min-area", min_area, "min crop area fraction");
  tr->add_option("--seed", seed, "rng seed");

  // eval
  auto* ev = app.add_subcommand("eval", "report accuracy on a manifest");
  std::string eval_weights;
  std::string eval_manifest;
  ev->add_option("weights", eval_weights, "weight file")->required();
  ev->add_option("manifest", eval_manifest, "evaluation manifest")->required();
  ev->add_option("--seed", seed, "rng seed");

  // infer
  auto* in = app.add_subcommand("infer", "per-window probabilities for a record file");
  std::string infer_weights;
  std::string infer_records;
  in->add_option("weights", infer_weights, "weight file")->required();
  in->add_option("records", infer_records, "record container")->required();
  in->add_option("--seed", seed, "rng seed");

  // monitor
  auto* mon = app.add_subcommand("monitor", "streaming monitor with warnings");
  std::string mon_weights;
  std::string mon_source = "synth";
  std::string mon_records;
  std::string mon_dir;
  std::string mon_events;
  double mon_fps = 30.0;
  double mon_duration = 0.0;
  double mon_threshold = 0.5;
  double mon_delay = 0.0;
  bool mon_warn_only = false;
  bool mon_loop = false;
  int mon_clip_frames = 10;
  mon->add_option("weights", mon_weights, "weight file")->required();
  mon->add_option("--source", mon_source, "synth, records or dir");
  mon->add_option("--records", mon_records, "record container to replay");
  mon->add_option("--dir", mon_dir, "frame directory to replay");
  mon->add_option("--fps", mon_fps, "source frame rate");
  mon->add_option("--duration", mon_duration,
                  "seconds to run (0: until the source ends)");
  mon->add_option("--threshold", mon_threshold, "warning threshold");
  mon->add_flag("--warn-only", mon_warn_only, "suppress OK events");
  mon->add_option("--delay", mon_delay, "simulated result processing seconds");
  mon->add_flag("--loop", mon_loop, "cycle the record replay");
  mon->add_option("--clip-frames", mon_clip_frames,
                  "frames per synthetic clip");
  mon->add_option("--events", mon_events, "write events to a file");
  mon->add_option("--seed", seed, "rng seed");

  // bench
  auto* be = app.add_subcommand("bench", "params, MACs and forward latency");
  std::string bench_variants = "ours_early,mobilenet2d,late_fusion,slow_fusion";
  std::string bench_mults = "0.35";
  std::string bench_frames = "10";
  std::string bench_out;
  int bench_spatial = 96;
  int bench_reps = 20;
  int bench_warmup = 5;
  be->add_option("--variants", bench_variants, "comma-separated variants");
  be->add_option("--multipliers", bench_mults, "comma-separated multipliers");
  be->add_option("--frames", bench_frames, "comma-separated frame counts");
  be->add_option("--spatial", bench_spatial, "input height and width");
  be->add_option("--reps", bench_reps, "timed repetitions");
  be->add_option("--warmup", bench_warmup, "warm-up repetitions");
  be->add_option("--out", bench_out, "also write the table to a file");
  be->add_option("--seed", seed, "rng seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      return run_synth(synth_out, synth_count, synth_frames, synth_height,
                       synth_width, synth_force, seed);
    }
    if (tr->parsed()) {
      return run_train(tr, train_manifest, train_out, train_history, train_net,
                       tc, train_freeze, finetune, train_eval_manifest,
                       flip_prob, brightness, min_area, seed);
    }
    if (ev->parsed()) return run_eval(eval_weights, eval_manifest);
    if (in->parsed()) return run_infer(infer_weights, infer_records);
    if (mon->parsed()) {
      return run_monitor(mon_weights, mon_source, mon_records, mon_dir,
                         mon_fps, mon_duration, mon_threshold, mon_warn_only,
                         mon_delay, mon_loop, mon_clip_frames, mon_events,
                         seed);
    }
    if (be->parsed()) {
      return run_bench(bench_variants, bench_mults, bench_frames,
                       bench_spatial, bench_reps, bench_warmup, bench_out,
                       seed);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
