#include "vigilnet/stream.hpp"

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include "vigilnet/augment.hpp"
#include "vigilnet/errors.hpp"

namespace vigilnet::stream {

FrameStack::FrameStack(int height, int width, int capacity)
    : height_(height), width_(width), capacity_(capacity) {
  if (height < 1 || width < 1 || capacity < 1) {
    throw ConfigError("frame stack dimensions must be positive");
  }
  ring_.resize(static_cast<std::size_t>(capacity));
}

long long FrameStack::push_frame(const Tensor& frame) {
  if (frame.rank() != 3 || frame.extent(0) != height_ ||
      frame.extent(1) != width_ || frame.extent(2) != 1) {
    throw ShapeError("expected a [" + std::to_string(height_) + "," +
                     std::to_string(width_) + ",1] frame, got " +
                     frame.shape_str());
  }
  std::lock_guard<std::mutex> lock(mu_);
  ++seq_;
  ring_[static_cast<std::size_t>((seq_ - 1) % capacity_)] = frame;
  return seq_;
}

bool FrameStack::ready() const {
  std::lock_guard<std::mutex> lock(mu_);
  return seq_ >= capacity_;
}

long long FrameStack::latest_seq() const {
  std::lock_guard<std::mutex> lock(mu_);
  return seq_;
}

std::optional<FrameStack::Snapshot> FrameStack::snapshot_latest() const {
  std::lock_guard<std::mutex> lock(mu_);
  if (seq_ < capacity_) return std::nullopt;
  Snapshot snap;
  snap.last = seq_;
  snap.first = seq_ - capacity_ + 1;
  snap.frames = Tensor({height_, width_, capacity_, 1});
  float* out = snap.frames.data();
  for (int y = 0; y < height_; ++y) {
    for (int x = 0; x < width_; ++x) {
      for (int k = 0; k < capacity_; ++k) {
        const long long s = snap.first + k;
        const Tensor& f = ring_[static_cast<std::size_t>((s - 1) % capacity_)];
        *out++ = f[(static_cast<std::int64_t>(y) * width_ + x)];
      }
    }
  }
  return snap;
}

std::optional<Event> process_result(const InferenceResult& result,
                                    const WarningPolicy& policy) {
  const bool warn = result.prob_drowsy > policy.threshold;
  if (!warn && !policy.emit_ok_events) return std::nullopt;
  Event ev;
  ev.warn = warn;
  ev.timestamp = result.completed;
  ev.first = result.first;
  ev.last = result.last;
  ev.prob = result.prob_drowsy;
  return ev;
}

std::string format_event(const Event& event) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%.3f\t%lld-%lld\t%.4f\t%s",
                event.timestamp, event.first, event.last, event.prob,
                event.warn ? "WARN" : "OK");
  return buf;
}

RecordReplaySource::RecordReplaySource(std::vector<data::VideoRecord> records,
                                       double fps, bool loop)
    : records_(std::move(records)), fps_(fps), loop_(loop) {}

std::optional<Tensor> RecordReplaySource::next() {
  if (records_.empty()) return std::nullopt;
  if (record_ == records_.size()) {
    if (!loop_) return std::nullopt;
    record_ = 0;
    frame_ = 0;
  }
  const data::VideoRecord& rec = records_[record_];
  Tensor frame({rec.height, rec.width, 1});
  float* out = frame.data();
  for (int y = 0; y < rec.height; ++y) {
    for (int x = 0; x < rec.width; ++x) {
      *out++ = static_cast<float>(rec.at(frame_, y, x)) / 255.0f;
    }
  }
  if (++frame_ == rec.frames) {
    frame_ = 0;
    ++record_;
  }
  return frame;
}

DirectoryReplaySource::DirectoryReplaySource(const std::string& dir,
                                             double fps)
    : fps_(fps) {
  std::ifstream dims(dir + "/dims.txt");
  if (!dims) throw IoError("missing dims.txt in " + dir);
  dims >> height_ >> width_;
  if (!dims || height_ < 1 || width_ < 1) {
    throw IoError("dims.txt in " + dir + " must hold 'height width'");
  }
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() == ".gray") {
      files_.push_back(entry.path().string());
    }
  }
  std::sort(files_.begin(), files_.end());
}

std::optional<Tensor> DirectoryReplaySource::next() {
  if (index_ == files_.size()) return std::nullopt;
  const std::string& path = files_[index_++];
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const std::size_t count =
      static_cast<std::size_t>(height_) * static_cast<std::size_t>(width_);
  std::vector<unsigned char> bytes(count);
  in.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(in.gcount()) != count || in.peek() != EOF) {
    throw IoError(path + " does not hold exactly " + std::to_string(count) +
                  " bytes");
  }
  Tensor frame({height_, width_, 1});
  for (std::size_t i = 0; i < count; ++i) {
    frame[static_cast<std::int64_t>(i)] = static_cast<float>(bytes[i]) / 255.0f;
  }
  return frame;
}

SyntheticSource::SyntheticSource(std::uint64_t seed, double fps,
                                 int clip_frames, int height, int width)
    : rng_(seed), fps_(fps), clip_frames_(clip_frames), height_(height),
      width_(width) {}

std::optional<Tensor> SyntheticSource::next() {
  if (record_ == buffer_.size()) {
    buffer_ = data::generate_synthetic(2, rng_.next_u64(), clip_frames_,
                                       height_, width_);
    record_ = 0;
    frame_ = 0;
  }
  const data::VideoRecord& rec = buffer_[record_];
  Tensor frame({rec.height, rec.width, 1});
  float* out = frame.data();
  for (int y = 0; y < rec.height; ++y) {
    for (int x = 0; x < rec.width; ++x) {
      *out++ = static_cast<float>(rec.at(frame_, y, x)) / 255.0f;
    }
  }
  if (++frame_ == rec.frames) {
    frame_ = 0;
    ++record_;
  }
  return frame;
}

namespace {

// Ingestion scaling: center square crop, then bilinear resize to the model
// input size. Train-time distortions never run here.
Tensor scale_frame(const Tensor& frame, int spatial) {
  if (frame.rank() != 3 || frame.extent(2) != 1) {
    throw ShapeError("expected a [h,w,1] frame, got " + frame.shape_str());
  }
  const int h = frame.extent(0);
  const int w = frame.extent(1);
  if (h == spatial && w == spatial) return frame;
  const int side = std::min(h, w);
  augment::CropBox box{(h - side) / 2, (w - side) / 2, side, side};
  Tensor t = frame.reshaped({h, w, 1, 1});
  return augment::crop_and_resize(t, box, spatial, spatial)
      .reshaped({spatial, spatial, 1});
}

struct ProcessedInterval {
  double start = 0.0;
  double end = 0.0;
};

}  // namespace

RunSummary run_monitor(FrameSource& source, const net::Model& model,
                       const MonitorConfig& config, std::ostream* event_sink,
                       const std::atomic<bool>* stop) {
  if (!model.inference_only) {
    throw UsageError("monitor requires a model stripped for inference");
  }
  if (model.config.classes != 2) {
    throw ConfigError("monitor requires a 2-class model");
  }
  if (source.fps() <= 0) {
    throw ConfigError("source must declare a positive fps");
  }
  const int spatial = model.config.spatial;
  FrameStack stack(spatial, spatial, model.config.frames);

  const auto t0 = std::chrono::steady_clock::now();
  auto since_start = [t0] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         t0)
        .count();
  };

  std::atomic<bool> stopping{false};
  std::string stop_reason = "source";
  long long frames_received = 0;

  std::mutex slot_mu;
  std::condition_variable slot_cv;
  std::optional<InferenceResult> slot;
  bool closed = false;
  long long dropped = 0;

  std::vector<InferenceResult> results;
  std::vector<ProcessedInterval> processed;
  std::vector<Event> events;

  std::thread producer([&] {
    const double fps = source.fps();
    for (long long i = 0;; ++i) {
      const double sched = static_cast<double>(i) / fps;
      if (config.duration_s > 0 && sched >= config.duration_s) {
        stop_reason = "duration";
        break;
      }
      std::this_thread::sleep_until(
          t0 + std::chrono::duration<double>(sched));
      if (stop && stop->load()) {
        stop_reason = "stop";
        break;
      }
      auto frame = source.next();
      if (!frame) {
        stop_reason = "source";
        break;
      }
      stack.push_frame(scale_frame(*frame, spatial));
      ++frames_received;
    }
    stopping.store(true);
  });

  std::thread worker([&] {
    while (!stopping.load()) {
      if (!stack.ready()) {
        std::this_thread::sleep_for(std::chrono::microseconds(500));
        continue;
      }
      InferenceResult r;
      r.newest_at_start = stack.latest_seq();
      const auto snap = stack.snapshot_latest();
      r.first = snap->first;
      r.last = snap->last;
      r.started = since_start();
      r.prob_drowsy = model.predict(snap->frames)[1];
      r.completed = since_start();
      results.push_back(r);
      {
        std::lock_guard<std::mutex> lock(slot_mu);
        if (slot) ++dropped;
        slot = r;
      }
      slot_cv.notify_one();
    }
    {
      std::lock_guard<std::mutex> lock(slot_mu);
      closed = true;
    }
    slot_cv.notify_all();
  });

  std::thread consumer([&] {
    for (;;) {
      std::unique_lock<std::mutex> lock(slot_mu);
      slot_cv.wait(lock, [&] { return slot.has_value() || closed; });
      if (!slot) break;
      const InferenceResult r = *slot;
      slot.reset();
      lock.unlock();
      ProcessedInterval p;
      p.start = since_start();
      if (config.processing_delay_s > 0) {
        std::this_thread::sleep_for(
            std::chrono::duration<double>(config.processing_delay_s));
      }
      const auto ev = process_result(r, config.policy);
      p.end = since_start();
      processed.push_back(p);
      if (ev) {
        events.push_back(*ev);
        if (event_sink) *event_sink << format_event(*ev) << '\n';
      }
    }
  });

  producer.join();
  worker.join();
  consumer.join();

  RunSummary summary;
  summary.frames_received = frames_received;
  summary.inference_count = static_cast<long long>(results.size());
  summary.results_dropped = dropped;
  summary.stop_reason = stop_reason;
  summary.events = std::move(events);
  for (const auto& ev : summary.events) {
    if (ev.warn) {
      ++summary.warn_count;
    } else {
      ++summary.ok_count;
    }
  }

  summary.single_flight_ok = true;
  summary.freshness_ok = true;
  double latency_sum = 0.0;
  long long prev_end = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    if (i > 0 && r.started < results[i - 1].completed) {
      summary.single_flight_ok = false;
    }
    if (r.last < r.newest_at_start) summary.freshness_ok = false;
    const double latency = (r.completed - r.started) * 1000.0;
    latency_sum += latency;
    summary.max_latency_ms = std::max(summary.max_latency_ms, latency);
    const long long lo = std::max(r.first, prev_end + 1);
    if (r.last >= lo) summary.frames_consumed += r.last - lo + 1;
    prev_end = std::max(prev_end, r.last);
  }
  if (!results.empty()) {
    summary.mean_latency_ms = latency_sum / static_cast<double>(results.size());
  }

  // Two sorted sweeps: did any result-processing interval coincide with an
  // inference interval in flight?
  std::size_t j = 0;
  for (const auto& p : processed) {
    while (j < results.size() && results[j].completed <= p.start) ++j;
    if (j < results.size() && results[j].started < p.end) {
      summary.overlap_observed = true;
      break;
    }
  }
  summary.results = std::move(results);
  return summary;
}

}  // namespace vigilnet::stream
