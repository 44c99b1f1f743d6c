#pragma once

#include <atomic>
#include <cstdint>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "vigilnet/data.hpp"
#include "vigilnet/network.hpp"
#include "vigilnet/rng.hpp"
#include "vigilnet/tensor.hpp"

namespace vigilnet::stream {

// Rolling stack of the most recent frames, written by the capture thread
// and snapshotted by the inference worker. Pushes never wait on inference:
// the lock only guards short copies, and inference runs on the snapshot,
// never on the live ring. Sequence numbers are 1-based.
class FrameStack {
 public:
  FrameStack(int height, int width, int capacity);

  // Appends the newest frame ([height, width, 1]), evicting the oldest once
  // the ring is full. Returns the frame's sequence number.
  long long push_frame(const Tensor& frame);

  // True once capacity frames have been seen.
  bool ready() const;

  // Sequence number of the newest frame, 0 before the first push.
  long long latest_seq() const;

  struct Snapshot {
    Tensor frames;  // [height, width, capacity, 1]
    long long first = 0;
    long long last = 0;  // inclusive window; last - first == capacity - 1
  };

  // Consistent copy of the latest `capacity` consecutive frames, or nullopt
  // before the ring is ready. The window ends at the newest frame present
  // when the snapshot is taken.
  std::optional<Snapshot> snapshot_latest() const;

 private:
  const int height_;
  const int width_;
  const int capacity_;
  mutable std::mutex mu_;
  std::vector<Tensor> ring_;  // capacity slots, each [height, width, 1]
  long long seq_ = 0;
};

struct InferenceResult {
  double prob_drowsy = 0.0;
  long long first = 0;
  long long last = 0;
  // Newest sequence number available when the pass began; the freshness
  // property compares it against `last`.
  long long newest_at_start = 0;
  double started = 0.0;    // seconds since run start
  double completed = 0.0;
};

struct WarningPolicy {
  double threshold = 0.5;  // warn iff prob_drowsy > threshold, strictly
  bool emit_ok_events = true;
};

struct Event {
  bool warn = false;
  double timestamp = 0.0;  // result completion time
  long long first = 0;
  long long last = 0;
  double prob = 0.0;
};

// Applies the policy: WARN strictly above the threshold, otherwise an OK
// event when the policy emits them, otherwise nothing.
std::optional<Event> process_result(const InferenceResult& result,
                                    const WarningPolicy& policy);

// "timestamp<TAB>first-last<TAB>prob<TAB>WARN|OK"
std::string format_event(const Event& event);

// Pull-based frame provider with a declared capture rate. next() yields
// frames as [height, width, 1] tensors in [0,1], or nullopt when exhausted.
class FrameSource {
 public:
  virtual ~FrameSource() = default;
  virtual std::optional<Tensor> next() = 0;
  virtual double fps() const = 0;
};

// Replays the frames of a record list in order, optionally looping forever.
class RecordReplaySource : public FrameSource {
 public:
  RecordReplaySource(std::vector<data::VideoRecord> records, double fps,
                     bool loop = false);
  std::optional<Tensor> next() override;
  double fps() const override { return fps_; }

 private:
  std::vector<data::VideoRecord> records_;
  double fps_;
  bool loop_;
  std::size_t record_ = 0;
  int frame_ = 0;
};

// Replays a directory of raw grayscale frames: dims.txt holds "height
// width", and every *.gray file carries exactly height*width bytes. Files
// play in lexicographic order.
class DirectoryReplaySource : public FrameSource {
 public:
  DirectoryReplaySource(const std::string& dir, double fps);
  std::optional<Tensor> next() override;
  double fps() const override { return fps_; }

 private:
  std::vector<std::string> files_;
  double fps_;
  int height_ = 0;
  int width_ = 0;
  std::size_t index_ = 0;
};

// Endless stream of schematic clips rendered on demand, two at a time with
// balanced labels. Deterministic per seed.
class SyntheticSource : public FrameSource {
 public:
  SyntheticSource(std::uint64_t seed, double fps, int clip_frames, int height,
                  int width);
  std::optional<Tensor> next() override;
  double fps() const override { return fps_; }

 private:
  Rng rng_;
  double fps_;
  int clip_frames_;
  int height_;
  int width_;
  std::vector<data::VideoRecord> buffer_;
  std::size_t record_ = 0;
  int frame_ = 0;
};

struct MonitorConfig {
  WarningPolicy policy;
  double duration_s = 0.0;        // 0 = run until the source is exhausted
  double processing_delay_s = 0;  // artificial result-handling work
};

struct RunSummary {
  long long frames_received = 0;  // frames pushed by the producer
  long long frames_consumed = 0;  // distinct frames covered by some window
  long long inference_count = 0;
  long long warn_count = 0;
  long long ok_count = 0;
  long long results_dropped = 0;  // overwritten before the consumer ran
  double mean_latency_ms = 0.0;
  double max_latency_ms = 0.0;
  bool single_flight_ok = false;  // inference intervals never overlapped
  bool freshness_ok = false;      // every window ended at the newest frame
  bool overlap_observed = false;  // result processing overlapped an inference
  std::string stop_reason;        // "duration", "source", or "stop"
  std::vector<InferenceResult> results;
  std::vector<Event> events;
};

// Runs the three monitoring roles until the duration elapses, the source
// runs dry, or `stop` goes true: a producer paced at the source's declared
// fps that center-crops and rescales each frame to the model input size, a
// single-flight inference worker that always snapshots the latest window,
// and a results consumer fed through a depth-1 newest-wins handoff. Events
// are appended to `event_sink` as they happen when given. Requires a model
// stripped for inference.
RunSummary run_monitor(FrameSource& source, const net::Model& model,
                       const MonitorConfig& config,
                       std::ostream* event_sink = nullptr,
                       const std::atomic<bool>* stop = nullptr);

}  // namespace vigilnet::stream
