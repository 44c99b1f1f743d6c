#include "vigilnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vigilnet/errors.hpp"
#include "vigilnet/rng.hpp"

namespace vigilnet::data {
namespace {

constexpr char kMagic[4] = {'D', 'D', 'R', '1'};
constexpr std::uint32_t kVersion = 1;
// Single-record payload cap; rejects absurd extents before allocating.
constexpr std::uint64_t kMaxPayload = 1ull << 32;

void write_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out) throw IoError("write failed");
}

template <typename T>
void write_pod(std::ostream& out, T v) {
  write_bytes(out, &v, sizeof(T));
}

void read_bytes(std::istream& in, void* p, std::size_t n,
                const std::string& what) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw TruncatedError("file ends inside " + what);
  }
}

template <typename T>
T read_pod(std::istream& in, const std::string& what) {
  T v;
  read_bytes(in, &v, sizeof(T), what);
  return v;
}

void check_record(const VideoRecord& r, const std::string& which) {
  if (r.frames <= 0 || r.height <= 0 || r.width <= 0) {
    throw ShapeError(which + " has non-positive extents");
  }
  const auto expected = static_cast<std::size_t>(r.frames) * r.height * r.width;
  if (r.pixels.size() != expected) {
    throw ShapeError(which + " payload is " + std::to_string(r.pixels.size()) +
                     " bytes, extents say " + std::to_string(expected));
  }
  if (r.label != 0 && r.label != 1) {
    throw CorruptRecordError(which + " label " + std::to_string(r.label) +
                             " is not 0 or 1");
  }
}

std::uint8_t quantize(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

}  // namespace

Tensor to_tensor(const VideoRecord& record) {
  return window_tensor(record, 0, record.frames);
}

Tensor window_tensor(const VideoRecord& record, int start, int count) {
  check_record(record, "record");
  if (start < 0 || count <= 0 || start + count > record.frames) {
    throw ShapeError("window [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") outside " +
                     std::to_string(record.frames) + " frames");
  }
  Tensor out({record.height, record.width, count, 1});
  float* o = out.data();
  for (int y = 0; y < record.height; ++y) {
    for (int x = 0; x < record.width; ++x) {
      for (int f = 0; f < count; ++f) {
        *o++ = static_cast<float>(record.at(start + f, y, x)) / 255.0f;
      }
    }
  }
  return out;
}

std::vector<GrayFrame> fps_upsample(const std::vector<GrayFrame>& frames) {
  std::vector<GrayFrame> out;
  out.reserve(frames.size() * 2);
  for (const GrayFrame& f : frames) {
    out.push_back(f);
    out.push_back(f);
  }
  return out;
}

GrayFrame resize_and_gray(const ColorFrame& frame) {
  const int h = frame.height, w = frame.width;
  if (h <= 0 || w <= 0 || h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("expected even extents, got " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
  if (frame.rgb.size() != static_cast<std::size_t>(h) * w * 3) {
    throw ShapeError("rgb payload does not match extents");
  }
  // Luma per source pixel, then each output pixel averages its 2x2 block
  // (bilinear at half-pixel centers reduces to the block mean at scale 2).
  GrayFrame out;
  out.height = h / 2;
  out.width = w / 2;
  out.pixels.resize(static_cast<std::size_t>(out.height) * out.width);
  auto luma = [&](int y, int x) {
    const float* p = frame.rgb.data() + (static_cast<std::size_t>(y) * w + x) * 3;
    return 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
  };
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      const double sum = luma(2 * y, 2 * x) + luma(2 * y, 2 * x + 1) +
                         luma(2 * y + 1, 2 * x) + luma(2 * y + 1, 2 * x + 1);
      out.pixels[static_cast<std::size_t>(y) * out.width + x] =
          static_cast<float>(sum / 4.0);
    }
  }
  return out;
}

int chunk_frames(SplitMode mode) {
  return mode == SplitMode::kTrain ? 100 : 10;
}

std::vector<VideoRecord> split_video(const std::vector<GrayFrame>& frames,
                                     int label, SplitMode mode) {
  if (label != 0 && label != 1) {
    throw CorruptRecordError("label " + std::to_string(label) +
                             " is not 0 or 1");
  }
  const int chunk = chunk_frames(mode);
  const int records = static_cast<int>(frames.size()) / chunk;
  std::vector<VideoRecord> out;
  out.reserve(static_cast<std::size_t>(records));
  for (int r = 0; r < records; ++r) {
    VideoRecord rec;
    rec.frames = chunk;
    rec.height = frames[static_cast<std::size_t>(r) * chunk].height;
    rec.width = frames[static_cast<std::size_t>(r) * chunk].width;
    rec.label = label;
    rec.pixels.reserve(static_cast<std::size_t>(chunk) * rec.height *
                       rec.width);
    for (int f = 0; f < chunk; ++f) {
      const GrayFrame& src = frames[static_cast<std::size_t>(r) * chunk + f];
      if (src.height != rec.height || src.width != rec.width) {
        throw ShapeError("frame " + std::to_string(r * chunk + f) +
                         " size differs from the sequence");
      }
      for (float v : src.pixels) rec.pixels.push_back(quantize(v));
    }
    out.push_back(std::move(rec));
  }
  return out;
}

void write_records(const std::vector<VideoRecord>& records,
                   const std::string& path) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    check_record(records[i], "record " + std::to_string(i));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_bytes(out, kMagic, 4);
  write_pod(out, kVersion);
  write_pod(out, static_cast<std::uint64_t>(records.size()));
  for (const VideoRecord& r : records) {
    write_pod(out, static_cast<std::uint32_t>(r.frames));
    write_pod(out, static_cast<std::uint32_t>(r.height));
    write_pod(out, static_cast<std::uint32_t>(r.width));
    write_pod(out, static_cast<std::uint8_t>(r.label));
    write_bytes(out, r.pixels.data(), r.pixels.size());
  }
  out.flush();
  if (!out) throw IoError("write failed for " + path);
}

std::vector<VideoRecord> read_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4];
  read_bytes(in, magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw BadMagicError(path + " is not a record file (bad magic)");
  }
  const auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kVersion) {
    throw BadVersionError("unsupported record format version " +
                          std::to_string(version));
  }
  const auto count = read_pod<std::uint64_t>(in, "record count");
  std::vector<VideoRecord> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string which = "record " + std::to_string(i);
    VideoRecord r;
    r.frames = static_cast<int>(read_pod<std::uint32_t>(in, which));
    r.height = static_cast<int>(read_pod<std::uint32_t>(in, which));
    r.width = static_cast<int>(read_pod<std::uint32_t>(in, which));
    if (r.frames <= 0 || r.height <= 0 || r.width <= 0) {
      throw CorruptRecordError(which + " has zero extents");
    }
    const std::uint64_t payload = static_cast<std::uint64_t>(r.frames) *
                                  static_cast<std::uint64_t>(r.height) *
                                  static_cast<std::uint64_t>(r.width);
    if (payload > kMaxPayload) {
      throw CorruptRecordError(which + " payload is implausibly large");
    }
    const auto label = read_pod<std::uint8_t>(in, which);
    if (label > 1) {
      throw CorruptRecordError(which + " label byte " + std::to_string(label) +
                               " is not 0 or 1");
    }
    r.label = label;
    r.pixels.resize(static_cast<std::size_t>(payload));
    read_bytes(in, r.pixels.data(), r.pixels.size(), which + " payload");
    out.push_back(std::move(r));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw CorruptRecordError(path + " has trailing bytes after " +
                             std::to_string(count) + " records");
  }
  return out;
}

void write_manifest(const std::vector<ManifestEntry>& entries,
                    const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const ManifestEntry& e : entries) {
    out << e.path << '\t' << e.count << '\t' << e.frames << '\t' << e.height
        << '\t' << e.width << '\n';
  }
  out.flush();
  if (!out) throw IoError("write failed for " + path);
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream fields(line);
    ManifestEntry e;
    std::getline(fields, e.path, '\t');
    if (!(fields >> e.count >> e.frames >> e.height >> e.width) ||
        e.path.empty()) {
      throw IoError(path + ":" + std::to_string(lineno) +
                    ": malformed manifest line");
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<VideoRecord> load_manifest_records(const std::string& path) {
  const auto base = std::filesystem::path(path).parent_path();
  std::vector<VideoRecord> out;
  for (const ManifestEntry& e : read_manifest(path)) {
    std::filesystem::path p(e.path);
    if (p.is_relative()) p = base / p;
    std::vector<VideoRecord> records = read_records(p.string());
    if (static_cast<long long>(records.size()) != e.count) {
      throw ManifestMismatchError(
          e.path + " holds " + std::to_string(records.size()) +
          " records, manifest says " + std::to_string(e.count));
    }
    for (const VideoRecord& r : records) {
      if (r.frames != e.frames || r.height != e.height || r.width != e.width) {
        throw ManifestMismatchError(e.path +
                                    " record shape differs from manifest");
      }
    }
    std::move(records.begin(), records.end(), std::back_inserter(out));
  }
  return out;
}

namespace {

// Per-clip appearance and temporal script for the synthetic generator.
// Appearance fields are drawn identically for both classes; only the eye
// script and the nod drift differ, and both leave the middle frame looking
// the same across classes.
struct ClipPlan {
  double cy, cx;        // face center at the middle frame
  double ry, rx;        // oval semi-axes
  double face_b, bg_b, eye_b;
  double noise_sigma;
  double drop = 0.0;    // total downward drift, 0 unless nodding
  std::vector<char> eye_closed;
};

// Contiguous run of `len` closed-eye frames placed uniformly among the
// placements that cover the middle frame.
void place_run(std::vector<char>& closed, int len, Rng& rng) {
  const int f = static_cast<int>(closed.size());
  if (len <= 0) return;
  const int mid = f / 2;
  const int lo = std::max(0, mid - len + 1);
  const int hi = std::min(f - len, mid);
  const int start = rng.uniform_int(lo, hi);
  for (int i = start; i < start + len; ++i) closed[static_cast<std::size_t>(i)] = 1;
}

ClipPlan plan_clip(int label, int frames, int height, int width, Rng& rng) {
  ClipPlan p;
  p.cy = rng.uniform(0.40, 0.56) * height;
  p.cx = rng.uniform(0.42, 0.58) * width;
  p.ry = rng.uniform(0.26, 0.34) * height;
  p.rx = rng.uniform(0.17, 0.24) * width;
  p.face_b = rng.uniform(0.55, 0.75);
  p.bg_b = rng.uniform(0.08, 0.18);
  p.eye_b = rng.uniform(0.03, 0.12);
  p.noise_sigma = rng.uniform(0.01, 0.03);
  p.eye_closed.assign(static_cast<std::size_t>(frames), 0);
  const bool nod = rng.bernoulli(0.5);  // consumed by both classes alike
  if (label == 1) {
    const int len = rng.uniform_int((frames * 8 + 9) / 10, frames);
    place_run(p.eye_closed, len, rng);
    if (nod) p.drop = rng.uniform(0.10, 0.16) * height;
  } else {
    const int cap = (frames * 3) / 10;
    const int len = cap >= 2 ? rng.uniform_int(2, cap) : cap;
    place_run(p.eye_closed, len, rng);
  }
  return p;
}

void render_frame(const ClipPlan& p, int f, int frames, int height, int width,
                  Rng& rng, std::uint8_t* out) {
  // The face center at the middle frame is class-independent; a nod
  // distributes the drop symmetrically around it.
  const double rel =
      frames > 1 ? (f - (frames - 1) / 2.0) / (frames - 1) : 0.0;
  const double cy = p.cy + p.drop * rel;
  const bool closed = p.eye_closed[static_cast<std::size_t>(f)] != 0;
  const double ey = cy - 0.35 * p.ry;           // eye band center row
  const double eh = std::max(1.0, 0.10 * p.ry); // band half-height
  const double ew = 0.62 * p.rx;                // band half-width
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double dy = (y - cy) / p.ry;
      const double dx = (x - p.cx) / p.rx;
      double v = p.bg_b;
      if (dy * dy + dx * dx <= 1.0) {
        v = p.face_b;
        if (closed && std::abs(y - ey) <= eh && std::abs(x - p.cx) <= ew) {
          v = p.eye_b;
        }
      }
      v += p.noise_sigma * rng.normal();
      *out++ = quantize(static_cast<float>(v));
    }
  }
}

}  // namespace

std::vector<VideoRecord> generate_synthetic(int count, std::uint64_t seed,
                                            int frames, int height,
                                            int width) {
  if (count < 2) {
    throw ConfigError("need at least 2 records, got " + std::to_string(count));
  }
  if (frames < 4 || height < 16 || width < 16) {
    throw ConfigError("clip extents too small to render the pattern");
  }
  Rng root(seed);
  std::vector<VideoRecord> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng rng = root.split();
    VideoRecord rec;
    rec.frames = frames;
    rec.height = height;
    rec.width = width;
    rec.label = i % 2;
    rec.pixels.resize(static_cast<std::size_t>(frames) * height * width);
    const ClipPlan plan = plan_clip(rec.label, frames, height, width, rng);
    for (int f = 0; f < frames; ++f) {
      render_frame(plan, f, frames, height, width, rng,
                   rec.pixels.data() +
                       static_cast<std::size_t>(f) * height * width);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace vigilnet::data
