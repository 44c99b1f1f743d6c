#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vigilnet/tensor.hpp"

namespace vigilnet::data {

// One labeled grayscale clip. Pixels are stored as 8-bit, frame-major
// ([frame][row][col]), decoded to [0,1] floats on the way into the network.
struct VideoRecord {
  int frames = 0;
  int height = 0;
  int width = 0;
  int label = 0;  // 0 = alert, 1 = drowsy
  std::vector<std::uint8_t> pixels;  // frames*height*width bytes

  std::uint8_t at(int f, int y, int x) const {
    return pixels[(static_cast<std::size_t>(f) * height + y) * width + x];
  }
};

// Clip decoded into the network's channels-last activation layout
// [height, width, frames, 1], values in [0,1].
Tensor to_tensor(const VideoRecord& record);
// Contiguous frame window [start, start+count) as [height, width, count, 1].
Tensor window_tensor(const VideoRecord& record, int start, int count);

// Raw frames prior to packing into records. Values in [0,1].
struct GrayFrame {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;  // height*width
};

struct ColorFrame {
  int height = 0;
  int width = 0;
  std::vector<float> rgb;  // height*width*3, interleaved, values in [0,1]
};

// 15 -> 30 fps by duplicating every frame in place: [A,B] -> [A,A,B,B].
std::vector<GrayFrame> fps_upsample(const std::vector<GrayFrame>& frames);

// Luma conversion (0.299 R + 0.587 G + 0.114 B) followed by a 2x box
// downscale, so 480x640 color becomes 240x320 grayscale. Both extents must
// be even.
GrayFrame resize_and_gray(const ColorFrame& frame);

// Chunk lengths for the two dataset splits.
enum class SplitMode { kTrain, kEval };
int chunk_frames(SplitMode mode);  // 100 for train, 10 for eval

// Cuts a frame sequence into consecutive non-overlapping records of the
// mode's chunk length; the trailing remainder is dropped. Fewer frames than
// one chunk yields an empty list.
std::vector<VideoRecord> split_video(const std::vector<GrayFrame>& frames,
                                     int label, SplitMode mode);

// Record container. Layout (little-endian): magic "DDR1", version u32,
// record count u64; per record: frames u32, height u32, width u32,
// label u8, then frames*height*width payload bytes. Round trips are
// bit-exact and reading consumes the file exactly.
void write_records(const std::vector<VideoRecord>& records,
                   const std::string& path);
std::vector<VideoRecord> read_records(const std::string& path);

// Dataset manifest: one line per record file,
// "path<TAB>count<TAB>frames<TAB>height<TAB>width". Relative paths are
// resolved against the manifest's own directory when loading.
struct ManifestEntry {
  std::string path;
  long long count = 0;
  int frames = 0;
  int height = 0;
  int width = 0;
};
void write_manifest(const std::vector<ManifestEntry>& entries,
                    const std::string& path);
std::vector<ManifestEntry> read_manifest(const std::string& path);
// Reads every file listed in a manifest, verifying each file's record
// count and shapes against its manifest line.
std::vector<VideoRecord> load_manifest_records(const std::string& path);

// Schematic stand-in for a dash-camera corpus: each clip renders a bright
// oval "face" over a dark background with an eye band whose temporal
// pattern defines the class. Alert clips (label 0) blink: the band is dark
// for at most 30% of frames. Drowsy clips (label 1) hold the band dark for
// at least 80% of frames, and half of them additionally nod (a monotone
// downward drift of the face across the clip). Both patterns cover the
// middle frame, and per-clip appearance parameters are drawn from the same
// distributions for both classes, so the middle frame alone carries no
// label information; the classes are separable only through time.
// Labels alternate (even index = alert), additive pixel noise, byte-exact
// reproducible from the seed.
std::vector<VideoRecord> generate_synthetic(int count, std::uint64_t seed,
                                            int frames = 10, int height = 240,
                                            int width = 320);

}  // namespace vigilnet::data
