#pragma once

#include <cstdint>

#include "vigilnet/data.hpp"
#include "vigilnet/rng.hpp"
#include "vigilnet/tensor.hpp"

namespace vigilnet::augment {

// Inner box cut from a frame before rescaling. x is the vertical extent
// (bounded by the frame height), y the horizontal extent.
struct CropBox {
  int top = 0;
  int left = 0;
  int x = 0;
  int y = 0;
};

// Train-time distortion settings. Defaults give the standard pipeline:
// flip half the samples, shift brightness by one uniform delta per sample,
// crop a box covering at least 55% of the frame with at most 4% aspect
// stretch, and rescale to the 224x224x10x1 network input.
struct AugmentConfig {
  double flip_probability = 0.5;
  double brightness_delta_max = 48.0 / 255.0;
  double min_area_fraction = 0.55;
  double aspect_lo = 0.96;
  double aspect_hi = 1.04;
  int out_height = 224;
  int out_width = 224;
  int out_frames = 10;
  // Root stream for callers that derive per-sample rngs by splitting.
  std::uint64_t seed = 0;
};

// Uniform start of a contiguous window, over [0, frames - window].
int select_window_start(int frames, int window, Rng& rng);

// Random contiguous window of a record as a [h, w, window, 1] tensor with
// values scaled to [0, 1].
Tensor select_window(const data::VideoRecord& record, int window, Rng& rng);

// Mirror every frame about the vertical axis.
Tensor flip_horizontal(const Tensor& sample);

// Flip all frames together with the given probability; one draw per sample.
Tensor maybe_flip(const Tensor& sample, double probability, Rng& rng);

// Add delta to every pixel, then clip to [0, 1].
Tensor shift_brightness(const Tensor& sample, double delta);

// Shift by a single delta drawn uniformly from [-delta_max, delta_max].
Tensor distort_brightness(const Tensor& sample, double delta_max, Rng& rng);

// Smallest crop height whose squarest allowed box still reaches the area
// floor: ceil(sqrt(min_area * h * w / aspect_hi)). 202 for a 240x320 frame
// at the default constraints.
int min_crop_height(int frame_height, int frame_width,
                    const AugmentConfig& config);

// Whether the box lies inside the frame and meets the height, area, and
// aspect constraints.
bool crop_box_valid(const CropBox& box, int frame_height, int frame_width,
                    const AugmentConfig& config);

// Draw a valid box: height uniform on [min_crop_height, frame_height],
// aspect uniform on [aspect_lo, aspect_hi], width rounded from them, and
// offsets uniform over the remaining slack. Draws that land below the area
// floor after rounding are rejected; after 100 rejections the sampler falls
// back to a full-height near-square box. Throws ConfigError when the
// constraints admit no box at all for the given frame.
CropBox sample_crop_box(int frame_height, int frame_width,
                        const AugmentConfig& config, Rng& rng);

// Crop each frame to the box, then resize to out_height x out_width with
// bilinear interpolation on half-pixel centers. Interpolation never reads
// outside the box. Throws ShapeError if the box leaves the frame.
Tensor crop_and_resize(const Tensor& sample, const CropBox& box,
                       int out_height, int out_width);

// Full pipeline: window, flip, brightness, crop, resize. Deterministic for
// a given rng state; output shape [out_height, out_width, out_frames, 1]
// with values in [0, 1].
Tensor augment_sample(const data::VideoRecord& record, const AugmentConfig& config,
                      Rng& rng);

}  // namespace vigilnet::augment
