#include "vigilnet/augment.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vigilnet/errors.hpp"

namespace vigilnet::augment {

namespace {

void check_sample(const Tensor& sample) {
  if (sample.rank() != 4) {
    throw ShapeError("expected a [h,w,f,c] sample, got " + sample.shape_str());
  }
}

}  // namespace

int select_window_start(int frames, int window, Rng& rng) {
  if (window <= 0) {
    throw ConfigError("window length must be positive, got " +
                      std::to_string(window));
  }
  if (frames < window) {
    throw ShapeError("record has " + std::to_string(frames) +
                     " frames, need at least " + std::to_string(window));
  }
  return rng.uniform_int(0, frames - window);
}

Tensor select_window(const data::VideoRecord& record, int window, Rng& rng) {
  const int start = select_window_start(record.frames, window, rng);
  return data::window_tensor(record, start, window);
}

Tensor flip_horizontal(const Tensor& sample) {
  check_sample(sample);
  const int h = sample.extent(0);
  const int w = sample.extent(1);
  const std::int64_t row = sample.size() / (static_cast<std::int64_t>(h) * w);
  Tensor out(sample.shape());
  const float* in = sample.data();
  float* dst = out.data();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const float* src = in + ((static_cast<std::int64_t>(y) * w) + (w - 1 - x)) * row;
      for (std::int64_t i = 0; i < row; ++i) {
        dst[i] = src[i];
      }
      dst += row;
    }
  }
  return out;
}

Tensor maybe_flip(const Tensor& sample, double probability, Rng& rng) {
  if (rng.bernoulli(probability)) {
    return flip_horizontal(sample);
  }
  return sample;
}

Tensor shift_brightness(const Tensor& sample, double delta) {
  Tensor out = sample;
  const float d = static_cast<float>(delta);
  for (float& v : out.values()) {
    v = std::clamp(v + d, 0.0f, 1.0f);
  }
  return out;
}

Tensor distort_brightness(const Tensor& sample, double delta_max, Rng& rng) {
  return shift_brightness(sample, rng.uniform(-delta_max, delta_max));
}

int min_crop_height(int frame_height, int frame_width,
                    const AugmentConfig& config) {
  const double area = config.min_area_fraction *
                      static_cast<double>(frame_height) * frame_width;
  const int x = static_cast<int>(std::ceil(std::sqrt(area / config.aspect_hi)));
  return std::max(1, x);
}

bool crop_box_valid(const CropBox& box, int frame_height, int frame_width,
                    const AugmentConfig& config) {
  if (box.x < 1 || box.y < 1 || box.top < 0 || box.left < 0) return false;
  if (box.x > frame_height) return false;
  if (box.top + box.x > frame_height || box.left + box.y > frame_width) {
    return false;
  }
  const double frame = static_cast<double>(frame_height) * frame_width;
  if (static_cast<double>(box.x) * box.y < config.min_area_fraction * frame) {
    return false;
  }
  const double aspect = static_cast<double>(box.y) / box.x;
  return aspect >= config.aspect_lo && aspect <= config.aspect_hi;
}

CropBox sample_crop_box(int frame_height, int frame_width,
                        const AugmentConfig& config, Rng& rng) {
  if (frame_height < 1 || frame_width < 1) {
    throw ConfigError("cannot crop a " + std::to_string(frame_height) + "x" +
                      std::to_string(frame_width) + " frame");
  }
  const int x_min = min_crop_height(frame_height, frame_width, config);
  CropBox box;
  for (int tries = 0; x_min <= frame_height && tries < 100; ++tries) {
    box.x = rng.uniform_int(x_min, frame_height);
    const double aspect = rng.uniform(config.aspect_lo, config.aspect_hi);
    box.y = static_cast<int>(std::lround(aspect * box.x));
    box.top = 0;
    box.left = 0;
    // Rounding the width can drop the area below the floor or nudge the
    // aspect outside its band near the minimum height; redraw when it does.
    if (!crop_box_valid(box, frame_height, frame_width, config)) continue;
    box.top = rng.uniform_int(0, frame_height - box.x);
    box.left = rng.uniform_int(0, frame_width - box.y);
    return box;
  }
  box.x = frame_height;
  box.y = std::min(frame_width, frame_height);
  box.top = 0;
  box.left = 0;
  if (!crop_box_valid(box, frame_height, frame_width, config)) {
    throw ConfigError("no crop box satisfies the constraints for a " +
                      std::to_string(frame_height) + "x" +
                      std::to_string(frame_width) + " frame");
  }
  box.left = rng.uniform_int(0, frame_width - box.y);
  return box;
}

Tensor crop_and_resize(const Tensor& sample, const CropBox& box,
                       int out_height, int out_width) {
  check_sample(sample);
  if (out_height < 1 || out_width < 1) {
    throw ConfigError("output size must be positive");
  }
  const int h = sample.extent(0);
  const int w = sample.extent(1);
  if (box.x < 1 || box.y < 1 || box.top < 0 || box.left < 0 ||
      box.top + box.x > h || box.left + box.y > w) {
    throw ShapeError("crop box leaves the " + std::to_string(h) + "x" +
                     std::to_string(w) + " frame");
  }
  const std::int64_t row = sample.size() / (static_cast<std::int64_t>(h) * w);
  Tensor out({out_height, out_width, sample.extent(2), sample.extent(3)});
  const float* in = sample.data();
  float* dst = out.data();
  const double sy = static_cast<double>(box.x) / out_height;
  const double sx = static_cast<double>(box.y) / out_width;
  for (int oy = 0; oy < out_height; ++oy) {
    const double fy =
        std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(box.x - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, box.x - 1);
    const double wy = fy - y0;
    for (int ox = 0; ox < out_width; ++ox) {
      const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(box.y - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, box.y - 1);
      const double wx = fx - x0;
      const float* r00 = in + ((static_cast<std::int64_t>(box.top + y0) * w) +
                               (box.left + x0)) * row;
      const float* r01 = in + ((static_cast<std::int64_t>(box.top + y0) * w) +
                               (box.left + x1)) * row;
      const float* r10 = in + ((static_cast<std::int64_t>(box.top + y1) * w) +
                               (box.left + x0)) * row;
      const float* r11 = in + ((static_cast<std::int64_t>(box.top + y1) * w) +
                               (box.left + x1)) * row;
      for (std::int64_t i = 0; i < row; ++i) {
        const double top = r00[i] + wx * (r01[i] - r00[i]);
        const double bot = r10[i] + wx * (r11[i] - r10[i]);
        dst[i] = static_cast<float>(top + wy * (bot - top));
      }
      dst += row;
    }
  }
  return out;
}

Tensor augment_sample(const data::VideoRecord& record, const AugmentConfig& config,
                      Rng& rng) {
  Tensor sample = select_window(record, config.out_frames, rng);
  sample = maybe_flip(sample, config.flip_probability, rng);
  sample = distort_brightness(sample, config.brightness_delta_max, rng);
  const CropBox box =
      sample_crop_box(record.height, record.width, config, rng);
  return crop_and_resize(sample, box, config.out_height, config.out_width);
}

}  // namespace vigilnet::augment
