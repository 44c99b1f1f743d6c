#include "vigilnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

namespace vigilnet::ops {

int same_out_extent(int in, int stride) {
  if (in <= 0 || stride <= 0) {
    throw ConfigError("extent and stride must be positive, got in=" +
                      std::to_string(in) + " stride=" + std::to_string(stride));
  }
  return (in + stride - 1) / stride;
}

int same_pad_begin(int in, int kernel, int stride) {
  int out = same_out_extent(in, stride);
  int total = std::max(0, (out - 1) * stride + kernel - in);
  return total / 2;
}

template <typename T>
ActShape act_shape(const TensorT<T>& t) {
  if (t.rank() == 4) {
    return {1, t.extent(0), t.extent(1), t.extent(2), t.extent(3), false};
  }
  if (t.rank() == 5) {
    return {t.extent(0), t.extent(1), t.extent(2), t.extent(3), t.extent(4),
            true};
  }
  throw ShapeError("activation must be rank 4 [h,w,f,c] or rank 5 "
                   "[n,h,w,f,c], got " +
                   t.shape_str());
}

std::vector<int> act_dims(const ActShape& s, int f, int c) {
  if (s.batched) return {s.n, s.h, s.w, f, c};
  return {s.h, s.w, f, c};
}

namespace {

struct ActStrides {
  std::int64_t n, h, w, f;
};

ActStrides strides_of(const ActShape& s) {
  ActStrides st;
  st.f = s.c;
  st.w = st.f * s.f;
  st.h = st.w * s.w;
  st.n = st.h * s.h;
  return st;
}

struct ConvGeom {
  ActShape in;
  int oh, ow, of;
  int ph, pw, pf;
};

template <typename T>
ConvGeom conv_geometry(const TensorT<T>& input, const ConvParamsT<T>& p,
                       bool depthwise) {
  ConvGeom g;
  g.in = act_shape(input);
  const auto& k = p.kernel;
  const auto& st = p.stride;
  for (int i = 0; i < 3; ++i) {
    if (k[i] <= 0 || st[i] <= 0) {
      throw ConfigError("kernel and stride extents must be positive");
    }
  }
  if (g.in.c != p.in_channels) {
    throw ShapeError("input has " + std::to_string(g.in.c) +
                     " channels, convolution expects " +
                     std::to_string(p.in_channels));
  }
  std::vector<int> want =
      depthwise ? std::vector<int>{k[0], k[1], k[2], p.in_channels}
                : std::vector<int>{k[0], k[1], k[2], p.in_channels,
                                   p.out_channels};
  if (p.weights.shape() != want) {
    throw ShapeError("convolution weights are " + p.weights.shape_str() +
                     ", expected " + Tensor::shape_str(want));
  }
  if (depthwise && p.out_channels != p.in_channels) {
    throw ConfigError("depthwise convolution requires out_channels == "
                      "in_channels");
  }
  g.oh = same_out_extent(g.in.h, st[0]);
  g.ow = same_out_extent(g.in.w, st[1]);
  g.of = same_out_extent(g.in.f, st[2]);
  g.ph = same_pad_begin(g.in.h, k[0], st[0]);
  g.pw = same_pad_begin(g.in.w, k[1], st[1]);
  g.pf = same_pad_begin(g.in.f, k[2], st[2]);
  return g;
}

}  // namespace

namespace {

// scale/shift, when given, hold one factor per output channel; the epilogue
// computes acc*scale + shift before the single rounding to T.
template <typename T>
TensorT<T> conv3d_impl(const TensorT<T>& input, const ConvParamsT<T>& p,
                       const double* scale, const double* shift) {
  ConvGeom g = conv_geometry(input, p, /*depthwise=*/false);
  const ActShape& s = g.in;
  const int cin = p.in_channels, cout = p.out_channels;
  const int kh = p.kernel[0], kw = p.kernel[1], kf = p.kernel[2];
  const int s1 = p.stride[0], s2 = p.stride[1], s3 = p.stride[2];

  TensorT<T> out(act_dims(ActShape{s.n, g.oh, g.ow, g.of, cout, s.batched},
                          g.of, cout));
  ActStrides is = strides_of(s);
  ActStrides os = strides_of(ActShape{s.n, g.oh, g.ow, g.of, cout, s.batched});
  const T* in = input.data();
  const T* w = p.weights.data();
  T* o = out.data();

  // Accumulation runs in double regardless of T; the result is rounded to T
  // once, after the optional affine epilogue.
  std::vector<double> acc(cout);
  for (int n = 0; n < s.n; ++n) {
    for (int oy = 0; oy < g.oh; ++oy) {
      for (int ox = 0; ox < g.ow; ++ox) {
        for (int ot = 0; ot < g.of; ++ot) {
          std::fill(acc.begin(), acc.end(), 0.0);
          for (int ky = 0; ky < kh; ++ky) {
            int iy = oy * s1 - g.ph + ky;
            if (iy < 0 || iy >= s.h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int ix = ox * s2 - g.pw + kx;
              if (ix < 0 || ix >= s.w) continue;
              for (int kt = 0; kt < kf; ++kt) {
                int it = ot * s3 - g.pf + kt;
                if (it < 0 || it >= s.f) continue;
                const T* irow = in + n * is.n + iy * is.h + ix * is.w +
                                it * is.f;
                const T* wtap = w + (((std::int64_t)ky * kw + kx) * kf + kt) *
                                        cin * cout;
                for (int ci = 0; ci < cin; ++ci) {
                  const double v = irow[ci];
                  const T* wrow = wtap + (std::int64_t)ci * cout;
                  for (int co = 0; co < cout; ++co) acc[co] += v * wrow[co];
                }
              }
            }
          }
          T* orow = o + n * os.n + oy * os.h + ox * os.w + ot * os.f;
          if (scale) {
            for (int co = 0; co < cout; ++co) {
              orow[co] = static_cast<T>(acc[co] * scale[co] + shift[co]);
            }
          } else {
            for (int co = 0; co < cout; ++co) {
              orow[co] = static_cast<T>(acc[co]);
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
TensorT<T> depthwise_conv3d_impl(const TensorT<T>& input,
                                 const ConvParamsT<T>& p, const double* scale,
                                 const double* shift) {
  ConvGeom g = conv_geometry(input, p, /*depthwise=*/true);
  const ActShape& s = g.in;
  const int c = p.in_channels;
  const int kh = p.kernel[0], kw = p.kernel[1], kf = p.kernel[2];
  const int s1 = p.stride[0], s2 = p.stride[1], s3 = p.stride[2];

  TensorT<T> out(
      act_dims(ActShape{s.n, g.oh, g.ow, g.of, c, s.batched}, g.of, c));
  ActStrides is = strides_of(s);
  ActStrides os = strides_of(ActShape{s.n, g.oh, g.ow, g.of, c, s.batched});
  const T* in = input.data();
  const T* w = p.weights.data();
  T* o = out.data();

  std::vector<double> acc(c);
  for (int n = 0; n < s.n; ++n) {
    for (int oy = 0; oy < g.oh; ++oy) {
      for (int ox = 0; ox < g.ow; ++ox) {
        for (int ot = 0; ot < g.of; ++ot) {
          std::fill(acc.begin(), acc.end(), 0.0);
          for (int ky = 0; ky < kh; ++ky) {
            int iy = oy * s1 - g.ph + ky;
            if (iy < 0 || iy >= s.h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int ix = ox * s2 - g.pw + kx;
              if (ix < 0 || ix >= s.w) continue;
              for (int kt = 0; kt < kf; ++kt) {
                int it = ot * s3 - g.pf + kt;
                if (it < 0 || it >= s.f) continue;
                const T* irow = in + n * is.n + iy * is.h + ix * is.w +
                                it * is.f;
                const T* wrow =
                    w + (((std::int64_t)ky * kw + kx) * kf + kt) * c;
                for (int ci = 0; ci < c; ++ci) {
                  acc[ci] += static_cast<double>(irow[ci]) * wrow[ci];
                }
              }
            }
          }
          T* orow = o + n * os.n + oy * os.h + ox * os.w + ot * os.f;
          if (scale) {
            for (int ci = 0; ci < c; ++ci) {
              orow[ci] = static_cast<T>(acc[ci] * scale[ci] + shift[ci]);
            }
          } else {
            for (int ci = 0; ci < c; ++ci) orow[ci] = static_cast<T>(acc[ci]);
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
TensorT<T> pointwise_conv_impl(const TensorT<T>& input,
                               const TensorT<T>& weights, const double* scale,
                               const double* shift) {
  ActShape s = act_shape(input);
  if (weights.rank() != 2 || weights.extent(0) != s.c) {
    throw ShapeError("pointwise weights are " + weights.shape_str() +
                     ", expected [" + std::to_string(s.c) + ",out]");
  }
  const int cin = s.c, cout = weights.extent(1);
  TensorT<T> out(act_dims(s, s.f, cout));
  const std::int64_t positions = input.size() / cin;
  const T* in = input.data();
  const T* w = weights.data();
  T* o = out.data();
  std::vector<double> acc(cout);
  for (std::int64_t pos = 0; pos < positions; ++pos) {
    const T* irow = in + pos * cin;
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int ci = 0; ci < cin; ++ci) {
      const double v = irow[ci];
      const T* wrow = w + (std::int64_t)ci * cout;
      for (int co = 0; co < cout; ++co) acc[co] += v * wrow[co];
    }
    T* orow = o + pos * cout;
    if (scale) {
      for (int co = 0; co < cout; ++co) {
        orow[co] = static_cast<T>(acc[co] * scale[co] + shift[co]);
      }
    } else {
      for (int co = 0; co < cout; ++co) orow[co] = static_cast<T>(acc[co]);
    }
  }
  return out;
}

void check_affine(std::size_t scale_n, std::size_t shift_n, int channels) {
  if (scale_n != static_cast<std::size_t>(channels) || shift_n != scale_n) {
    throw ShapeError("affine epilogue has " + std::to_string(scale_n) +
                     " scales and " + std::to_string(shift_n) +
                     " shifts for " + std::to_string(channels) + " channels");
  }
}

}  // namespace

template <typename T>
TensorT<T> conv3d(const TensorT<T>& input, const ConvParamsT<T>& p) {
  return conv3d_impl(input, p, nullptr, nullptr);
}

template <typename T>
TensorT<T> depthwise_conv3d(const TensorT<T>& input, const ConvParamsT<T>& p) {
  return depthwise_conv3d_impl(input, p, nullptr, nullptr);
}

template <typename T>
TensorT<T> pointwise_conv(const TensorT<T>& input, const TensorT<T>& weights) {
  return pointwise_conv_impl(input, weights, nullptr, nullptr);
}

template <typename T>
TensorT<T> conv3d_affine(const TensorT<T>& input, const ConvParamsT<T>& p,
                         const std::vector<double>& scale,
                         const std::vector<double>& shift) {
  check_affine(scale.size(), shift.size(), p.out_channels);
  return conv3d_impl(input, p, scale.data(), shift.data());
}

template <typename T>
TensorT<T> depthwise_conv3d_affine(const TensorT<T>& input,
                                   const ConvParamsT<T>& p,
                                   const std::vector<double>& scale,
                                   const std::vector<double>& shift) {
  check_affine(scale.size(), shift.size(), p.out_channels);
  return depthwise_conv3d_impl(input, p, scale.data(), shift.data());
}

template <typename T>
TensorT<T> pointwise_conv_affine(const TensorT<T>& input,
                                 const TensorT<T>& weights,
                                 const std::vector<double>& scale,
                                 const std::vector<double>& shift) {
  if (weights.rank() != 2) {
    throw ShapeError("pointwise weights are " + weights.shape_str());
  }
  check_affine(scale.size(), shift.size(), weights.extent(1));
  return pointwise_conv_impl(input, weights, scale.data(), shift.data());
}

template <typename T>
TensorT<T> bias_add(const TensorT<T>& input, const TensorT<T>& bias) {
  int c = input.extent(input.rank() - 1);
  if (bias.rank() != 1 || bias.extent(0) != c) {
    throw ShapeError("bias is " + bias.shape_str() + ", expected [" +
                     std::to_string(c) + "]");
  }
  TensorT<T> out = input;
  T* o = out.data();
  const T* b = bias.data();
  const std::int64_t positions = input.size() / c;
  for (std::int64_t pos = 0; pos < positions; ++pos) {
    T* row = o + pos * c;
    for (int ci = 0; ci < c; ++ci) row[ci] += b[ci];
  }
  return out;
}

template <typename T>
TensorT<T> relu6(const TensorT<T>& input) {
  TensorT<T> out = input;
  for (auto& v : out.values()) v = std::min(std::max(v, T(0)), T(6));
  return out;
}

template <typename T>
BatchNormResultT<T> batch_norm(const TensorT<T>& input,
                               const BatchNormParamsT<T>& p) {
  if (p.epsilon <= T(0)) {
    throw ConfigError("batch norm epsilon must be positive");
  }
  if (p.momentum <= T(0) || p.momentum >= T(1)) {
    throw ConfigError("batch norm momentum must lie in (0,1)");
  }
  const int c = input.extent(input.rank() - 1);
  auto check = [&](const TensorT<T>& t, const char* name) {
    if (t.rank() != 1 || t.extent(0) != c) {
      throw ShapeError(std::string("batch norm ") + name + " is " +
                       t.shape_str() + ", input has " + std::to_string(c) +
                       " channels");
    }
  };
  check(p.gamma, "gamma");
  check(p.beta, "beta");
  check(p.running_mean, "running_mean");
  check(p.running_var, "running_var");

  const std::int64_t m = input.size() / c;
  BatchNormResultT<T> r;
  r.out = TensorT<T>(input.shape());
  r.saved_mean = TensorT<T>({c});
  r.saved_inv_std = TensorT<T>({c});

  if (p.mode == BnMode::kTraining) {
    std::vector<double> sum(c, 0.0), sumsq(c, 0.0);
    const T* in = input.data();
    for (std::int64_t pos = 0; pos < m; ++pos) {
      const T* row = in + pos * c;
      for (int ci = 0; ci < c; ++ci) {
        double v = row[ci];
        sum[ci] += v;
        sumsq[ci] += v * v;
      }
    }
    r.new_running_mean = TensorT<T>({c});
    r.new_running_var = TensorT<T>({c});
    for (int ci = 0; ci < c; ++ci) {
      double mean = sum[ci] / static_cast<double>(m);
      double var =
          std::max(0.0, sumsq[ci] / static_cast<double>(m) - mean * mean);
      r.saved_mean[ci] = static_cast<T>(mean);
      r.saved_inv_std[ci] =
          static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(p.epsilon)));
      double mom = p.momentum;
      r.new_running_mean[ci] =
          static_cast<T>(mom * p.running_mean[ci] + (1.0 - mom) * mean);
      r.new_running_var[ci] =
          static_cast<T>(mom * p.running_var[ci] + (1.0 - mom) * var);
    }
  } else {
    r.new_running_mean = p.running_mean;
    r.new_running_var = p.running_var;
    for (int ci = 0; ci < c; ++ci) {
      r.saved_mean[ci] = p.running_mean[ci];
      r.saved_inv_std[ci] = static_cast<T>(
          1.0 / std::sqrt(static_cast<double>(p.running_var[ci]) +
                          static_cast<double>(p.epsilon)));
    }
  }

  const T* in = input.data();
  T* o = r.out.data();
  if (p.mode == BnMode::kInference) {
    // Fused per-channel factors in double, one rounding per element; keeps
    // the output within a few ulp of the same computation folded into the
    // preceding convolution's weights.
    std::vector<double> scale(c), shift(c);
    for (int ci = 0; ci < c; ++ci) {
      const double sc = static_cast<double>(p.gamma[ci]) /
                        std::sqrt(static_cast<double>(p.running_var[ci]) +
                                  static_cast<double>(p.epsilon));
      scale[ci] = sc;
      shift[ci] = static_cast<double>(p.beta[ci]) -
                  static_cast<double>(p.running_mean[ci]) * sc;
    }
    for (std::int64_t pos = 0; pos < m; ++pos) {
      const T* row = in + pos * c;
      T* orow = o + pos * c;
      for (int ci = 0; ci < c; ++ci) {
        orow[ci] = static_cast<T>(row[ci] * scale[ci] + shift[ci]);
      }
    }
  } else {
    for (std::int64_t pos = 0; pos < m; ++pos) {
      const T* row = in + pos * c;
      T* orow = o + pos * c;
      for (int ci = 0; ci < c; ++ci) {
        orow[ci] = (row[ci] - r.saved_mean[ci]) * r.saved_inv_std[ci] *
                       p.gamma[ci] +
                   p.beta[ci];
      }
    }
  }
  return r;
}

template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& input) {
  ActShape s = act_shape(input);
  TensorT<T> out(act_dims(ActShape{s.n, 1, 1, 1, s.c, s.batched}, 1, s.c));
  const std::int64_t window = static_cast<std::int64_t>(s.h) * s.w * s.f;
  const T* in = input.data();
  T* o = out.data();
  for (int n = 0; n < s.n; ++n) {
    std::vector<double> acc(s.c, 0.0);
    const T* base = in + (std::int64_t)n * window * s.c;
    for (std::int64_t pos = 0; pos < window; ++pos) {
      const T* row = base + pos * s.c;
      for (int ci = 0; ci < s.c; ++ci) acc[ci] += row[ci];
    }
    T* orow = o + (std::int64_t)n * s.c;
    for (int ci = 0; ci < s.c; ++ci) {
      orow[ci] = static_cast<T>(acc[ci] / static_cast<double>(window));
    }
  }
  return out;
}

template <typename T>
TensorT<T> residual_add(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("residual_add shapes differ: " + a.shape_str() + " vs " +
                     b.shape_str());
  }
  TensorT<T> out = a;
  const T* pb = b.data();
  T* o = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) o[i] += pb[i];
  return out;
}

template <typename T>
TensorT<T> frames_to_batch(const TensorT<T>& input) {
  ActShape s = act_shape(input);
  if (!s.batched) {
    throw ShapeError("frames_to_batch expects a batched activation, got " +
                     input.shape_str());
  }
  TensorT<T> out({s.n * s.f, s.h, s.w, 1, s.c});
  ActStrides is = strides_of(s);
  const T* in = input.data();
  T* o = out.data();
  std::int64_t orow = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int t = 0; t < s.f; ++t) {
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
          const T* src = in + n * is.n + y * is.h + x * is.w + t * is.f;
          for (int ci = 0; ci < s.c; ++ci) o[orow++] = src[ci];
        }
      }
    }
  }
  return out;
}

template <typename T>
TensorT<T> frames_to_batch_backward(const TensorT<T>& grad_out, int frames) {
  ActShape s = act_shape(grad_out);
  if (!s.batched || s.f != 1 || s.n % frames != 0) {
    throw ShapeError("frames_to_batch grad_out is " + grad_out.shape_str() +
                     ", inconsistent with " + std::to_string(frames) +
                     " frames");
  }
  int n = s.n / frames;
  TensorT<T> gi({n, s.h, s.w, frames, s.c});
  ActStrides is = strides_of(ActShape{n, s.h, s.w, frames, s.c, true});
  const T* go = grad_out.data();
  T* g = gi.data();
  std::int64_t grow = 0;
  for (int ni = 0; ni < n; ++ni) {
    for (int t = 0; t < frames; ++t) {
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
          T* dst = g + ni * is.n + y * is.h + x * is.w + t * is.f;
          for (int ci = 0; ci < s.c; ++ci) dst[ci] = go[grow++];
        }
      }
    }
  }
  return gi;
}

template <typename T>
TensorT<T> batch_group_mean(const TensorT<T>& input, int group) {
  ActShape s = act_shape(input);
  if (!s.batched || s.h != 1 || s.w != 1 || s.f != 1 || group <= 0 ||
      s.n % group != 0) {
    throw ShapeError("batch_group_mean expects [n*group,1,1,1,c], got " +
                     input.shape_str() + " with group " +
                     std::to_string(group));
  }
  int n = s.n / group;
  TensorT<T> out({n, 1, 1, 1, s.c});
  const T* in = input.data();
  T* o = out.data();
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < s.c; ++ci) {
      double acc = 0.0;
      for (int g = 0; g < group; ++g) {
        acc += in[((std::int64_t)ni * group + g) * s.c + ci];
      }
      o[(std::int64_t)ni * s.c + ci] =
          static_cast<T>(acc / static_cast<double>(group));
    }
  }
  return out;
}

template <typename T>
TensorT<T> batch_group_mean_backward(const TensorT<T>& grad_out, int group) {
  ActShape s = act_shape(grad_out);
  if (!s.batched || s.h != 1 || s.w != 1 || s.f != 1 || group <= 0) {
    throw ShapeError("batch_group_mean grad_out is " + grad_out.shape_str());
  }
  TensorT<T> gi({s.n * group, 1, 1, 1, s.c});
  const T scale = static_cast<T>(1.0 / static_cast<double>(group));
  const T* go = grad_out.data();
  T* g = gi.data();
  for (int ni = 0; ni < s.n; ++ni) {
    for (int gr = 0; gr < group; ++gr) {
      for (int ci = 0; ci < s.c; ++ci) {
        g[((std::int64_t)ni * group + gr) * s.c + ci] =
            go[(std::int64_t)ni * s.c + ci] * scale;
      }
    }
  }
  return gi;
}

template <typename T>
SoftmaxXentResultT<T> softmax_cross_entropy(const TensorT<T>& logits,
                                            const std::vector<int>& targets) {
  const std::int64_t n = static_cast<std::int64_t>(targets.size());
  if (n == 0) throw ConfigError("softmax_cross_entropy needs >= 1 target");
  if (logits.extent(logits.rank() - 1) != 2 || logits.size() != 2 * n) {
    throw ShapeError("logits are " + logits.shape_str() + ", expected 2 per "
                     "sample for " + std::to_string(n) + " targets");
  }
  SoftmaxXentResultT<T> r;
  r.probs = TensorT<T>(logits.shape());
  r.sample_losses.resize(static_cast<std::size_t>(n));
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    int t = targets[static_cast<std::size_t>(i)];
    if (t != 0 && t != 1) {
      throw ConfigError("target " + std::to_string(t) + " is not in {0,1}");
    }
    double a = logits[2 * i], b = logits[2 * i + 1];
    double mx = std::max(a, b);
    double ea = std::exp(a - mx), eb = std::exp(b - mx);
    double z = ea + eb;
    r.probs[2 * i] = static_cast<T>(ea / z);
    r.probs[2 * i + 1] = static_cast<T>(eb / z);
    double xt = (t == 0 ? a : b);
    double loss = std::log(z) - (xt - mx);
    r.sample_losses[static_cast<std::size_t>(i)] = static_cast<T>(loss);
    total += loss;
  }
  r.loss = static_cast<T>(total / static_cast<double>(n));
  return r;
}

// ---- Backward ---------------------------------------------------------

template <typename T>
ConvGradsT<T> conv3d_backward(const TensorT<T>& input, const ConvParamsT<T>& p,
                              const TensorT<T>& grad_out, bool need_input,
                              bool need_weights) {
  ConvGeom g = conv_geometry(input, p, /*depthwise=*/false);
  const ActShape& s = g.in;
  const int cin = p.in_channels, cout = p.out_channels;
  const int kh = p.kernel[0], kw = p.kernel[1], kf = p.kernel[2];
  const int s1 = p.stride[0], s2 = p.stride[1], s3 = p.stride[2];
  std::vector<int> oshape =
      act_dims(ActShape{s.n, g.oh, g.ow, g.of, cout, s.batched}, g.of, cout);
  if (grad_out.shape() != oshape) {
    throw ShapeError("grad_out is " + grad_out.shape_str() + ", expected " +
                     Tensor::shape_str(oshape));
  }

  ConvGradsT<T> r;
  if (need_input) r.input = TensorT<T>(input.shape());
  if (need_weights) r.weights = TensorT<T>(p.weights.shape());
  if (!need_input && !need_weights) return r;

  ActStrides is = strides_of(s);
  ActStrides os = strides_of(ActShape{s.n, g.oh, g.ow, g.of, cout, s.batched});
  const T* in = input.data();
  const T* w = p.weights.data();
  const T* go = grad_out.data();
  T* gi = need_input ? r.input.data() : nullptr;
  T* gw = need_weights ? r.weights.data() : nullptr;

  for (int n = 0; n < s.n; ++n) {
    for (int oy = 0; oy < g.oh; ++oy) {
      for (int ox = 0; ox < g.ow; ++ox) {
        for (int ot = 0; ot < g.of; ++ot) {
          const T* grow = go + n * os.n + oy * os.h + ox * os.w + ot * os.f;
          for (int ky = 0; ky < kh; ++ky) {
            int iy = oy * s1 - g.ph + ky;
            if (iy < 0 || iy >= s.h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int ix = ox * s2 - g.pw + kx;
              if (ix < 0 || ix >= s.w) continue;
              for (int kt = 0; kt < kf; ++kt) {
                int it = ot * s3 - g.pf + kt;
                if (it < 0 || it >= s.f) continue;
                std::int64_t ioff =
                    n * is.n + iy * is.h + ix * is.w + it * is.f;
                std::int64_t woff =
                    (((std::int64_t)ky * kw + kx) * kf + kt) * cin * cout;
                if (need_weights) {
                  const T* irow = in + ioff;
                  for (int ci = 0; ci < cin; ++ci) {
                    T v = irow[ci];
                    T* gwrow = gw + woff + (std::int64_t)ci * cout;
                    for (int co = 0; co < cout; ++co) {
                      gwrow[co] += v * grow[co];
                    }
                  }
                }
                if (need_input) {
                  T* girow = gi + ioff;
                  for (int ci = 0; ci < cin; ++ci) {
                    const T* wrow = w + woff + (std::int64_t)ci * cout;
                    T acc = 0;
                    for (int co = 0; co < cout; ++co) {
                      acc += wrow[co] * grow[co];
                    }
                    girow[ci] += acc;
                  }
                }
              }
            }
          }
        }
      }
    }
  }
  return r;
}

template <typename T>
ConvGradsT<T> depthwise_conv3d_backward(const TensorT<T>& input,
                                        const ConvParamsT<T>& p,
                                        const TensorT<T>& grad_out,
                                        bool need_input, bool need_weights) {
  ConvGeom g = conv_geometry(input, p, /*depthwise=*/true);
  const ActShape& s = g.in;
  const int c = p.in_channels;
  const int kh = p.kernel[0], kw = p.kernel[1], kf = p.kernel[2];
  const int s1 = p.stride[0], s2 = p.stride[1], s3 = p.stride[2];
  std::vector<int> oshape =
      act_dims(ActShape{s.n, g.oh, g.ow, g.of, c, s.batched}, g.of, c);
  if (grad_out.shape() != oshape) {
    throw ShapeError("grad_out is " + grad_out.shape_str() + ", expected " +
                     Tensor::shape_str(oshape));
  }

  ConvGradsT<T> r;
  if (need_input) r.input = TensorT<T>(input.shape());
  if (need_weights) r.weights = TensorT<T>(p.weights.shape());
  if (!need_input && !need_weights) return r;

  ActStrides is = strides_of(s);
  ActStrides os = strides_of(ActShape{s.n, g.oh, g.ow, g.of, c, s.batched});
  const T* in = input.data();
  const T* w = p.weights.data();
  const T* go = grad_out.data();
  T* gi = need_input ? r.input.data() : nullptr;
  T* gw = need_weights ? r.weights.data() : nullptr;

  for (int n = 0; n < s.n; ++n) {
    for (int oy = 0; oy < g.oh; ++oy) {
      for (int ox = 0; ox < g.ow; ++ox) {
        for (int ot = 0; ot < g.of; ++ot) {
          const T* grow = go + n * os.n + oy * os.h + ox * os.w + ot * os.f;
          for (int ky = 0; ky < kh; ++ky) {
            int iy = oy * s1 - g.ph + ky;
            if (iy < 0 || iy >= s.h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int ix = ox * s2 - g.pw + kx;
              if (ix < 0 || ix >= s.w) continue;
              for (int kt = 0; kt < kf; ++kt) {
                int it = ot * s3 - g.pf + kt;
                if (it < 0 || it >= s.f) continue;
                std::int64_t ioff =
                    n * is.n + iy * is.h + ix * is.w + it * is.f;
                std::int64_t woff =
                    (((std::int64_t)ky * kw + kx) * kf + kt) * c;
                if (need_weights) {
                  const T* irow = in + ioff;
                  T* gwrow = gw + woff;
                  for (int ci = 0; ci < c; ++ci) {
                    gwrow[ci] += irow[ci] * grow[ci];
                  }
                }
                if (need_input) {
                  const T* wrow = w + woff;
                  T* girow = gi + ioff;
                  for (int ci = 0; ci < c; ++ci) {
                    girow[ci] += wrow[ci] * grow[ci];
                  }
                }
              }
            }
          }
        }
      }
    }
  }
  return r;
}

template <typename T>
ConvGradsT<T> pointwise_conv_backward(const TensorT<T>& input,
                                      const TensorT<T>& weights,
                                      const TensorT<T>& grad_out,
                                      bool need_input, bool need_weights) {
  ActShape s = act_shape(input);
  if (weights.rank() != 2 || weights.extent(0) != s.c) {
    throw ShapeError("pointwise weights are " + weights.shape_str() +
                     ", expected [" + std::to_string(s.c) + ",out]");
  }
  const int cin = s.c, cout = weights.extent(1);
  if (grad_out.size() != (input.size() / cin) * cout) {
    throw ShapeError("pointwise grad_out is " + grad_out.shape_str() +
                     ", inconsistent with input " + input.shape_str());
  }

  ConvGradsT<T> r;
  if (need_input) r.input = TensorT<T>(input.shape());
  if (need_weights) r.weights = TensorT<T>(weights.shape());
  if (!need_input && !need_weights) return r;

  const std::int64_t positions = input.size() / cin;
  const T* in = input.data();
  const T* w = weights.data();
  const T* go = grad_out.data();
  T* gi = need_input ? r.input.data() : nullptr;
  T* gw = need_weights ? r.weights.data() : nullptr;

  for (std::int64_t pos = 0; pos < positions; ++pos) {
    const T* irow = in + pos * cin;
    const T* grow = go + pos * cout;
    for (int ci = 0; ci < cin; ++ci) {
      if (need_weights) {
        T v = irow[ci];
        T* gwrow = gw + (std::int64_t)ci * cout;
        for (int co = 0; co < cout; ++co) gwrow[co] += v * grow[co];
      }
      if (need_input) {
        const T* wrow = w + (std::int64_t)ci * cout;
        T acc = 0;
        for (int co = 0; co < cout; ++co) acc += wrow[co] * grow[co];
        gi[pos * cin + ci] = acc;
      }
    }
  }
  return r;
}

template <typename T>
TensorT<T> bias_add_backward(const TensorT<T>& grad_out, int channels) {
  TensorT<T> gb({channels});
  const std::int64_t positions = grad_out.size() / channels;
  const T* go = grad_out.data();
  std::vector<double> acc(static_cast<std::size_t>(channels), 0.0);
  for (std::int64_t pos = 0; pos < positions; ++pos) {
    const T* row = go + pos * channels;
    for (int ci = 0; ci < channels; ++ci) acc[ci] += row[ci];
  }
  for (int ci = 0; ci < channels; ++ci) gb[ci] = static_cast<T>(acc[ci]);
  return gb;
}

template <typename T>
TensorT<T> relu6_backward(const TensorT<T>& input, const TensorT<T>& grad_out) {
  if (!input.same_shape(grad_out)) {
    throw ShapeError("relu6_backward shapes differ: " + input.shape_str() +
                     " vs " + grad_out.shape_str());
  }
  TensorT<T> out(input.shape());
  const T* in = input.data();
  const T* go = grad_out.data();
  T* o = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) {
    o[i] = (in[i] > T(0) && in[i] < T(6)) ? go[i] : T(0);
  }
  return out;
}

template <typename T>
BatchNormGradsT<T> batch_norm_backward(const TensorT<T>& input,
                                       const BatchNormParamsT<T>& p,
                                       const BatchNormResultT<T>& saved,
                                       const TensorT<T>& grad_out,
                                       bool need_input,
                                       bool need_scale_shift) {
  if (!input.same_shape(grad_out)) {
    throw ShapeError("batch_norm_backward shapes differ: " +
                     input.shape_str() + " vs " + grad_out.shape_str());
  }
  const int c = input.extent(input.rank() - 1);
  const std::int64_t m = input.size() / c;

  std::vector<double> dbeta(c, 0.0), dgamma(c, 0.0);
  const T* in = input.data();
  const T* go = grad_out.data();
  for (std::int64_t pos = 0; pos < m; ++pos) {
    const T* xrow = in + pos * c;
    const T* grow = go + pos * c;
    for (int ci = 0; ci < c; ++ci) {
      double xhat = (xrow[ci] - saved.saved_mean[ci]) * saved.saved_inv_std[ci];
      dbeta[ci] += grow[ci];
      dgamma[ci] += grow[ci] * xhat;
    }
  }

  BatchNormGradsT<T> r;
  if (need_scale_shift) {
    r.gamma = TensorT<T>({c});
    r.beta = TensorT<T>({c});
    for (int ci = 0; ci < c; ++ci) {
      r.gamma[ci] = static_cast<T>(dgamma[ci]);
      r.beta[ci] = static_cast<T>(dbeta[ci]);
    }
  }
  if (!need_input) return r;

  r.input = TensorT<T>(input.shape());
  T* gi = r.input.data();
  const bool train = p.mode == BnMode::kTraining;
  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::int64_t pos = 0; pos < m; ++pos) {
    const T* xrow = in + pos * c;
    const T* grow = go + pos * c;
    T* girow = gi + pos * c;
    for (int ci = 0; ci < c; ++ci) {
      double gs = static_cast<double>(p.gamma[ci]) * saved.saved_inv_std[ci];
      if (train) {
        double xhat =
            (xrow[ci] - saved.saved_mean[ci]) * saved.saved_inv_std[ci];
        girow[ci] = static_cast<T>(
            gs * (grow[ci] - dbeta[ci] * inv_m - xhat * dgamma[ci] * inv_m));
      } else {
        girow[ci] = static_cast<T>(gs * grow[ci]);
      }
    }
  }
  return r;
}

template <typename T>
TensorT<T> global_avg_pool_backward(const std::vector<int>& input_shape,
                                    const TensorT<T>& grad_out) {
  TensorT<T> gi(input_shape);
  ActShape s = act_shape(gi);
  const std::int64_t window = static_cast<std::int64_t>(s.h) * s.w * s.f;
  if (grad_out.size() != static_cast<std::int64_t>(s.n) * s.c) {
    throw ShapeError("pool grad_out is " + grad_out.shape_str() +
                     ", inconsistent with input " +
                     Tensor::shape_str(input_shape));
  }
  const T scale = static_cast<T>(1.0 / static_cast<double>(window));
  T* o = gi.data();
  const T* go = grad_out.data();
  for (int n = 0; n < s.n; ++n) {
    T* base = o + (std::int64_t)n * window * s.c;
    const T* grow = go + (std::int64_t)n * s.c;
    for (std::int64_t pos = 0; pos < window; ++pos) {
      T* row = base + pos * s.c;
      for (int ci = 0; ci < s.c; ++ci) row[ci] = grow[ci] * scale;
    }
  }
  return gi;
}

template <typename T>
TensorT<T> softmax_cross_entropy_backward(const TensorT<T>& probs,
                                          const std::vector<int>& targets,
                                          T upstream) {
  const std::int64_t n = static_cast<std::int64_t>(targets.size());
  if (probs.size() != 2 * n) {
    throw ShapeError("probs are " + probs.shape_str() + ", expected 2 per "
                     "sample for " + std::to_string(n) + " targets");
  }
  TensorT<T> g(probs.shape());
  const T scale = upstream / static_cast<T>(n);
  for (std::int64_t i = 0; i < n; ++i) {
    int t = targets[static_cast<std::size_t>(i)];
    g[2 * i] = (probs[2 * i] - (t == 0 ? T(1) : T(0))) * scale;
    g[2 * i + 1] = (probs[2 * i + 1] - (t == 1 ? T(1) : T(0))) * scale;
  }
  return g;
}

// Explicit instantiations; the library works in float, tests cross-check
// gradients in double.
#define VIGILNET_INSTANTIATE_OPS(T)                                          \
  template ActShape act_shape<T>(const TensorT<T>&);                         \
  template TensorT<T> conv3d<T>(const TensorT<T>&, const ConvParamsT<T>&);   \
  template TensorT<T> depthwise_conv3d<T>(const TensorT<T>&,                 \
                                          const ConvParamsT<T>&);            \
  template TensorT<T> pointwise_conv<T>(const TensorT<T>&,                   \
                                        const TensorT<T>&);                  \
  template TensorT<T> conv3d_affine<T>(const TensorT<T>&,                    \
                                       const ConvParamsT<T>&,                \
                                       const std::vector<double>&,           \
                                       const std::vector<double>&);          \
  template TensorT<T> depthwise_conv3d_affine<T>(                            \
      const TensorT<T>&, const ConvParamsT<T>&, const std::vector<double>&,  \
      const std::vector<double>&);                                           \
  template TensorT<T> pointwise_conv_affine<T>(                              \
      const TensorT<T>&, const TensorT<T>&, const std::vector<double>&,      \
      const std::vector<double>&);                                           \
  template TensorT<T> bias_add<T>(const TensorT<T>&, const TensorT<T>&);     \
  template TensorT<T> relu6<T>(const TensorT<T>&);                           \
  template BatchNormResultT<T> batch_norm<T>(const TensorT<T>&,              \
                                             const BatchNormParamsT<T>&);    \
  template TensorT<T> global_avg_pool<T>(const TensorT<T>&);                 \
  template TensorT<T> residual_add<T>(const TensorT<T>&, const TensorT<T>&); \
  template SoftmaxXentResultT<T> softmax_cross_entropy<T>(                   \
      const TensorT<T>&, const std::vector<int>&);                           \
  template ConvGradsT<T> conv3d_backward<T>(const TensorT<T>&,               \
                                            const ConvParamsT<T>&,           \
                                            const TensorT<T>&, bool, bool);  \
  template ConvGradsT<T> depthwise_conv3d_backward<T>(                       \
      const TensorT<T>&, const ConvParamsT<T>&, const TensorT<T>&, bool,     \
      bool);                                                                 \
  template ConvGradsT<T> pointwise_conv_backward<T>(                         \
      const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, bool, bool);  \
  template TensorT<T> bias_add_backward<T>(const TensorT<T>&, int);          \
  template TensorT<T> relu6_backward<T>(const TensorT<T>&,                   \
                                        const TensorT<T>&);                  \
  template BatchNormGradsT<T> batch_norm_backward<T>(                        \
      const TensorT<T>&, const BatchNormParamsT<T>&,                         \
      const BatchNormResultT<T>&, const TensorT<T>&, bool, bool);            \
  template TensorT<T> global_avg_pool_backward<T>(const std::vector<int>&,   \
                                                  const TensorT<T>&);        \
  template TensorT<T> softmax_cross_entropy_backward<T>(                     \
      const TensorT<T>&, const std::vector<int>&, T);                        \
  template TensorT<T> frames_to_batch<T>(const TensorT<T>&);                 \
  template TensorT<T> frames_to_batch_backward<T>(const TensorT<T>&, int);   \
  template TensorT<T> batch_group_mean<T>(const TensorT<T>&, int);           \
  template TensorT<T> batch_group_mean_backward<T>(const TensorT<T>&, int);

VIGILNET_INSTANTIATE_OPS(float)
VIGILNET_INSTANTIATE_OPS(double)

#undef VIGILNET_INSTANTIATE_OPS

}  // namespace vigilnet::ops
