#include "cais/aggregate.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "cais/parallel.hpp"

namespace cais {
namespace {

struct dims {
  long h, w, d;      // coarse volume
  long s;
  long fh, fw;       // fine spatial extents
  long window, r, k; // spatial window, radius, direction count
  long n;            // disparity radius
  long wd;           // disparity window
};

template <typename T>
dims check_volume(const basic_tensor<T>& cost, const aggregation_config& cfg) {
  validate(cfg);
  require_rank(cost, 3, "cost volume");
  dims g{};
  g.h = static_cast<long>(cost.extent(0));
  g.w = static_cast<long>(cost.extent(1));
  g.d = static_cast<long>(cost.extent(2));
  g.s = cfg.scale;
  g.fh = g.h * g.s;
  g.fw = g.w * g.s;
  g.window = cfg.spatial_window;
  g.r = cfg.spatial_radius();
  g.k = static_cast<long>(cfg.directions());
  g.n = cfg.disparity_radius();
  g.wd = cfg.disparity_window;
  return g;
}

template <typename T>
void check_guidance(const basic_tensor<T>& g, const dims& d, const char* what) {
  require_shape(g, {static_cast<std::size_t>(d.k), static_cast<std::size_t>(d.fh), static_cast<std::size_t>(d.fw)}, what);
}

// Flat index into G_R for the right lookup, or -1 when the direction leaves
// the window.
inline long right_index(const dims& g, long xf, long yf, long df, long x, long y, long d) {
  const long col = std::clamp(xf - df, 0L, g.fw - 1);
  const long dx = (x - d) - (xf / g.s - df / g.s);
  const long dy = y - yf / g.s;
  if (dx < -g.r || dx > g.r || dy < -g.r || dy > g.r) return -1;
  const long k = (dy + g.r) * g.window + (dx + g.r);
  return (k * g.fh + yf) * g.fw + col;
}

template <typename T>
T right_lookup(const basic_tensor<T>& gr, const dims& g, long xf, long yf, long df, long x, long y, long d) {
  const long i = right_index(g, xf, yf, df, x, y, d);
  return i < 0 ? T{0} : gr[static_cast<std::size_t>(i)];
}

template <typename T>
T volume_at(const basic_tensor<T>& v, long y, long x, long d, long h, long w, long dd) {
  if (y < 0 || x < 0 || d < 0 || y >= h || x >= w || d >= dd) return T{0};
  return v[static_cast<std::size_t>((y * w + x) * dd + d)];
}

// Stage-1 weights for one (coarse cell, fine disparity). Mirrors the forward
// reduction order exactly; shared by forward and backward.
template <typename T>
struct stage1_weights {
  std::vector<T> w;        // normalized weights
  std::vector<char> valid; // candidate inside [0, D)
  T sum = T{0};
  bool fallback = false;
};

template <typename T>
void compute_stage1(const basic_tensor<T>& gr, const dims& g, const aggregation_config& cfg, long x, long y, long df,
                    stage1_weights<T>& sw, flop_counts* tally) {
  const long dc = df / g.s;
  const T area = static_cast<T>(g.s * g.s);
  const bool mean = cfg.reduce == block_reduce::mean;
  sw.w.assign(static_cast<std::size_t>(g.wd), T{0});
  sw.valid.assign(static_cast<std::size_t>(g.wd), 0);
  std::size_t n_valid = 0;
  for (long t = 0; t < g.wd; ++t) {
    const long d = dc - g.n + t;
    const bool valid = d >= 0 && d < g.d;
    sw.valid[static_cast<std::size_t>(t)] = valid;
    n_valid += valid;
    T acc = T{0};
    for (long oy = 0; oy < g.s; ++oy) {
      const long yf = y * g.s + oy;
      for (long ox = 0; ox < g.s; ++ox) {
        const long xf = x * g.s + ox;
        const T v = valid ? right_lookup(gr, g, xf, yf, df, x, y, d) : T{0};
        acc += v;
      }
    }
    if (mean) acc = acc / area;
    sw.w[static_cast<std::size_t>(t)] = acc;
  }
  if (tally) {
    tally->adds += static_cast<std::uint64_t>(g.wd * g.s * g.s);
    if (mean) tally->divs += static_cast<std::uint64_t>(g.wd);
  }
  sw.fallback = false;
  if (cfg.stage1_renormalize) {
    T sum = T{0};
    for (T v : sw.w) sum += v;
    if (sum < T(1e-12)) {
      sw.fallback = true;
      for (std::size_t t = 0; t < sw.w.size(); ++t) sw.w[t] = sw.valid[t] ? T{1} : T{0};
      sum = static_cast<T>(n_valid);
    }
    for (T& v : sw.w) v = v / sum;
    sw.sum = sum;
    if (tally) {
      tally->adds += static_cast<std::uint64_t>(g.wd);
      tally->divs += static_cast<std::uint64_t>(g.wd);
    }
  }
}

template <typename T>
T center_scale(const basic_tensor<T>& gl, const dims& g, const aggregation_config& cfg, long x, long y) {
  const long center = (g.k - 1) / 2;
  T acc = T{0};
  for (long oy = 0; oy < g.s; ++oy) {
    for (long ox = 0; ox < g.s; ++ox) {
      acc += gl[static_cast<std::size_t>((center * g.fh + y * g.s + oy) * g.fw + x * g.s + ox)];
    }
  }
  if (cfg.reduce == block_reduce::mean) acc = acc / static_cast<T>(g.s * g.s);
  return acc;
}

}  // namespace

template <typename T>
basic_tensor<T> disparity_upsample(const basic_tensor<T>& cost, const basic_tensor<T>& guidance_right, const basic_tensor<T>& guidance_left,
                                   const aggregation_config& cfg, flop_counter* counter) {
  const dims g = check_volume(cost, cfg);
  check_guidance(guidance_right, g, "right guidance");
  check_guidance(guidance_left, g, "left guidance");
  const long fd = g.d * g.s;
  if (fd < g.wd) throw config_error("fine disparity count D*s must be at least the disparity window");

  basic_tensor<T> out({static_cast<std::size_t>(g.h), static_cast<std::size_t>(g.w), static_cast<std::size_t>(fd)});
  const bool counting = counter != nullptr;
  std::vector<flop_counts> weight_tallies(counting ? g.h : 0), scale_tallies(counting ? g.h : 0);

  parallel_for(static_cast<std::size_t>(g.h), [&](std::size_t yi) {
    const long y = static_cast<long>(yi);
    stage1_weights<T> sw;
    flop_counts* wt = counting ? &weight_tallies[yi] : nullptr;
    flop_counts* st = counting ? &scale_tallies[yi] : nullptr;
    for (long x = 0; x < g.w; ++x) {
      T scale = T{1};
      if (cfg.left_center_scale) {
        scale = center_scale(guidance_left, g, cfg, x, y);
        if (st) {
          st->adds += static_cast<std::uint64_t>(g.s * g.s);
          if (cfg.reduce == block_reduce::mean) st->divs += 1;
        }
      }
      for (long df = 0; df < fd; ++df) {
        compute_stage1(guidance_right, g, cfg, x, y, df, sw, wt);
        const long dc = df / g.s;
        T acc = T{0};
        for (long t = 0; t < g.wd; ++t) {
          const T c = sw.valid[static_cast<std::size_t>(t)] ? cost(static_cast<std::size_t>(y), static_cast<std::size_t>(x),
                                                                    static_cast<std::size_t>(dc - g.n + t))
                                                            : T{0};
          acc += sw.w[static_cast<std::size_t>(t)] * c;
        }
        if (wt) {
          wt->muls += static_cast<std::uint64_t>(g.wd);
          wt->adds += static_cast<std::uint64_t>(g.wd);
        }
        if (cfg.left_center_scale) {
          acc = acc * scale;
          if (st) st->muls += 1;
        }
        out(static_cast<std::size_t>(y), static_cast<std::size_t>(x), static_cast<std::size_t>(df)) = acc;
      }
    }
  });
  record_tallies(counter, "disparity", weight_tallies);
  if (cfg.left_center_scale) record_tallies(counter, "left_center_scale", scale_tallies);
  return out;
}

template <typename T>
basic_tensor<T> spatial_upsample(const basic_tensor<T>& cost, const basic_tensor<T>& guidance_left, const aggregation_config& cfg,
                                 flop_counter* counter) {
  const dims g = check_volume(cost, cfg);
  check_guidance(guidance_left, g, "left guidance");
  const long dd = g.d;
  basic_tensor<T> out({static_cast<std::size_t>(g.fh), static_cast<std::size_t>(g.fw), static_cast<std::size_t>(dd)});
  const bool counting = counter != nullptr;
  std::vector<flop_counts> tallies(counting ? g.fh : 0);
  const std::size_t plane = static_cast<std::size_t>(g.fh * g.fw);

  parallel_for(static_cast<std::size_t>(g.fh), [&](std::size_t yi) {
    const long yf = static_cast<long>(yi);
    std::vector<T> acc(static_cast<std::size_t>(dd));
    flop_counts local;
    for (long xf = 0; xf < g.fw; ++xf) {
      const long yc = yf / g.s, xc = xf / g.s;
      std::fill(acc.begin(), acc.end(), T{0});
      T weight_sum = T{0};
      for (long k = 0; k < g.k; ++k) {
        const long ny = yc + k / g.window - g.r;
        const long nx = xc + k % g.window - g.r;
        const bool valid = ny >= 0 && nx >= 0 && ny < g.h && nx < g.w;
        const T wgt = guidance_left[static_cast<std::size_t>(k) * plane + static_cast<std::size_t>(yf * g.fw + xf)];
        if (cfg.border_renormalize_spatial) weight_sum += valid ? wgt : T{0};
        const T* src = valid ? &cost(static_cast<std::size_t>(ny), static_cast<std::size_t>(nx), 0) : nullptr;
        for (long d = 0; d < dd; ++d) {
          const T v = valid ? src[d] : T{0};
          acc[static_cast<std::size_t>(d)] += wgt * v;
        }
      }
      if (counting) {
        local.muls += static_cast<std::uint64_t>(g.k * dd);
        local.adds += static_cast<std::uint64_t>(g.k * dd);
      }
      if (cfg.border_renormalize_spatial) {
        const T denom = weight_sum > T{0} ? weight_sum : T{1};
        for (T& v : acc) v = v / denom;
        if (counting) {
          local.adds += static_cast<std::uint64_t>(g.k);
          local.divs += static_cast<std::uint64_t>(dd);
        }
      }
      std::copy(acc.begin(), acc.end(), &out(static_cast<std::size_t>(yf), static_cast<std::size_t>(xf), 0));
    }
    if (counting) tallies[yi] = local;
  });
  record_tallies(counter, "spatial", tallies);
  return out;
}

template <typename T>
basic_tensor<T> cais_upsample(const basic_tensor<T>& cost, const basic_tensor<T>& guidance_left, const basic_tensor<T>& guidance_right,
                              const aggregation_config& cfg, flop_counter* counter) {
  return spatial_upsample(disparity_upsample(cost, guidance_right, guidance_left, cfg, counter), guidance_left, cfg, counter);
}

template <typename T>
basic_tensor<T> full3d_upsample(const basic_tensor<T>& cost, const basic_tensor<T>& guidance_left, const basic_tensor<T>& guidance_right,
                                const aggregation_config& cfg, flop_counter* counter) {
  const dims g = check_volume(cost, cfg);
  check_guidance(guidance_left, g, "left guidance");
  check_guidance(guidance_right, g, "right guidance");
  const long fd = g.d * g.s;
  basic_tensor<T> out({static_cast<std::size_t>(g.fh), static_cast<std::size_t>(g.fw), static_cast<std::size_t>(fd)});
  const bool counting = counter != nullptr;
  std::vector<flop_counts> tallies(counting ? g.fh : 0);
  const std::size_t plane = static_cast<std::size_t>(g.fh * g.fw);
  const std::uint64_t taps = static_cast<std::uint64_t>(g.k * g.wd);

  parallel_for(static_cast<std::size_t>(g.fh), [&](std::size_t yi) {
    const long yf = static_cast<long>(yi);
    flop_counts local;
    for (long xf = 0; xf < g.fw; ++xf) {
      const long yc = yf / g.s, xc = xf / g.s;
      for (long df = 0; df < fd; ++df) {
        const long dc = df / g.s;
        T acc = T{0};
        for (long d = dc - g.n; d <= dc + g.n; ++d) {
          for (long dy = -g.r; dy <= g.r; ++dy) {
            for (long dx = -g.r; dx <= g.r; ++dx) {
              const long kl = (dy + g.r) * g.window + (dx + g.r);
              const T wl = guidance_left[static_cast<std::size_t>(kl) * plane + static_cast<std::size_t>(yf * g.fw + xf)];
              const T wr = right_lookup(guidance_right, g, xf, yf, df, xc + dx, yc + dy, d);
              const T c = volume_at(cost, yc + dy, xc + dx, d, g.h, g.w, g.d);
              const T wgt = wl * wr;
              acc += wgt * c;
            }
          }
        }
        out(static_cast<std::size_t>(yf), static_cast<std::size_t>(xf), static_cast<std::size_t>(df)) = acc;
      }
    }
    if (counting) {
      const auto outputs = static_cast<std::uint64_t>(g.fw * fd);
      local.muls = outputs * taps * 2;
      local.adds = outputs * taps;
      tallies[yi] = local;
    }
  });
  record_tallies(counter, "full3d", tallies);
  return out;
}

template <typename T>
aggregation_gradients<T> cais_backward(const basic_tensor<T>& cost, const basic_tensor<T>& guidance_left,
                                       const basic_tensor<T>& guidance_right, const aggregation_config& cfg,
                                       const basic_tensor<T>& upstream) {
  const dims g = check_volume(cost, cfg);
  check_guidance(guidance_left, g, "left guidance");
  check_guidance(guidance_right, g, "right guidance");
  const long fd = g.d * g.s;
  require_shape(upstream, {static_cast<std::size_t>(g.fh), static_cast<std::size_t>(g.fw), static_cast<std::size_t>(fd)},
                "cais upstream gradient");

  const basic_tensor<T> mid = disparity_upsample(cost, guidance_right, guidance_left, cfg);
  const std::size_t plane = static_cast<std::size_t>(g.fh * g.fw);

  aggregation_gradients<T> grads;
  grads.cost = basic_tensor<T>(cost.shape());
  grads.guidance_left = basic_tensor<T>(guidance_left.shape());
  grads.guidance_right = basic_tensor<T>(guidance_right.shape());
  basic_tensor<T> d_mid(mid.shape());
  basic_tensor<T> denom({static_cast<std::size_t>(g.fh), static_cast<std::size_t>(g.fw)}, T{1});

  // Stage 2: left-guidance gradient, one fine pixel at a time.
  parallel_for(static_cast<std::size_t>(g.fh), [&](std::size_t yi) {
    const long yf = static_cast<long>(yi);
    std::vector<T> out(static_cast<std::size_t>(fd));
    for (long xf = 0; xf < g.fw; ++xf) {
      const long yc = yf / g.s, xc = xf / g.s;
      const std::size_t pix = static_cast<std::size_t>(yf * g.fw + xf);
      const T* up = &upstream(static_cast<std::size_t>(yf), static_cast<std::size_t>(xf), 0);
      T weight_sum = T{1};
      if (cfg.border_renormalize_spatial) {
        weight_sum = T{0};
        std::fill(out.begin(), out.end(), T{0});
        for (long k = 0; k < g.k; ++k) {
          const long ny = yc + k / g.window - g.r, nx = xc + k % g.window - g.r;
          if (ny < 0 || nx < 0 || ny >= g.h || nx >= g.w) continue;
          const T wgt = guidance_left[static_cast<std::size_t>(k) * plane + pix];
          weight_sum += wgt;
          for (long d = 0; d < fd; ++d) out[static_cast<std::size_t>(d)] += wgt * mid(static_cast<std::size_t>(ny), static_cast<std::size_t>(nx), static_cast<std::size_t>(d));
        }
        if (!(weight_sum > T{0})) weight_sum = T{1};
        for (T& v : out) v = v / weight_sum;
        denom(static_cast<std::size_t>(yf), static_cast<std::size_t>(xf)) = weight_sum;
      }
      for (long k = 0; k < g.k; ++k) {
        const long ny = yc + k / g.window - g.r, nx = xc + k % g.window - g.r;
        if (ny < 0 || nx < 0 || ny >= g.h || nx >= g.w) continue;
        const T* v = &mid(static_cast<std::size_t>(ny), static_cast<std::size_t>(nx), 0);
        T acc = T{0};
        for (long d = 0; d < fd; ++d) {
          const T term = cfg.border_renormalize_spatial ? (v[d] - out[static_cast<std::size_t>(d)]) / weight_sum : v[d];
          acc += up[d] * term;
        }
        grads.guidance_left[static_cast<std::size_t>(k) * plane + pix] = acc;
      }
    }
  });

  // Stage 2: intermediate-volume gradient, gathered per coarse cell.
  parallel_for(static_cast<std::size_t>(g.h), [&](std::size_t yi) {
    const long y = static_cast<long>(yi);
    for (long x = 0; x < g.w; ++x) {
      T* dst = &d_mid(static_cast<std::size_t>(y), static_cast<std::size_t>(x), 0);
      for (long k = 0; k < g.k; ++k) {
        const long by = y - (k / g.window - g.r), bx = x - (k % g.window - g.r);
        if (by < 0 || bx < 0 || by >= g.h || bx >= g.w) continue;
        for (long oy = 0; oy < g.s; ++oy) {
          for (long ox = 0; ox < g.s; ++ox) {
            const long yf = by * g.s + oy, xf = bx * g.s + ox;
            const std::size_t pix = static_cast<std::size_t>(yf * g.fw + xf);
            T coef = guidance_left[static_cast<std::size_t>(k) * plane + pix];
            if (cfg.border_renormalize_spatial) coef = coef / denom(static_cast<std::size_t>(yf), static_cast<std::size_t>(xf));
            const T* up = &upstream(static_cast<std::size_t>(yf), static_cast<std::size_t>(xf), 0);
            for (long d = 0; d < fd; ++d) dst[d] += coef * up[d];
          }
        }
      }
    }
  });

  // Stage 1, per coarse row: cost, right guidance and the left centre channel.
  const long center = (g.k - 1) / 2;
  const T area = static_cast<T>(g.s * g.s);
  const bool mean = cfg.reduce == block_reduce::mean;
  parallel_for(static_cast<std::size_t>(g.h), [&](std::size_t yi) {
    const long y = static_cast<long>(yi);
    stage1_weights<T> sw;
    std::vector<T> dw(static_cast<std::size_t>(g.wd)), cvals(static_cast<std::size_t>(g.wd));
    for (long x = 0; x < g.w; ++x) {
      const T scale = cfg.left_center_scale ? center_scale(guidance_left, g, cfg, x, y) : T{1};
      T d_scale = T{0};
      for (long df = 0; df < fd; ++df) {
        compute_stage1(guidance_right, g, cfg, x, y, df, sw, nullptr);
        const long dc = df / g.s;
        T blended = T{0};
        for (long t = 0; t < g.wd; ++t) {
          const auto ti = static_cast<std::size_t>(t);
          cvals[ti] = sw.valid[ti] ? cost(static_cast<std::size_t>(y), static_cast<std::size_t>(x), static_cast<std::size_t>(dc - g.n + t)) : T{0};
          blended += sw.w[ti] * cvals[ti];
        }
        const T grad = d_mid(static_cast<std::size_t>(y), static_cast<std::size_t>(x), static_cast<std::size_t>(df));
        T g_eff = grad;
        if (cfg.left_center_scale) {
          d_scale += grad * blended;
          g_eff = grad * scale;
        }
        T weighted = T{0};
        for (long t = 0; t < g.wd; ++t) {
          const auto ti = static_cast<std::size_t>(t);
          if (sw.valid[ti]) grads.cost(static_cast<std::size_t>(y), static_cast<std::size_t>(x), static_cast<std::size_t>(dc - g.n + t)) += g_eff * sw.w[ti];
          dw[ti] = g_eff * cvals[ti];
          weighted += sw.w[ti] * dw[ti];
        }
        if (cfg.stage1_renormalize) {
          for (auto& v : dw) v = sw.fallback ? T{0} : (v - weighted) / sw.sum;
        }
        for (long t = 0; t < g.wd; ++t) {
          const auto ti = static_cast<std::size_t>(t);
          if (!sw.valid[ti] || dw[ti] == T{0}) continue;
          const T contrib = mean ? dw[ti] / area : dw[ti];
          for (long oy = 0; oy < g.s; ++oy) {
            for (long ox = 0; ox < g.s; ++ox) {
              const long i = right_index(g, x * g.s + ox, y * g.s + oy, df, x, y, dc - g.n + t);
              if (i >= 0) grads.guidance_right[static_cast<std::size_t>(i)] += contrib;
            }
          }
        }
      }
      if (cfg.left_center_scale) {
        const T contrib = mean ? d_scale / area : d_scale;
        for (long oy = 0; oy < g.s; ++oy) {
          for (long ox = 0; ox < g.s; ++ox) {
            grads.guidance_left[static_cast<std::size_t>((center * g.fh + y * g.s + oy) * g.fw + x * g.s + ox)] += contrib;
          }
        }
      }
    }
  });
  return grads;
}

template <typename T>
aggregation_gradients<T> full3d_backward(const basic_tensor<T>& cost, const basic_tensor<T>& guidance_left,
                                         const basic_tensor<T>& guidance_right, const aggregation_config& cfg,
                                         const basic_tensor<T>& upstream) {
  const dims g = check_volume(cost, cfg);
  check_guidance(guidance_left, g, "left guidance");
  check_guidance(guidance_right, g, "right guidance");
  const long fd = g.d * g.s;
  require_shape(upstream, {static_cast<std::size_t>(g.fh), static_cast<std::size_t>(g.fw), static_cast<std::size_t>(fd)},
                "full3d upstream gradient");
  const std::size_t plane = static_cast<std::size_t>(g.fh * g.fw);
  aggregation_gradients<T> grads;
  grads.cost = basic_tensor<T>(cost.shape());
  grads.guidance_left = basic_tensor<T>(guidance_left.shape());
  grads.guidance_right = basic_tensor<T>(guidance_right.shape());

  // Guidance gradients: every write of fine row y' stays in row y'.
  parallel_for(static_cast<std::size_t>(g.fh), [&](std::size_t yi) {
    const long yf = static_cast<long>(yi);
    for (long xf = 0; xf < g.fw; ++xf) {
      const long yc = yf / g.s, xc = xf / g.s;
      const std::size_t pix = static_cast<std::size_t>(yf * g.fw + xf);
      for (long df = 0; df < fd; ++df) {
        const long dc = df / g.s;
        const T up = upstream(static_cast<std::size_t>(yf), static_cast<std::size_t>(xf), static_cast<std::size_t>(df));
        for (long d = dc - g.n; d <= dc + g.n; ++d) {
          for (long dy = -g.r; dy <= g.r; ++dy) {
            for (long dx = -g.r; dx <= g.r; ++dx) {
              const T c = volume_at(cost, yc + dy, xc + dx, d, g.h, g.w, g.d);
              if (c == T{0}) continue;
              const long kl = (dy + g.r) * g.window + (dx + g.r);
              const long ri = right_index(g, xf, yf, df, xc + dx, yc + dy, d);
              if (ri < 0) continue;
              const T wl = guidance_left[static_cast<std::size_t>(kl) * plane + pix];
              const T wr = guidance_right[static_cast<std::size_t>(ri)];
              grads.guidance_left[static_cast<std::size_t>(kl) * plane + pix] += up * wr * c;
              grads.guidance_right[static_cast<std::size_t>(ri)] += up * wl * c;
            }
          }
        }
      }
    }
  });

  // Cost gradient gathered per coarse cell.
  parallel_for(static_cast<std::size_t>(g.h), [&](std::size_t yi) {
    const long y = static_cast<long>(yi);
    for (long x = 0; x < g.w; ++x) {
      for (long d = 0; d < g.d; ++d) {
        T acc = T{0};
        for (long dy = -g.r; dy <= g.r; ++dy) {
          for (long dx = -g.r; dx <= g.r; ++dx) {
            const long by = y - dy, bx = x - dx;
            if (by < 0 || bx < 0 || by >= g.h || bx >= g.w) continue;
            const long kl = (dy + g.r) * g.window + (dx + g.r);
            for (long oy = 0; oy < g.s; ++oy) {
              for (long ox = 0; ox < g.s; ++ox) {
                const long yf = by * g.s + oy, xf = bx * g.s + ox;
                const T wl = guidance_left[static_cast<std::size_t>(kl) * plane + static_cast<std::size_t>(yf * g.fw + xf)];
                for (long dd = -g.n; dd <= g.n; ++dd) {
                  const long dc = d - dd;
                  if (dc < 0 || dc >= g.d) continue;
                  for (long q = 0; q < g.s; ++q) {
                    const long df = dc * g.s + q;
                    const T wr = right_lookup(guidance_right, g, xf, yf, df, x, y, d);
                    acc += upstream(static_cast<std::size_t>(yf), static_cast<std::size_t>(xf), static_cast<std::size_t>(df)) * wl * wr;
                  }
                }
              }
            }
          }
        }
        grads.cost(static_cast<std::size_t>(y), static_cast<std::size_t>(x), static_cast<std::size_t>(d)) = acc;
      }
    }
  });
  return grads;
}

std::string_view to_string(upsample_method m) {
  switch (m) {
    case upsample_method::nearest: return "nearest";
    case upsample_method::trilinear: return "trilinear";
    case upsample_method::deconv_bilinear: return "deconv_bilinear";
  }
  return "?";
}

upsample_method parse_upsample_method(std::string_view s) {
  if (s == "nearest") return upsample_method::nearest;
  if (s == "trilinear") return upsample_method::trilinear;
  if (s == "deconv_bilinear") return upsample_method::deconv_bilinear;
  throw config_error("unknown upsampling method '" + std::string(s) + "'");
}

std::vector<double> bilinear_kernel(int s) {
  validate_scale(s);
  const int k = 2 * s - s % 2;
  const int factor = (k + 1) / 2;
  const double center = k % 2 == 1 ? factor - 1 : factor - 0.5;
  std::vector<double> w(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) w[static_cast<std::size_t>(i)] = 1.0 - std::abs(i - center) / factor;
  return w;
}

namespace {

// Two-tap 1D resampling tables: for every output index, two source indices
// (-1 = zero padding) and their weights.
struct axis_taps {
  std::vector<std::array<long, 2>> index;
  std::vector<std::array<double, 2>> weight;
};

axis_taps linear_taps(long n, long s) {
  axis_taps taps;
  for (long o = 0; o < n * s; ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(s) - 0.5;
    if (src < 0.0) src = 0.0;
    const long i0 = std::min(static_cast<long>(std::floor(src)), n - 1);
    const long i1 = std::min(i0 + 1, n - 1);
    const double lambda = src - static_cast<double>(i0);
    taps.index.push_back({i0, i1});
    taps.weight.push_back({1.0 - lambda, lambda});
  }
  return taps;
}

axis_taps deconv_taps(long n, int s) {
  const auto kernel = bilinear_kernel(s);
  const long k = static_cast<long>(kernel.size());
  const long pad = (k - s) / 2;
  axis_taps taps;
  for (long o = 0; o < n * s; ++o) {
    std::array<long, 2> idx{-1, -1};
    std::array<double, 2> w{0.0, 0.0};
    int used = 0;
    // Inputs i with o + pad - i*s in [0, k); at most two for even s.
    for (long i = (o + pad) / s - 1; i <= (o + pad) / s && used < 2; ++i) {
      const long kk = o + pad - i * s;
      if (kk < 0 || kk >= k) continue;
      idx[used] = (i >= 0 && i < n) ? i : -1;
      w[used] = kernel[static_cast<std::size_t>(kk)];
      ++used;
    }
    taps.index.push_back(idx);
    taps.weight.push_back(w);
  }
  return taps;
}

// Applies a two-tap table along `axis` of a rank-3 tensor.
template <typename T>
basic_tensor<T> resample_axis(const basic_tensor<T>& in, std::size_t axis, const axis_taps& taps, flop_counts* tally) {
  shape_t shape = in.shape();
  const std::size_t n_in = shape[axis];
  shape[axis] = taps.index.size();
  basic_tensor<T> out(shape);
  const std::size_t outer = axis == 0 ? 1 : (axis == 1 ? shape[0] : shape[0] * shape[1]);
  const std::size_t inner = axis == 2 ? 1 : (axis == 1 ? shape[2] : shape[1] * shape[2]);
  const std::size_t n_out = shape[axis];
  std::vector<flop_counts> tallies(tally ? outer : 0);
  parallel_for(outer, [&](std::size_t o) {
    for (std::size_t j = 0; j < n_out; ++j) {
      const auto& idx = taps.index[j];
      const T w0 = static_cast<T>(taps.weight[j][0]);
      const T w1 = static_cast<T>(taps.weight[j][1]);
      for (std::size_t i = 0; i < inner; ++i) {
        const T a = idx[0] >= 0 ? in[(o * n_in + static_cast<std::size_t>(idx[0])) * inner + i] : T{0};
        const T b = idx[1] >= 0 ? in[(o * n_in + static_cast<std::size_t>(idx[1])) * inner + i] : T{0};
        T v = a * w0;
        v = v + b * w1;
        out[(o * n_out + j) * inner + i] = v;
      }
    }
    if (tally) {
      tallies[o].muls = 2 * n_out * inner;
      tallies[o].adds = n_out * inner;
    }
  });
  if (tally) {
    for (const auto& t : tallies) *tally += t;
  }
  return out;
}

// Transpose of resample_axis.
template <typename T>
basic_tensor<T> resample_axis_adjoint(const basic_tensor<T>& in, std::size_t axis, const axis_taps& taps, std::size_t n_src) {
  shape_t shape = in.shape();
  const std::size_t n_out = shape[axis];
  shape[axis] = n_src;
  basic_tensor<T> out(shape);
  const std::size_t outer = axis == 0 ? 1 : (axis == 1 ? shape[0] : shape[0] * shape[1]);
  const std::size_t inner = axis == 2 ? 1 : (axis == 1 ? shape[2] : shape[1] * shape[2]);
  parallel_for(outer, [&](std::size_t o) {
    for (std::size_t j = 0; j < n_out; ++j) {
      for (int t = 0; t < 2; ++t) {
        const long src = taps.index[j][static_cast<std::size_t>(t)];
        if (src < 0) continue;
        const T w = static_cast<T>(taps.weight[j][static_cast<std::size_t>(t)]);
        for (std::size_t i = 0; i < inner; ++i) {
          out[(o * n_src + static_cast<std::size_t>(src)) * inner + i] += w * in[(o * n_out + j) * inner + i];
        }
      }
    }
  });
  return out;
}

}  // namespace

template <typename T>
basic_tensor<T> upsample_baseline(const basic_tensor<T>& cost, int s, upsample_method method, flop_counter* counter) {
  validate_scale(s);
  require_rank(cost, 3, "cost volume");
  const long h = static_cast<long>(cost.extent(0)), w = static_cast<long>(cost.extent(1)), d = static_cast<long>(cost.extent(2));
  const auto us = static_cast<std::size_t>(s);
  switch (method) {
    case upsample_method::nearest: {
      basic_tensor<T> out({cost.extent(0) * us, cost.extent(1) * us, cost.extent(2) * us});
      for (std::size_t y = 0; y < out.extent(0); ++y) {
        for (std::size_t x = 0; x < out.extent(1); ++x) {
          for (std::size_t k = 0; k < out.extent(2); ++k) out(y, x, k) = cost(y / us, x / us, k / us);
        }
      }
      record_tallies(counter, "nearest", {flop_counts{}});
      return out;
    }
    case upsample_method::trilinear: {
      flop_counts tally;
      flop_counts* tp = counter ? &tally : nullptr;
      auto out = resample_axis(cost, 2, linear_taps(d, s), tp);
      out = resample_axis(out, 1, linear_taps(w, s), tp);
      out = resample_axis(out, 0, linear_taps(h, s), tp);
      record_tallies(counter, "trilinear", {tally});
      return out;
    }
    case upsample_method::deconv_bilinear: {
      const auto ty = deconv_taps(h, s), tx = deconv_taps(w, s), td = deconv_taps(d, s);
      basic_tensor<T> out({cost.extent(0) * us, cost.extent(1) * us, cost.extent(2) * us});
      const long fh = h * s, fw = w * s, fd = d * s;
      std::vector<flop_counts> tallies(counter ? static_cast<std::size_t>(fh) : 0);
      parallel_for(static_cast<std::size_t>(fh), [&](std::size_t yi) {
        for (long xf = 0; xf < fw; ++xf) {
          for (long df = 0; df < fd; ++df) {
            T acc = T{0};
            for (int a = 0; a < 2; ++a) {
              for (int b = 0; b < 2; ++b) {
                for (int c = 0; c < 2; ++c) {
                  const long iy = ty.index[yi][static_cast<std::size_t>(a)];
                  const long ix = tx.index[static_cast<std::size_t>(xf)][static_cast<std::size_t>(b)];
                  const long id = td.index[static_cast<std::size_t>(df)][static_cast<std::size_t>(c)];
                  const T v = (iy >= 0 && ix >= 0 && id >= 0)
                                  ? cost(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), static_cast<std::size_t>(id))
                                  : T{0};
                  T wgt = static_cast<T>(ty.weight[yi][static_cast<std::size_t>(a)]) *
                          static_cast<T>(tx.weight[static_cast<std::size_t>(xf)][static_cast<std::size_t>(b)]);
                  wgt = wgt * static_cast<T>(td.weight[static_cast<std::size_t>(df)][static_cast<std::size_t>(c)]);
                  acc += wgt * v;
                }
              }
            }
            out(yi, static_cast<std::size_t>(xf), static_cast<std::size_t>(df)) = acc;
          }
        }
        if (counter) {
          const auto outputs = static_cast<std::uint64_t>(fw * fd);
          tallies[yi].muls = outputs * 8 * 3;
          tallies[yi].adds = outputs * 8;
        }
      });
      record_tallies(counter, "deconv_bilinear", tallies);
      return out;
    }
  }
  throw config_error("unsupported upsampling method");
}

template <typename T>
basic_tensor<T> upsample_baseline_adjoint(const basic_tensor<T>& fine, int s, upsample_method method) {
  validate_scale(s);
  require_rank(fine, 3, "fine cost volume");
  const auto us = static_cast<std::size_t>(s);
  for (auto e : fine.shape()) {
    if (e % us) throw shape_error("fine extents must be multiples of s, got " + shape_string(fine.shape()));
  }
  const long h = static_cast<long>(fine.extent(0) / us), w = static_cast<long>(fine.extent(1) / us),
             d = static_cast<long>(fine.extent(2) / us);
  switch (method) {
    case upsample_method::nearest: {
      basic_tensor<T> out({fine.extent(0) / us, fine.extent(1) / us, fine.extent(2) / us});
      for (std::size_t y = 0; y < fine.extent(0); ++y) {
        for (std::size_t x = 0; x < fine.extent(1); ++x) {
          for (std::size_t k = 0; k < fine.extent(2); ++k) out(y / us, x / us, k / us) += fine(y, x, k);
        }
      }
      return out;
    }
    case upsample_method::trilinear: {
      auto out = resample_axis_adjoint(fine, 0, linear_taps(h, s), static_cast<std::size_t>(h));
      out = resample_axis_adjoint(out, 1, linear_taps(w, s), static_cast<std::size_t>(w));
      return resample_axis_adjoint(out, 2, linear_taps(d, s), static_cast<std::size_t>(d));
    }
    case upsample_method::deconv_bilinear: {
      auto out = resample_axis_adjoint(fine, 0, deconv_taps(h, s), static_cast<std::size_t>(h));
      out = resample_axis_adjoint(out, 1, deconv_taps(w, s), static_cast<std::size_t>(w));
      return resample_axis_adjoint(out, 2, deconv_taps(d, s), static_cast<std::size_t>(d));
    }
  }
  throw config_error("unsupported upsampling method");
}

#define CAIS_INSTANTIATE(T)                                                                                                           \
  template basic_tensor<T> disparity_upsample(const basic_tensor<T>&, const basic_tensor<T>&, const basic_tensor<T>&,             \
                                              const aggregation_config&, flop_counter*);                                          \
  template basic_tensor<T> spatial_upsample(const basic_tensor<T>&, const basic_tensor<T>&, const aggregation_config&, flop_counter*); \
  template basic_tensor<T> cais_upsample(const basic_tensor<T>&, const basic_tensor<T>&, const basic_tensor<T>&,                    \
                                         const aggregation_config&, flop_counter*);                                               \
  template basic_tensor<T> full3d_upsample(const basic_tensor<T>&, const basic_tensor<T>&, const basic_tensor<T>&,                  \
                                           const aggregation_config&, flop_counter*);                                             \
  template aggregation_gradients<T> cais_backward(const basic_tensor<T>&, const basic_tensor<T>&, const basic_tensor<T>&,           \
                                                  const aggregation_config&, const basic_tensor<T>&);                             \
  template aggregation_gradients<T> full3d_backward(const basic_tensor<T>&, const basic_tensor<T>&, const basic_tensor<T>&,         \
                                                    const aggregation_config&, const basic_tensor<T>&);                           \
  template basic_tensor<T> upsample_baseline(const basic_tensor<T>&, int, upsample_method, flop_counter*);                          \
  template basic_tensor<T> upsample_baseline_adjoint(const basic_tensor<T>&, int, upsample_method);

CAIS_INSTANTIATE(float)
CAIS_INSTANTIATE(double)

#undef CAIS_INSTANTIATE

}  // namespace cais
