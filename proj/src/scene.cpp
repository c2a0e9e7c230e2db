#include "cais/scene.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace cais {
namespace {

// White noise smoothed by two 3x3 box passes, rescaled to [-1, 1].
tensor band_limited_noise(std::mt19937_64& rng, std::size_t h, std::size_t w) {
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  tensor field({h, w});
  for (float& v : field.data()) v = dist(rng);
  for (int pass = 0; pass < 2; ++pass) {
    tensor next({h, w});
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        float acc = 0.0f;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const auto yy = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(y) + dy, 0, static_cast<long>(h) - 1));
            const auto xx = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(x) + dx, 0, static_cast<long>(w) - 1));
            acc += field(yy, xx);
          }
        }
        next(y, x) = acc / 9.0f;
      }
    }
    field = std::move(next);
  }
  const auto [lo, hi] = std::minmax_element(field.data().begin(), field.data().end());
  const float mid = 0.5f * (*lo + *hi), half = std::max(0.5f * (*hi - *lo), 1e-6f);
  for (float& v : field.data()) v = (v - mid) / half;
  return field;
}

}  // namespace

synthetic_scene gen_scene(std::uint64_t seed, std::size_t height, std::size_t width, int rect_count, int d_max,
                          const scene_options& opts) {
  if (height < 4 || width < 4) throw config_error("scene must be at least 4x4");
  if (d_max < 1) throw config_error("d_max must be at least 1");
  if (static_cast<std::size_t>(d_max) * 2 >= width) throw config_error("d_max must be below width / 2");
  if (rect_count < 0 || rect_count >= d_max) {
    throw config_error("rect count " + std::to_string(rect_count) + " needs more than " + std::to_string(rect_count) +
                       " distinct disparities below d_max = " + std::to_string(d_max));
  }

  std::mt19937_64 rng(seed);
  const auto surfaces = static_cast<std::size_t>(rect_count) + 1;

  // Distinct disparities; the background takes the smallest (farthest).
  std::vector<int> pool(static_cast<std::size_t>(d_max));
  std::iota(pool.begin(), pool.end(), 0);
  std::shuffle(pool.begin(), pool.end(), rng);
  std::vector<int> disparity(pool.begin(), pool.begin() + static_cast<long>(surfaces));
  std::sort(disparity.begin(), disparity.end());

  std::vector<float> base(surfaces);
  std::uniform_real_distribution<float> base_dist(0.0f, opts.contrast);
  for (float& b : base) b = base_dist(rng);
  std::vector<tensor> textures;
  for (std::size_t i = 0; i < surfaces; ++i) textures.push_back(band_limited_noise(rng, height, width));

  // Region map, painted far to near so nearer rectangles stay on top.
  std::vector<std::size_t> region(height * width, 0);
  std::uniform_int_distribution<std::size_t> size_h(height / 4, height / 2), size_w(width / 4, width / 2);
  for (std::size_t r = 1; r < surfaces; ++r) {
    const std::size_t rh = size_h(rng), rw = size_w(rng);
    const std::size_t y0 = std::uniform_int_distribution<std::size_t>(0, height - rh)(rng);
    const std::size_t x0 = std::uniform_int_distribution<std::size_t>(0, width - rw)(rng);
    for (std::size_t y = y0; y < y0 + rh; ++y) {
      for (std::size_t x = x0; x < x0 + rw; ++x) region[y * width + x] = r;
    }
  }

  synthetic_scene scene;
  scene.seed = seed;
  scene.d_max = d_max;
  scene.left = tensor({height, width});
  scene.right = tensor({height, width});
  scene.gt = tensor({height, width});
  scene.mask = tensor({height, width});
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t r = region[y * width + x];
      scene.gt(y, x) = static_cast<float>(disparity[r]);
      scene.left(y, x) = base[r] + opts.texture * textures[r](y, x);
    }
  }

  // Forward warp with a disparity z-buffer; right pixels nobody lands on show
  // background that the left view cannot see.
  const int bg = disparity[0];
  for (std::size_t y = 0; y < height; ++y) {
    std::vector<int> depth(width, -1);
    std::vector<long> owner(width, -1);
    for (std::size_t x = 0; x < width; ++x) {
      const int g = static_cast<int>(scene.gt(y, x));
      const long xr = static_cast<long>(x) - g;
      if (xr < 0) continue;
      const auto xi = static_cast<std::size_t>(xr);
      if (g > depth[xi]) {
        depth[xi] = g;
        owner[xi] = static_cast<long>(x);
      }
    }
    for (std::size_t xr = 0; xr < width; ++xr) {
      if (owner[xr] >= 0) {
        scene.right(y, xr) = scene.left(y, static_cast<std::size_t>(owner[xr]));
        scene.mask(y, static_cast<std::size_t>(owner[xr])) = 1.0f;
      } else {
        const auto xs = std::min(xr + static_cast<std::size_t>(bg), width - 1);
        scene.right(y, xr) = base[0] + opts.texture * textures[0](y, xs);
      }
    }
  }
  return scene;
}

template <typename T>
basic_tensor<T> extract_features(const basic_tensor<T>& image) {
  require_rank(image, 2, "extract_features");
  const std::size_t h = image.extent(0), w = image.extent(1);
  basic_tensor<T> f({4, h, w});
  auto at = [&](long y, long x) {
    y = std::clamp<long>(y, 0, static_cast<long>(h) - 1);
    x = std::clamp<long>(x, 0, static_cast<long>(w) - 1);
    return image(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  };
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const long yi = static_cast<long>(y), xi = static_cast<long>(x);
      f(0, y, x) = image(y, x);
      f(1, y, x) = (at(yi, xi + 1) - at(yi, xi - 1)) / T{2};
      f(2, y, x) = (at(yi + 1, xi) - at(yi - 1, xi)) / T{2};
      T mean = T{0};
      for (long dy = -1; dy <= 1; ++dy) {
        for (long dx = -1; dx <= 1; ++dx) mean += at(yi + dy, xi + dx);
      }
      mean = mean / T{9};
      T var = T{0};
      for (long dy = -1; dy <= 1; ++dy) {
        for (long dx = -1; dx <= 1; ++dx) {
          const T e = at(yi + dy, xi + dx) - mean;
          var += e * e;
        }
      }
      f(3, y, x) = var / T{9};
    }
  }
  return f;
}

template <typename T>
basic_tensor<T> extract_features_at_scale(const basic_tensor<T>& image, int s) {
  if (s < 1 || (s & (s - 1)) != 0) throw config_error("feature scale must be a power of two, got " + std::to_string(s));
  basic_tensor<T> img = image;
  for (int f = s; f > 1; f /= 2) img = avg_pool2(img);
  return extract_features(img);
}

template <typename T>
basic_tensor<T> build_cost_volume(const basic_tensor<T>& left, const basic_tensor<T>& right, std::size_t disparities) {
  require_rank(left, 3, "left features");
  require_shape(right, left.shape(), "right features");
  const std::size_t c = left.extent(0), h = left.extent(1), w = left.extent(2);
  if (disparities == 0 || disparities > w) {
    throw config_error("disparity count " + std::to_string(disparities) + " must be in [1, width=" + std::to_string(w) + "]");
  }
  basic_tensor<T> cv({h, w, disparities});
  T worst = T{0};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t d = 0; d < disparities && d <= x; ++d) {
        T acc = T{0};
        for (std::size_t ch = 0; ch < c; ++ch) acc += std::abs(left(ch, y, x) - right(ch, y, x - d));
        acc = acc / static_cast<T>(c);
        cv(y, x, d) = acc;
        worst = std::max(worst, acc);
      }
    }
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t d = x + 1; d < disparities; ++d) cv(y, x, d) = worst;
    }
  }
  return cv;
}

template basic_tensor<float> extract_features(const basic_tensor<float>&);
template basic_tensor<double> extract_features(const basic_tensor<double>&);
template basic_tensor<float> extract_features_at_scale(const basic_tensor<float>&, int);
template basic_tensor<double> extract_features_at_scale(const basic_tensor<double>&, int);
template basic_tensor<float> build_cost_volume(const basic_tensor<float>&, const basic_tensor<float>&, std::size_t);
template basic_tensor<double> build_cost_volume(const basic_tensor<double>&, const basic_tensor<double>&, std::size_t);

}  // namespace cais
