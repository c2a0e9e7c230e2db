#include "cais/guidance.hpp"

#include <cmath>
#include <cstring>
#include <random>

#include "cais/parallel.hpp"
#include "cais/tensor_io.hpp"

namespace cais {
namespace {

template <typename T>
struct mlp_trace {
  std::vector<T> h1, a1, h2, a2, out;
};

// Layer weights stored input-major, so each layer is a run of contiguous
// axpy updates. Every output still sums its inputs in index order.
template <typename T>
struct mlp_weights {
  std::size_t in, h, o;
  std::vector<T> w1t, w2t, w3t;
  explicit mlp_weights(const guidance_params<T>& p) : in(p.input_width()), h(p.hidden), o(p.outputs()) {
    w1t = transpose(p.w1.data().data(), h, in);
    w2t = transpose(p.w2.data().data(), h, h);
    w3t = transpose(p.w3.data().data(), o, h);
  }
  static std::vector<T> transpose(const T* w, std::size_t rows, std::size_t cols) {
    std::vector<T> t(rows * cols);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = w[i * cols + j];
    }
    return t;
  }
};

template <typename T>
void dense_relu(const T* __restrict wt, const T* __restrict bias, const T* __restrict x, std::size_t n_in, std::size_t n_out,
                T* __restrict pre, T* __restrict post) {
  for (std::size_t i = 0; i < n_out; ++i) pre[i] = bias[i];
  for (std::size_t j = 0; j < n_in; ++j) {
    const T xj = x[j];
    const T* __restrict col = wt + j * n_out;
    for (std::size_t i = 0; i < n_out; ++i) pre[i] += col[i] * xj;
  }
  if (post) {
    for (std::size_t i = 0; i < n_out; ++i) post[i] = pre[i] > T{0} ? pre[i] : T{0};
  }
}

template <typename T>
void mlp_forward(const guidance_params<T>& p, const mlp_weights<T>& m, const T* z, mlp_trace<T>& tr) {
  tr.h1.resize(m.h);
  tr.a1.resize(m.h);
  tr.h2.resize(m.h);
  tr.a2.resize(m.h);
  tr.out.resize(m.o);
  dense_relu(m.w1t.data(), p.b1.data().data(), z, m.in, m.h, tr.h1.data(), tr.a1.data());
  dense_relu(m.w2t.data(), p.b2.data().data(), tr.a1.data(), m.h, m.h, tr.h2.data(), tr.a2.data());
  dense_relu<T>(m.w3t.data(), p.b3.data().data(), tr.a2.data(), m.h, m.o, tr.out.data(), nullptr);
}

// One image row of MLP evaluations, n columns (pixel-major, direction-minor).
// Activations are stored unit-major so each layer is a run of axpy updates
// along the columns; every sum keeps the input index order of the scalar form.
template <typename T>
struct row_eval {
  std::size_t n = 0, zs = 0, hs = 0;  // padded strides of z and xt
  std::vector<T> z, zt;              // inputs as [n][zs] and [in][n]
  std::vector<T> h1, a1, h2, a2, out;  // [units][n]
  std::vector<T> xt, d_out, d_h2, d_h1, d_z;

  void resize(const mlp_weights<T>& m, std::size_t cols);
};

// dst[j][i] = src[i][j] for a rows x cols source; dst rows are dst_stride apart.
template <typename T>
void transpose_into(const T* __restrict src, std::size_t rows, std::size_t cols, T* __restrict dst, std::size_t dst_stride) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) dst[j * dst_stride + i] = src[i * cols + j];
  }
}

constexpr std::size_t block = 8;

// Eight lanes of element-wise arithmetic; no reassociation across lanes.
template <typename T>
using lanes [[gnu::vector_size(block * sizeof(T))]] = T;

std::size_t padded(std::size_t width) { return (width + block - 1) / block * block; }

template <typename T>
void row_eval<T>::resize(const mlp_weights<T>& m, std::size_t cols) {
  n = cols;
  zs = padded(m.in);
  hs = padded(m.h);
  z.resize(n * zs);
  zt.resize(n * m.in);
  for (auto* v : {&h1, &a1, &h2, &a2, &d_h2, &d_h1}) v->resize(n * m.h);
  xt.resize(n * hs);
  out.resize(n * m.o);
  d_out.resize(n * m.o);
  d_z.resize(n * m.in);
}

// pre[i][c] = b[i] + sum over j in order of w[i][j] * x[j][c]; post = relu(pre).
template <typename T>
[[gnu::target_clones("avx2", "default")]]
void row_layer(const T* __restrict w, const T* __restrict b, const T* __restrict x, std::size_t n_in, std::size_t n_out, std::size_t n,
               T* __restrict pre, T* __restrict post) {
  constexpr std::size_t wide = 4 * block;
  std::size_t c0 = 0;
  for (; c0 + wide <= n; c0 += wide) {
    for (std::size_t i = 0; i < n_out; ++i) {
      lanes<T> acc[4];
      for (auto& a : acc) a = lanes<T>{} + b[i];
      for (std::size_t j = 0; j < n_in; ++j) {
        const T wij = w[i * n_in + j];
        for (std::size_t q = 0; q < 4; ++q) {
          lanes<T> xj;
          std::memcpy(&xj, x + j * n + c0 + q * block, sizeof xj);
          acc[q] += wij * xj;
        }
      }
      std::memcpy(pre + i * n + c0, acc, sizeof acc);
    }
  }
  for (; c0 + block <= n; c0 += block) {
    for (std::size_t i = 0; i < n_out; ++i) {
      lanes<T> acc = lanes<T>{} + b[i];
      for (std::size_t j = 0; j < n_in; ++j) {
        lanes<T> xj;
        std::memcpy(&xj, x + j * n + c0, sizeof xj);
        acc += w[i * n_in + j] * xj;
      }
      std::memcpy(pre + i * n + c0, &acc, sizeof acc);
    }
  }
  for (std::size_t i = 0; i < n_out; ++i) {
    for (std::size_t c = c0; c < n; ++c) {
      T acc = b[i];
      for (std::size_t j = 0; j < n_in; ++j) acc += w[i * n_in + j] * x[j * n + c];
      pre[i * n + c] = acc;
    }
  }
  if (post) {
    for (std::size_t k = 0; k < n_out * n; ++k) post[k] = pre[k] > T{0} ? pre[k] : T{0};
  }
}

// Forward over the inputs left by fill_row.
template <typename T>
void row_forward(const guidance_params<T>& p, const mlp_weights<T>& m, row_eval<T>& r) {
  row_layer(p.w1.data().data(), p.b1.data().data(), r.zt.data(), m.in, m.h, r.n, r.h1.data(), r.a1.data());
  row_layer(p.w2.data().data(), p.b2.data().data(), r.a1.data(), m.h, m.h, r.n, r.h2.data(), r.a2.data());
  row_layer<T>(p.w3.data().data(), p.b3.data().data(), r.a2.data(), m.h, m.o, r.n, r.out.data(), nullptr);
}

// Weight and bias gradients of one layer. Every entry accumulates the columns
// in order, as the per-column scalar form would. x_cols is the layer input as
// [n][x_stride] with x_stride a multiple of the lane count; lanes past n_in
// are computed and dropped.
template <typename T>
[[gnu::target_clones("avx2", "default")]]
void row_param_grad(const T* __restrict d, const T* __restrict x_cols, std::size_t x_stride, std::size_t n_in, std::size_t n_out,
                    std::size_t n, T* __restrict gw, T* __restrict gb) {
  // Four output rows at a time share each input load and give four
  // independent accumulation chains. Missing rows repeat the last one and
  // are not stored.
  constexpr std::size_t rows = 4;
  for (std::size_t i0 = 0; i0 < n_out; i0 += rows) {
    const std::size_t live = std::min(rows, n_out - i0);
    const T* dr[rows];
    for (std::size_t q = 0; q < rows; ++q) dr[q] = d + (i0 + std::min(q, live - 1)) * n;
    T bias[rows] = {};
    for (std::size_t q = 0; q < live; ++q) bias[q] = gb[i0 + q];
    for (std::size_t c = 0; c < n; ++c) {
      for (std::size_t q = 0; q < rows; ++q) bias[q] += dr[q][c];
    }
    for (std::size_t q = 0; q < live; ++q) gb[i0 + q] = bias[q];
    for (std::size_t j0 = 0; j0 < n_in; j0 += block) {
      const std::size_t width = std::min(block, n_in - j0);
      lanes<T> acc[rows] = {};
      for (std::size_t q = 0; q < live; ++q) std::memcpy(&acc[q], gw + (i0 + q) * n_in + j0, width * sizeof(T));
      for (std::size_t c = 0; c < n; ++c) {
        lanes<T> xc;
        std::memcpy(&xc, x_cols + c * x_stride + j0, sizeof xc);
        for (std::size_t q = 0; q < rows; ++q) acc[q] += dr[q][c] * xc;
      }
      for (std::size_t q = 0; q < live; ++q) std::memcpy(gw + (i0 + q) * n_in + j0, &acc[q], width * sizeof(T));
    }
  }
}

// dx[j][c] = sum over i in order of d[i][c] * w[i][j], then the ReLU mask of pre.
template <typename T>
[[gnu::target_clones("avx2", "default")]]
void row_input_grad(const T* __restrict d, const T* __restrict w, std::size_t n_in, std::size_t n_out, std::size_t n, const T* pre,
                    T* __restrict dx) {
  constexpr std::size_t wide = 4 * block;
  std::size_t c0 = 0;
  for (; c0 + wide <= n; c0 += wide) {
    for (std::size_t j = 0; j < n_in; ++j) {
      lanes<T> acc[4] = {};
      for (std::size_t i = 0; i < n_out; ++i) {
        const T wij = w[i * n_in + j];
        for (std::size_t q = 0; q < 4; ++q) {
          lanes<T> di;
          std::memcpy(&di, d + i * n + c0 + q * block, sizeof di);
          acc[q] += di * wij;
        }
      }
      std::memcpy(dx + j * n + c0, acc, sizeof acc);
    }
  }
  for (; c0 + block <= n; c0 += block) {
    for (std::size_t j = 0; j < n_in; ++j) {
      lanes<T> acc = {};
      for (std::size_t i = 0; i < n_out; ++i) {
        lanes<T> di;
        std::memcpy(&di, d + i * n + c0, sizeof di);
        acc += di * w[i * n_in + j];
      }
      std::memcpy(dx + j * n + c0, &acc, sizeof acc);
    }
  }
  for (std::size_t j = 0; j < n_in; ++j) {
    for (std::size_t c = c0; c < n; ++c) {
      T acc = T{0};
      for (std::size_t i = 0; i < n_out; ++i) acc += d[i * n + c] * w[i * n_in + j];
      dx[j * n + c] = acc;
    }
  }
  if (pre) {
    for (std::size_t k = 0; k < n_in * n; ++k) {
      if (!(pre[k] > T{0})) dx[k] = T{0};
    }
  }
}

// Backward from r.d_out after row_forward; accumulates into g. With inputs
// set, d/dz is left in r.d_z as [in][n].
template <typename T>
void row_backward(const guidance_params<T>& p, const mlp_weights<T>& m, row_eval<T>& r, guidance_params<T>& g, bool inputs) {
  transpose_into(r.a2.data(), m.h, r.n, r.xt.data(), r.hs);
  row_param_grad(r.d_out.data(), r.xt.data(), r.hs, m.h, m.o, r.n, g.w3.data().data(), g.b3.data().data());
  row_input_grad(r.d_out.data(), p.w3.data().data(), m.h, m.o, r.n, r.h2.data(), r.d_h2.data());
  transpose_into(r.a1.data(), m.h, r.n, r.xt.data(), r.hs);
  row_param_grad(r.d_h2.data(), r.xt.data(), r.hs, m.h, m.h, r.n, g.w2.data().data(), g.b2.data().data());
  row_input_grad(r.d_h2.data(), p.w2.data().data(), m.h, m.h, r.n, r.h1.data(), r.d_h1.data());
  row_param_grad(r.d_h1.data(), r.z.data(), r.zs, m.in, m.h, r.n, g.w1.data().data(), g.b1.data().data());
  if (inputs) row_input_grad<T>(r.d_h1.data(), p.w1.data().data(), m.in, m.h, r.n, nullptr, r.d_z.data());
}

struct pair_dims {
  std::size_t channels, fine_h, fine_w, coarse_h, coarse_w;
};

template <typename T>
pair_dims check_pair(const basic_tensor<T>& fine, const basic_tensor<T>& coarse, int s) {
  validate_scale(s);
  require_rank(fine, 3, "fine feature map");
  require_rank(coarse, 3, "coarse feature map");
  if (fine.extent(0) != coarse.extent(0)) {
    throw shape_error("fine and coarse feature maps disagree on channels: " + shape_string(fine.shape()) + " vs " +
                      shape_string(coarse.shape()));
  }
  const auto us = static_cast<std::size_t>(s);
  if (fine.extent(1) != us * coarse.extent(1) || fine.extent(2) != us * coarse.extent(2)) {
    throw shape_error("fine extents must be s x coarse extents: " + shape_string(fine.shape()) + " vs " +
                      shape_string(coarse.shape()) + " at s=" + std::to_string(s));
  }
  return {fine.extent(0), fine.extent(1), fine.extent(2), coarse.extent(1), coarse.extent(2)};
}

void check_window(int window) {
  if (window < 1 || window % 2 == 0) throw config_error("spatial window must be odd and positive, got " + std::to_string(window));
}

template <typename T>
void check_params(const guidance_params<T>& p, std::size_t channels, int window) {
  const std::size_t in = p.input_width();
  if (p.channels != channels || p.w1.shape() != shape_t{p.hidden, in}) {
    throw shape_error("guidance params expect input width " + std::to_string(in) + " but features give " +
                      std::to_string(p.encoding == guidance_encoding::explicit_shift ? 2 * channels + 2 : 2 * channels));
  }
  const std::size_t outs = p.encoding == guidance_encoding::explicit_shift ? 1 : static_cast<std::size_t>(window * window);
  if (p.b1.shape() != shape_t{p.hidden} || p.w2.shape() != shape_t{p.hidden, p.hidden} || p.b2.shape() != shape_t{p.hidden} ||
      p.w3.shape() != shape_t{outs, p.hidden} || p.b3.shape() != shape_t{outs}) {
    throw shape_error("guidance params have inconsistent layer shapes for window " + std::to_string(window));
  }
}

// Writes the MLP input of fine pixel (y, x) for `dir` into z.
template <typename T>
void fill_input(const basic_tensor<T>& fine, const basic_tensor<T>& coarse, const pair_dims& d, std::size_t y, std::size_t x,
                direction dir, int s, guidance_encoding encoding, T* z) {
  const std::size_t plane_f = d.fine_h * d.fine_w;
  const std::size_t plane_c = d.coarse_h * d.coarse_w;
  for (std::size_t c = 0; c < d.channels; ++c) z[c] = fine[c * plane_f + y * d.fine_w + x];
  const long cy = static_cast<long>(y) / s + dir.dy;
  const long cx = static_cast<long>(x) / s + dir.dx;
  const bool inside = cy >= 0 && cx >= 0 && cy < static_cast<long>(d.coarse_h) && cx < static_cast<long>(d.coarse_w);
  for (std::size_t c = 0; c < d.channels; ++c) {
    z[d.channels + c] = inside ? coarse[c * plane_c + static_cast<std::size_t>(cy) * d.coarse_w + static_cast<std::size_t>(cx)] : T{0};
  }
  if (encoding == guidance_encoding::explicit_shift) {
    const int ox = static_cast<int>(x % static_cast<std::size_t>(s));
    const int oy = static_cast<int>(y % static_cast<std::size_t>(s));
    z[2 * d.channels] = static_cast<T>(block_offset(s, ox) - s * dir.dx);
    z[2 * d.channels + 1] = static_cast<T>(-block_offset(s, oy) + s * dir.dy);
  }
}

// Inputs of every (pixel, direction) of row y, written to both r.z and r.zt;
// plain_concat uses one column per pixel.
template <typename T>
void fill_row(const guidance_params<T>& p, const mlp_weights<T>& m, const basic_tensor<T>& fine, const basic_tensor<T>& coarse,
              const pair_dims& d, std::size_t y, int s, int window, row_eval<T>& r) {
  const bool explicit_shift = p.encoding == guidance_encoding::explicit_shift;
  const auto k_dirs = explicit_shift ? static_cast<std::size_t>(window * window) : std::size_t{1};
  r.resize(m, d.fine_w * k_dirs);
  for (std::size_t x = 0; x < d.fine_w; ++x) {
    for (std::size_t k = 0; k < k_dirs; ++k) {
      const direction dir = explicit_shift ? direction_at(static_cast<int>(k), window) : direction{};
      const std::size_t col = x * k_dirs + k;
      T* z = r.z.data() + col * r.zs;
      fill_input(fine, coarse, d, y, x, dir, s, p.encoding, z);
      for (std::size_t j = 0; j < m.in; ++j) r.zt[j * r.n + col] = z[j];
    }
  }
}

template <typename T>
void softmax_inplace(std::vector<T>& v) {
  T m = v[0];
  for (T e : v) m = e > m ? e : m;
  T sum = T{0};
  for (T& e : v) {
    e = std::exp(e - m);
    sum += e;
  }
  for (T& e : v) e = e / sum;
}

}  // namespace

template <typename T>
guidance_params<T> guidance_params<T>::zeros(std::size_t channels, std::size_t hidden, guidance_encoding encoding, int window) {
  if (channels == 0 || hidden == 0) throw config_error("guidance params need positive channels and hidden width");
  check_window(window);
  guidance_params p;
  p.encoding = encoding;
  p.channels = channels;
  p.hidden = hidden;
  const std::size_t outs = encoding == guidance_encoding::explicit_shift ? 1 : static_cast<std::size_t>(window * window);
  p.w1 = basic_tensor<T>({hidden, p.input_width()});
  p.b1 = basic_tensor<T>({hidden});
  p.w2 = basic_tensor<T>({hidden, hidden});
  p.b2 = basic_tensor<T>({hidden});
  p.w3 = basic_tensor<T>({outs, hidden});
  p.b3 = basic_tensor<T>({outs});
  return p;
}

guidance_params<float> init_guidance_params(std::size_t channels, std::size_t hidden, std::uint64_t seed, guidance_encoding encoding,
                                            int window) {
  auto p = guidance_params<float>::zeros(channels, hidden, encoding, window);
  std::mt19937_64 rng(seed);
  auto init = [&rng](tensor& w, tensor& b, std::size_t fan_in) {
    const float bound = std::sqrt(1.0f / static_cast<float>(fan_in));
    std::uniform_real_distribution<float> dist(-bound, bound);
    for (float& v : w.data()) v = dist(rng);
    for (float& v : b.data()) v = dist(rng);
  };
  init(p.w1, p.b1, p.input_width());
  init(p.w2, p.b2, hidden);
  init(p.w3, p.b3, hidden);
  return p;
}

void save_guidance_params(const std::filesystem::path& dir, const guidance_params<float>& p) {
  std::filesystem::create_directories(dir);
  write_tensor(dir / "layer1_weight.cvt1", p.w1);
  write_tensor(dir / "layer1_bias.cvt1", p.b1);
  write_tensor(dir / "layer2_weight.cvt1", p.w2);
  write_tensor(dir / "layer2_bias.cvt1", p.b2);
  write_tensor(dir / "layer3_weight.cvt1", p.w3);
  write_tensor(dir / "layer3_bias.cvt1", p.b3);
}

guidance_params<float> load_guidance_params(const std::filesystem::path& dir) {
  guidance_params<float> p;
  p.w1 = read_tensor(dir / "layer1_weight.cvt1");
  p.b1 = read_tensor(dir / "layer1_bias.cvt1");
  p.w2 = read_tensor(dir / "layer2_weight.cvt1");
  p.b2 = read_tensor(dir / "layer2_bias.cvt1");
  p.w3 = read_tensor(dir / "layer3_weight.cvt1");
  p.b3 = read_tensor(dir / "layer3_bias.cvt1");
  require_rank(p.w1, 2, "layer1_weight");
  require_rank(p.w3, 2, "layer3_weight");
  p.hidden = p.w1.extent(0);
  const std::size_t in = p.w1.extent(1);
  if (p.w3.extent(0) == 1) {
    p.encoding = guidance_encoding::explicit_shift;
    if (in < 4 || in % 2) throw shape_error("layer1_weight input width " + std::to_string(in) + " is not 2C+2");
    p.channels = (in - 2) / 2;
    check_params(p, p.channels, 3);
  } else {
    p.encoding = guidance_encoding::plain_concat;
    if (in % 2) throw shape_error("layer1_weight input width " + std::to_string(in) + " is not 2C");
    p.channels = in / 2;
    const int window = static_cast<int>(std::lround(std::sqrt(static_cast<double>(p.w3.extent(0)))));
    check_params(p, p.channels, window);
  }
  return p;
}

template <typename T>
basic_tensor<T> nearest_expand(const basic_tensor<T>& coarse, int s) {
  validate_scale(s);
  require_rank(coarse, 3, "nearest_expand");
  const std::size_t c = coarse.extent(0), h = coarse.extent(1), w = coarse.extent(2);
  const auto us = static_cast<std::size_t>(s);
  basic_tensor<T> out({c, h * us, w * us});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h * us; ++y) {
      for (std::size_t x = 0; x < w * us; ++x) out(ch, y, x) = coarse(ch, y / us, x / us);
    }
  }
  return out;
}

int block_offset(int s, int o) { return o < s / 2 ? o - s / 2 : o - s / 2 + 1; }

tensor make_location_map(int s, direction dir, int window, std::size_t fine_h, std::size_t fine_w) {
  validate_scale(s);
  check_window(window);
  const int r = (window - 1) / 2;
  if (std::abs(dir.dx) > r || std::abs(dir.dy) > r) {
    throw range_error("direction (" + std::to_string(dir.dx) + "," + std::to_string(dir.dy) + ") lies outside a " +
                      std::to_string(window) + "x" + std::to_string(window) + " window");
  }
  tensor out({2, fine_h, fine_w});
  for (std::size_t y = 0; y < fine_h; ++y) {
    const int oy = static_cast<int>(y % static_cast<std::size_t>(s));
    for (std::size_t x = 0; x < fine_w; ++x) {
      const int ox = static_cast<int>(x % static_cast<std::size_t>(s));
      out(0, y, x) = static_cast<float>(block_offset(s, ox) - s * dir.dx);
      out(1, y, x) = static_cast<float>(-block_offset(s, oy) + s * dir.dy);
    }
  }
  return out;
}

template <typename T>
basic_tensor<T> guidance_input(const basic_tensor<T>& fine, const basic_tensor<T>& coarse, direction dir, int s, int window,
                               guidance_encoding encoding) {
  const auto d = check_pair(fine, coarse, s);
  check_window(window);
  const int r = (window - 1) / 2;
  if (std::abs(dir.dx) > r || std::abs(dir.dy) > r) throw range_error("direction outside window");
  const std::size_t in = encoding == guidance_encoding::explicit_shift ? 2 * d.channels + 2 : 2 * d.channels;
  if (encoding == guidance_encoding::plain_concat) dir = {};
  basic_tensor<T> out({in, d.fine_h, d.fine_w});
  std::vector<T> z(in);
  for (std::size_t y = 0; y < d.fine_h; ++y) {
    for (std::size_t x = 0; x < d.fine_w; ++x) {
      fill_input(fine, coarse, d, y, x, dir, s, encoding, z.data());
      for (std::size_t c = 0; c < in; ++c) out(c, y, x) = z[c];
    }
  }
  return out;
}

template <typename T>
basic_tensor<T> guidance_logit_map(const guidance_params<T>& params, const basic_tensor<T>& fine, const basic_tensor<T>& coarse,
                                   direction dir, int s, int window) {
  const auto d = check_pair(fine, coarse, s);
  check_window(window);
  check_params(params, d.channels, window);
  if (params.encoding != guidance_encoding::explicit_shift) {
    throw config_error("guidance_logit_map needs explicit_shift params; plain_concat emits all directions at once");
  }
  const int r = (window - 1) / 2;
  if (std::abs(dir.dx) > r || std::abs(dir.dy) > r) throw range_error("direction outside window");
  basic_tensor<T> out({d.fine_h, d.fine_w});
  const mlp_weights<T> weights(params);
  parallel_for(d.fine_h, [&](std::size_t y) {
    std::vector<T> z(params.input_width());
    mlp_trace<T> tr;
    for (std::size_t x = 0; x < d.fine_w; ++x) {
      fill_input(fine, coarse, d, y, x, dir, s, params.encoding, z.data());
      mlp_forward(params, weights, z.data(), tr);
      out(y, x) = tr.out[0];
    }
  });
  return out;
}

template <typename T>
basic_tensor<T> guidance_forward(const guidance_params<T>& params, const basic_tensor<T>& fine, const basic_tensor<T>& coarse, int s,
                                 int window, flop_counter* counter) {
  const auto d = check_pair(fine, coarse, s);
  check_window(window);
  check_params(params, d.channels, window);
  const auto k_dirs = static_cast<std::size_t>(window * window);
  const std::size_t plane = d.fine_h * d.fine_w;
  const bool counting = counter != nullptr;
  std::vector<flop_counts> tallies(counting ? d.fine_h : 0);
  basic_tensor<T> out({k_dirs, d.fine_h, d.fine_w});

  const std::size_t in = params.input_width(), h = params.hidden, outs = params.outputs();
  const std::uint64_t mlp_macs = h * in + h * h + outs * h;

  const mlp_weights<T> weights(params);
  const bool explicit_shift = params.encoding == guidance_encoding::explicit_shift;
  parallel_for(d.fine_h, [&](std::size_t y) {
    thread_local row_eval<T> r;
    fill_row(params, weights, fine, coarse, d, y, s, window, r);
    row_forward(params, weights, r);
    std::vector<T> logits(k_dirs);
    flop_counts local;
    for (std::size_t x = 0; x < d.fine_w; ++x) {
      if (explicit_shift) {
        for (std::size_t k = 0; k < k_dirs; ++k) logits[k] = r.out[x * k_dirs + k];
      } else {
        for (std::size_t k = 0; k < k_dirs; ++k) logits[k] = r.out[k * r.n + x];
      }
      if (counting) {
        local.muls += (explicit_shift ? k_dirs : 1) * mlp_macs;
        local.adds += (explicit_shift ? k_dirs : 1) * mlp_macs;
      }
      softmax_inplace(logits);
      if (counting) {
        local.adds += 2 * k_dirs;
        local.exps += k_dirs;
        local.divs += k_dirs;
      }
      for (std::size_t k = 0; k < k_dirs; ++k) out[k * plane + y * d.fine_w + x] = logits[k];
    }
    if (counting) tallies[y] = local;
  });
  record_tallies(counter, "guidance", tallies);
  return out;
}

template <typename T>
guidance_gradients<T> guidance_backward(const guidance_params<T>& params, const basic_tensor<T>& fine, const basic_tensor<T>& coarse,
                                        int s, int window, const basic_tensor<T>& upstream, bool feature_grads) {
  const auto d = check_pair(fine, coarse, s);
  check_window(window);
  check_params(params, d.channels, window);
  const auto k_dirs = static_cast<std::size_t>(window * window);
  require_shape(upstream, {k_dirs, d.fine_h, d.fine_w}, "guidance upstream gradient");
  const std::size_t plane = d.fine_h * d.fine_w;
  const std::size_t C = d.channels;
  const bool explicit_shift = params.encoding == guidance_encoding::explicit_shift;

  guidance_gradients<T> result;
  // Coarse-feature gradient of every (direction, fine pixel), gathered below.
  basic_tensor<T> coarse_parts;
  if (feature_grads) {
    result.fine = basic_tensor<T>(fine.shape());
    result.coarse = basic_tensor<T>(coarse.shape());
    coarse_parts = basic_tensor<T>({k_dirs, d.fine_h, d.fine_w, C});
  }
  std::vector<guidance_params<T>> partial(d.fine_h);
  const mlp_weights<T> weights(params);

  parallel_for(d.fine_h, [&](std::size_t y) {
    auto& g = partial[y];
    g = guidance_params<T>::zeros(C, params.hidden, params.encoding, window);
    thread_local row_eval<T> r;
    fill_row(params, weights, fine, coarse, d, y, s, window, r);
    row_forward(params, weights, r);
    std::vector<T> field(k_dirs);
    // Column of direction k at pixel x, in r.out and r.d_out.
    auto at = [&](std::size_t x, std::size_t k) { return explicit_shift ? x * k_dirs + k : k * r.n + x; };
    for (std::size_t x = 0; x < d.fine_w; ++x) {
      for (std::size_t k = 0; k < k_dirs; ++k) field[k] = r.out[at(x, k)];
      softmax_inplace(field);
      T weighted = T{0};
      for (std::size_t k = 0; k < k_dirs; ++k) weighted += field[k] * upstream[k * plane + y * d.fine_w + x];
      for (std::size_t k = 0; k < k_dirs; ++k) r.d_out[at(x, k)] = field[k] * (upstream[k * plane + y * d.fine_w + x] - weighted);
    }
    row_backward(params, weights, r, g, feature_grads);
    if (!feature_grads) return;
    for (std::size_t x = 0; x < d.fine_w; ++x) {
      for (std::size_t k = 0; k < (explicit_shift ? k_dirs : 1); ++k) {
        const std::size_t col = explicit_shift ? x * k_dirs + k : x;
        const std::size_t slot = explicit_shift ? k : k_dirs / 2;
        for (std::size_t c = 0; c < C; ++c) {
          result.fine[c * plane + y * d.fine_w + x] += r.d_z[c * r.n + col];
          coarse_parts[((slot * d.fine_h + y) * d.fine_w + x) * C + c] = r.d_z[(C + c) * r.n + col];
        }
      }
    }
  });

  result.params = guidance_params<T>::zeros(C, params.hidden, params.encoding, window);
  auto dst = result.params.tensors();
  for (const auto& g : partial) {
    auto src = g.tensors();
    for (std::size_t t = 0; t < dst.size(); ++t) {
      for (std::size_t i = 0; i < dst[t]->size(); ++i) (*dst[t])[i] += (*src[t])[i];
    }
  }

  if (!feature_grads) return result;

  // Gather: coarse cell (cy, cx) receives the part of every fine pixel whose
  // direction k pointed at it.
  const int si = s;
  parallel_for(d.coarse_h, [&](std::size_t cy) {
    for (std::size_t cx = 0; cx < d.coarse_w; ++cx) {
      for (std::size_t k = 0; k < k_dirs; ++k) {
        const direction dir = direction_at(static_cast<int>(k), window);
        if (!explicit_shift && (dir.dx != 0 || dir.dy != 0)) continue;
        const long by = static_cast<long>(cy) - dir.dy;
        const long bx = static_cast<long>(cx) - dir.dx;
        if (by < 0 || bx < 0 || by >= static_cast<long>(d.coarse_h) || bx >= static_cast<long>(d.coarse_w)) continue;
        for (int oy = 0; oy < si; ++oy) {
          for (int ox = 0; ox < si; ++ox) {
            const std::size_t fy = static_cast<std::size_t>(by * si + oy);
            const std::size_t fx = static_cast<std::size_t>(bx * si + ox);
            for (std::size_t c = 0; c < C; ++c) {
              result.coarse[(c * d.coarse_h + cy) * d.coarse_w + cx] += coarse_parts[((k * d.fine_h + fy) * d.fine_w + fx) * C + c];
            }
          }
        }
      }
    }
  });
  return result;
}

template struct guidance_params<float>;
template struct guidance_params<double>;
template basic_tensor<float> nearest_expand(const basic_tensor<float>&, int);
template basic_tensor<double> nearest_expand(const basic_tensor<double>&, int);
template basic_tensor<float> guidance_input(const basic_tensor<float>&, const basic_tensor<float>&, direction, int, int, guidance_encoding);
template basic_tensor<double> guidance_input(const basic_tensor<double>&, const basic_tensor<double>&, direction, int, int,
                                             guidance_encoding);
template basic_tensor<float> guidance_logit_map(const guidance_params<float>&, const basic_tensor<float>&, const basic_tensor<float>&,
                                                direction, int, int);
template basic_tensor<double> guidance_logit_map(const guidance_params<double>&, const basic_tensor<double>&, const basic_tensor<double>&,
                                                 direction, int, int);
template basic_tensor<float> guidance_forward(const guidance_params<float>&, const basic_tensor<float>&, const basic_tensor<float>&, int,
                                              int, flop_counter*);
template basic_tensor<double> guidance_forward(const guidance_params<double>&, const basic_tensor<double>&, const basic_tensor<double>&,
                                               int, int, flop_counter*);
template guidance_gradients<float> guidance_backward(const guidance_params<float>&, const basic_tensor<float>&, const basic_tensor<float>&,
                                                     int, int, const basic_tensor<float>&, bool);
template guidance_gradients<double> guidance_backward(const guidance_params<double>&, const basic_tensor<double>&,
                                                      const basic_tensor<double>&, int, int, const basic_tensor<double>&, bool);

}  // namespace cais
