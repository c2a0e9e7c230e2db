#include "cais/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "cais/aggregate.hpp"
#include "cais/guidance.hpp"
#include "cais/regression.hpp"
#include "cais/train.hpp"

namespace cais {
namespace {

struct probe {
  std::vector<double*> values;
  std::vector<double> analytic;

  void add(tensor_d& t, const tensor_d& grad) {
    require_shape(grad, t.shape(), "gradcheck gradient");
    for (std::size_t i = 0; i < t.size(); ++i) {
      values.push_back(&t[i]);
      analytic.push_back(grad[i]);
    }
  }
  void add(guidance_params<double>& p, const guidance_params<double>& g) {
    const auto src = g.tensors();
    const auto dst = p.tensors();
    for (std::size_t i = 0; i < dst.size(); ++i) add(*dst[i], *src[i]);
  }
};

gradcheck_result compare(probe& pr, const std::function<double()>& f, double step) {
  std::vector<double> numeric(pr.values.size());
  for (std::size_t i = 0; i < pr.values.size(); ++i) {
    double& v = *pr.values[i];
    const double saved = v;
    v = saved + step;
    const double up = f();
    v = saved - step;
    const double down = f();
    v = saved;
    numeric[i] = (up - down) / (2.0 * step);
  }
  double scale = 0.0;
  for (double n : numeric) scale = std::max(scale, std::abs(n));
  const double floor = std::max(1e-3 * scale, 1e-300);
  gradcheck_result r;
  r.coordinates = numeric.size();
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double a = pr.analytic[i], n = numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), floor});
    r.max_rel_error = std::max(r.max_rel_error, std::abs(a - n) / denom);
  }
  return r;
}

double sum_product(const tensor_d& a, const tensor_d& b) { return dot(a, b); }

struct instance_dims {
  std::size_t h, w, d;
};

instance_dims dims_for(int s) {
  validate_scale(s);
  if (s == 2) return {3, 3, 2};
  if (s == 4) return {2, 2, 2};
  return {2, 2, 2};
}

class sampler {
 public:
  explicit sampler(std::uint64_t seed) : rng_(seed) {}

  tensor_d normal(shape_t shape, double sigma = 1.0) {
    std::normal_distribution<double> dist(0.0, sigma);
    tensor_d t(std::move(shape));
    for (double& v : t.data()) v = dist(rng_);
    return t;
  }
  tensor_d uniform(shape_t shape, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    tensor_d t(std::move(shape));
    for (double& v : t.data()) v = dist(rng_);
    return t;
  }
  // Softmax over the leading axis of normal logits.
  tensor_d guidance(std::size_t k, std::size_t h, std::size_t w) {
    auto g = normal({k, h, w});
    const std::size_t n = h * w;
    for (std::size_t i = 0; i < n; ++i) {
      double hi = g[i];
      for (std::size_t c = 1; c < k; ++c) hi = std::max(hi, g[c * n + i]);
      double sum = 0.0;
      for (std::size_t c = 0; c < k; ++c) sum += (g[c * n + i] = std::exp(g[c * n + i] - hi));
      for (std::size_t c = 0; c < k; ++c) g[c * n + i] /= sum;
    }
    return g;
  }
  // Offsets whose magnitude stays clear of the smooth-L1 knee at 1.
  tensor_d residual(const shape_t& shape) {
    std::uniform_real_distribution<double> mag(0.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    tensor_d t(shape);
    for (double& v : t.data()) {
      const double m = coin(rng_) ? 0.2 + 0.5 * mag(rng_) : 1.3 + 0.7 * mag(rng_);
      v = coin(rng_) ? m : -m;
    }
    return t;
  }
  tensor_d mask(const shape_t& shape) {
    std::bernoulli_distribution keep(0.8);
    tensor_d t(shape);
    for (double& v : t.data()) v = keep(rng_) ? 1.0 : 0.0;
    t[0] = 1.0;
    return t;
  }
  std::uint64_t next() { return rng_(); }

 private:
  std::mt19937_64 rng_;
};

// Rows of every MLP input the instance feeds through the guidance network.
std::vector<std::vector<double>> mlp_inputs(const guidance_params<double>& p,
                                            const std::vector<std::pair<const tensor_d*, const tensor_d*>>& views, int s, int window) {
  std::vector<std::vector<double>> rows;
  const int dirs = p.encoding == guidance_encoding::explicit_shift ? window * window : 1;
  for (const auto& [fine, coarse] : views) {
    for (int k = 0; k < dirs; ++k) {
      const auto x = guidance_input(*fine, *coarse, direction_at(k, window), s, window, p.encoding);
      const std::size_t in = x.extent(0), n = x.extent(1) * x.extent(2);
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> row(in);
        for (std::size_t c = 0; c < in; ++c) row[c] = x[c * n + i];
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

std::vector<double> affine(const tensor_d& w, const tensor_d& b, const std::vector<double>& x) {
  std::vector<double> z(w.extent(0));
  for (std::size_t j = 0; j < z.size(); ++j) {
    double acc = b[j];
    for (std::size_t i = 0; i < x.size(); ++i) acc += w(j, i) * x[i];
    z[j] = acc;
  }
  return z;
}

double inf_norm(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

// Shifts each hidden bias so that zero sits where the unit's pre-activations
// are furthest from it, measured as |z_r| / reach_r, where reach_r bounds how
// far one unit perturbation of any single coordinate can move z_r. Candidate
// shifts are the gap midpoints in the central half of the sorted values, so
// the unit stays partly active. Returns the smallest |z| / reach over both
// hidden layers; a finite-difference step below it crosses no ReLU kink.
double center_hidden_biases(guidance_params<double>& p, const std::vector<std::vector<double>>& inputs) {
  auto layer = [](const tensor_d& w, const tensor_d& b, const std::vector<std::vector<double>>& x) {
    std::vector<std::vector<double>> z;
    for (const auto& row : x) z.push_back(affine(w, b, row));
    return z;
  };
  auto relu = [](std::vector<std::vector<double>> z) {
    for (auto& row : z) {
      for (double& v : row) v = std::max(v, 0.0);
    }
    return z;
  };
  // reach(r, j) for unit j of the layer being centred.
  auto recenter = [](tensor_d& bias, const std::vector<std::vector<double>>& z, const auto& reach) {
    for (std::size_t j = 0; j < bias.size(); ++j) {
      std::vector<double> col;
      for (const auto& row : z) col.push_back(row[j]);
      std::vector<double> sorted = col;
      std::sort(sorted.begin(), sorted.end());
      const std::size_t lo = sorted.size() / 4, hi = std::max(lo + 1, 3 * sorted.size() / 4);
      double best = -1.0, shift = 0.0;
      for (std::size_t i = lo; i < hi && i + 1 < sorted.size(); ++i) {
        const double mid = 0.5 * (sorted[i] + sorted[i + 1]);
        double clearance = INFINITY;
        for (std::size_t r = 0; r < col.size() && clearance > best; ++r) {
          clearance = std::min(clearance, std::abs(col[r] - mid) / reach(r, j));
        }
        if (clearance > best) {
          best = clearance;
          shift = mid;
        }
      }
      bias[j] -= shift;
    }
  };
  auto clearance = [](const std::vector<std::vector<double>>& z, const auto& reach) {
    double m = INFINITY;
    for (std::size_t r = 0; r < z.size(); ++r) {
      for (std::size_t j = 0; j < z[r].size(); ++j) m = std::min(m, std::abs(z[r][j]) / reach(r, j));
    }
    return m;
  };

  std::vector<double> in_norm;
  for (const auto& row : inputs) in_norm.push_back(std::max(1.0, inf_norm(row)));
  auto reach1 = [&](std::size_t r, std::size_t) { return in_norm[r]; };
  recenter(p.b1, layer(p.w1, p.b1, inputs), reach1);
  const auto z1 = layer(p.w1, p.b1, inputs);
  const auto h1 = relu(z1);

  std::vector<double> w2_max(p.hidden), h1_norm;
  for (std::size_t k = 0; k < p.hidden; ++k) {
    for (std::size_t j = 0; j < p.hidden; ++j) w2_max[k] = std::max(w2_max[k], std::abs(p.w2(k, j)));
  }
  for (const auto& row : h1) h1_norm.push_back(inf_norm(row));
  auto reach2 = [&](std::size_t r, std::size_t k) { return std::max({1.0, h1_norm[r], w2_max[k] * in_norm[r]}); };
  recenter(p.b2, layer(p.w2, p.b2, h1), reach2);
  const auto z2 = layer(p.w2, p.b2, h1);
  return std::min(clearance(z1, reach1), clearance(z2, reach2));
}

guidance_params<double> random_params(sampler& rng, std::size_t hidden, guidance_encoding enc, int window) {
  auto p = init_guidance_params(4, hidden, rng.next(), enc, window).cast<double>();
  // Sharper logits than the default init so the softmax is not near-uniform.
  for (double& v : p.w3.data()) v *= 4.0;
  return p;
}

gradcheck_result check_guidance(std::uint64_t seed, int s, bool zero_upstream, double step) {
  sampler rng(seed);
  const auto dims = dims_for(s);
  const std::size_t fh = dims.h * static_cast<std::size_t>(s), fw = dims.w * static_cast<std::size_t>(s);
  const int window = 3;
  auto fine = rng.normal({4, fh, fw});
  auto coarse = avg_pool2(fine);
  for (int f = s / 2; f > 1; f /= 2) coarse = avg_pool2(coarse);
  auto params = random_params(rng, 8, guidance_encoding::explicit_shift, window);
  const double margin = center_hidden_biases(params, mlp_inputs(params, {{&fine, &coarse}}, s, window));
  auto upstream = zero_upstream ? tensor_d({9, fh, fw}) : rng.normal({9, fh, fw});

  const auto grads = guidance_backward(params, fine, coarse, s, window, upstream);
  probe pr;
  pr.add(params, grads.params);
  pr.add(fine, grads.fine);
  pr.add(coarse, grads.coarse);
  auto r = compare(pr, [&] { return sum_product(guidance_forward(params, fine, coarse, s, window), upstream); }, step);
  r.min_relu_margin = margin;
  return r;
}

template <bool Full>
gradcheck_result check_aggregation(std::uint64_t seed, int s, bool zero_upstream, double step) {
  sampler rng(seed);
  const auto dims = dims_for(s);
  const std::size_t su = static_cast<std::size_t>(s);
  aggregation_config cfg;
  cfg.scale = s;
  auto cost = rng.uniform({dims.h, dims.w, dims.d}, 0.0, 3.0);
  auto gl = rng.guidance(9, dims.h * su, dims.w * su);
  auto gr = rng.guidance(9, dims.h * su, dims.w * su);
  const shape_t fine = {dims.h * su, dims.w * su, dims.d * su};
  auto upstream = zero_upstream ? tensor_d(fine) : rng.normal(fine);

  const auto grads = Full ? full3d_backward(cost, gl, gr, cfg, upstream) : cais_backward(cost, gl, gr, cfg, upstream);
  probe pr;
  pr.add(cost, grads.cost);
  pr.add(gl, grads.guidance_left);
  pr.add(gr, grads.guidance_right);
  return compare(pr, [&] {
    return sum_product(Full ? full3d_upsample(cost, gl, gr, cfg) : cais_upsample(cost, gl, gr, cfg), upstream);
  }, step);
}

gradcheck_result check_soft_argmin(std::uint64_t seed, bool zero_upstream, double step) {
  sampler rng(seed);
  auto cost = rng.uniform({2, 3, 4}, 0.0, 3.0);
  auto upstream = zero_upstream ? tensor_d({2, 3}) : rng.normal({2, 3});
  probe pr;
  pr.add(cost, soft_argmin_backward(cost, upstream));
  return compare(pr, [&] { return sum_product(soft_argmin(cost), upstream); }, step);
}

gradcheck_result check_loss(std::uint64_t seed, bool zero_upstream, double step) {
  sampler rng(seed);
  auto pred = rng.uniform({3, 4}, 0.0, 8.0);
  const auto offset = rng.residual({3, 4});
  tensor_d gt(pred.shape());
  for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = pred[i] - offset[i];
  const auto mask = rng.mask({3, 4});
  const double u = zero_upstream ? 0.0 : 1.0;
  auto grad = smooth_l1(pred, gt, mask).grad;
  for (double& v : grad.data()) v *= u;
  probe pr;
  pr.add(pred, grad);
  return compare(pr, [&] { return u * smooth_l1(pred, gt, mask).loss; }, step);
}

gradcheck_result check_end_to_end(std::uint64_t seed, int s, double step) {
  sampler rng(seed);
  const auto dims = dims_for(s);
  const std::size_t su = static_cast<std::size_t>(s);
  aggregation_config cfg;
  cfg.scale = s;

  stereo_sample<double> smp;
  smp.left_fine = rng.normal({4, dims.h * su, dims.w * su});
  smp.right_fine = rng.normal({4, dims.h * su, dims.w * su});
  smp.left_coarse = rng.normal({4, dims.h, dims.w});
  smp.right_coarse = rng.normal({4, dims.h, dims.w});
  smp.cost = rng.uniform({dims.h, dims.w, dims.d}, 0.0, 3.0);
  smp.mask = rng.mask({dims.h * su, dims.w * su});
  smp.gt = tensor_d({dims.h * su, dims.w * su});

  auto params = random_params(rng, 8, guidance_encoding::explicit_shift, cfg.spatial_window);
  const double margin = center_hidden_biases(
      params, mlp_inputs(params, {{&smp.left_fine, &smp.left_coarse}, {&smp.right_fine, &smp.right_coarse}}, s, cfg.spatial_window));

  // Ground truth placed at seeded offsets from the untrained prediction.
  const auto base = run_pipeline(params, smp, cfg, ablation::none).prediction;
  const auto offset = rng.residual(base.shape());
  for (std::size_t i = 0; i < base.size(); ++i) smp.gt[i] = base[i] - offset[i];

  guidance_params<double> grad;
  run_pipeline(params, smp, cfg, ablation::none, &grad);
  probe pr;
  pr.add(params, grad);
  auto r = compare(pr, [&] { return run_pipeline(params, smp, cfg, ablation::none).loss; }, step);
  r.min_relu_margin = margin;
  return r;
}

}  // namespace

std::string_view to_string(gradcheck_target t) {
  switch (t) {
    case gradcheck_target::guidance: return "guidance";
    case gradcheck_target::cais: return "cais";
    case gradcheck_target::full3d: return "full3d";
    case gradcheck_target::soft_argmin: return "soft_argmin";
    case gradcheck_target::loss: return "loss";
    case gradcheck_target::end_to_end: return "end_to_end";
  }
  return "?";
}

gradcheck_target parse_gradcheck_target(std::string_view s) {
  for (auto t : {gradcheck_target::guidance, gradcheck_target::cais, gradcheck_target::full3d, gradcheck_target::soft_argmin,
                 gradcheck_target::loss, gradcheck_target::end_to_end}) {
    if (to_string(t) == s) return t;
  }
  throw config_error("unknown gradcheck target '" + std::string(s) + "'");
}

double gradcheck_tolerance(gradcheck_target t) {
  switch (t) {
    case gradcheck_target::end_to_end: return 1e-4;
    case gradcheck_target::loss: return 1e-6;
    default: return 1e-5;
  }
}

gradcheck_result gradcheck(gradcheck_target target, std::uint64_t seed, int s, bool zero_upstream, double step) {
  validate_scale(s);
  if (!(step > 0.0)) throw config_error("finite-difference step must be positive");
  switch (target) {
    case gradcheck_target::guidance: return check_guidance(seed, s, zero_upstream, step);
    case gradcheck_target::cais: return check_aggregation<false>(seed, s, zero_upstream, step);
    case gradcheck_target::full3d: return check_aggregation<true>(seed, s, zero_upstream, step);
    case gradcheck_target::soft_argmin: return check_soft_argmin(seed, zero_upstream, step);
    case gradcheck_target::loss: return check_loss(seed, zero_upstream, step);
    case gradcheck_target::end_to_end:
      if (zero_upstream) throw config_error("end_to_end has no upstream gradient to zero");
      return check_end_to_end(seed, s, step);
  }
  throw config_error("unknown gradcheck target");
}

std::string_view to_string(adjoint_target t) {
  switch (t) {
    case adjoint_target::cais: return "cais";
    case adjoint_target::full3d: return "full3d";
    case adjoint_target::nearest: return "nearest";
    case adjoint_target::trilinear: return "trilinear";
    case adjoint_target::deconv_bilinear: return "deconv_bilinear";
  }
  return "?";
}

double adjoint_error(adjoint_target target, std::uint64_t seed, int s) {
  sampler rng(seed);
  const std::size_t su = static_cast<std::size_t>(s);
  validate_scale(s);
  const std::size_t h = 3, w = 4, d = 2;
  aggregation_config cfg;
  cfg.scale = s;
  const auto x = rng.normal({h, w, d});
  const auto y = rng.normal({h * su, w * su, d * su});
  const auto gl = rng.guidance(9, h * su, w * su);
  const auto gr = rng.guidance(9, h * su, w * su);

  tensor_d ax, aty;
  switch (target) {
    case adjoint_target::cais:
      ax = cais_upsample(x, gl, gr, cfg);
      aty = cais_backward(x, gl, gr, cfg, y).cost;
      break;
    case adjoint_target::full3d:
      ax = full3d_upsample(x, gl, gr, cfg);
      aty = full3d_backward(x, gl, gr, cfg, y).cost;
      break;
    default: {
      const auto m = target == adjoint_target::nearest     ? upsample_method::nearest
                     : target == adjoint_target::trilinear ? upsample_method::trilinear
                                                           : upsample_method::deconv_bilinear;
      ax = upsample_baseline(x, s, m);
      aty = upsample_baseline_adjoint(y, s, m);
    }
  }
  const double lhs = dot(ax, y), rhs = dot(x, aty);
  const double denom = std::max({std::abs(lhs), std::abs(rhs), 1e-300});
  return std::abs(lhs - rhs) / denom;
}

}  // namespace cais
