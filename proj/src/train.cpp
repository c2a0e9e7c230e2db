#include "cais/train.hpp"

#include <cmath>
#include <ostream>
#include <random>
#include <utility>

#include "cais/adam.hpp"
#include "cais/aggregate.hpp"
#include "cais/regression.hpp"

namespace cais {

std::string_view to_string(ablation a) {
  switch (a) {
    case ablation::none: return "none";
    case ablation::left_only: return "left_only";
    case ablation::no_encoding: return "no_encoding";
  }
  return "?";
}

ablation parse_ablation(std::string_view s) {
  if (s == "none") return ablation::none;
  if (s == "left_only") return ablation::left_only;
  if (s == "no_encoding") return ablation::no_encoding;
  throw config_error("unknown ablation '" + std::string(s) + "'");
}

namespace {

// Guidance sees features scaled to zero mean and unit variance per channel,
// with statistics taken from the fine left map; the cost volume keeps the raw
// features.
void standardize_guidance_features(stereo_sample<float>& smp) {
  const std::size_t c = smp.left_fine.extent(0);
  const std::size_t n = smp.left_fine.size() / c;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += smp.left_fine[ch * n + i];
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double e = smp.left_fine[ch * n + i] - mean;
      sq += e * e;
    }
    const double scale = 1.0 / std::sqrt(sq / static_cast<double>(n) + 1e-12);
    for (tensor* f : {&smp.left_fine, &smp.right_fine, &smp.left_coarse, &smp.right_coarse}) {
      const std::size_t m = f->size() / c;
      for (std::size_t i = 0; i < m; ++i) {
        float& v = (*f)[ch * m + i];
        v = static_cast<float>((v - mean) * scale);
      }
    }
  }
}

}  // namespace

stereo_sample<float> make_sample(const synthetic_scene& scene, int s) {
  validate_scale(s);
  const std::size_t h = scene.left.extent(0), w = scene.left.extent(1);
  if (h % static_cast<std::size_t>(s) != 0 || w % static_cast<std::size_t>(s) != 0) {
    throw shape_error("scene " + shape_string(scene.left.shape()) + " is not divisible by scale " + std::to_string(s));
  }
  stereo_sample<float> out;
  out.left_fine = extract_features(scene.left);
  out.right_fine = extract_features(scene.right);
  out.left_coarse = extract_features_at_scale(scene.left, s);
  out.right_coarse = extract_features_at_scale(scene.right, s);
  const auto dc = static_cast<std::size_t>((scene.d_max + s - 1) / s);
  out.cost = build_cost_volume(out.left_coarse, out.right_coarse, dc);
  standardize_guidance_features(out);
  out.gt = scene.gt;
  out.mask = scene.mask;
  return out;
}

template <typename T>
pipeline_result<T> run_pipeline(const guidance_params<T>& params, const stereo_sample<T>& sample, const aggregation_config& cfg,
                                ablation mode, guidance_params<T>* grad) {
  const int s = cfg.scale, win = cfg.spatial_window;
  if ((mode == ablation::no_encoding) != (params.encoding == guidance_encoding::plain_concat)) {
    throw config_error("ablation " + std::string(to_string(mode)) + " does not match the parameter encoding");
  }
  const auto gl = guidance_forward(params, sample.left_fine, sample.left_coarse, s, win);
  const auto gr = mode == ablation::left_only ? gl : guidance_forward(params, sample.right_fine, sample.right_coarse, s, win);
  const auto fine = cais_upsample(sample.cost, gl, gr, cfg);

  pipeline_result<T> r;
  r.prediction = soft_argmin(fine);
  auto loss = smooth_l1(r.prediction, sample.gt, sample.mask);
  r.loss = loss.loss;
  if (!std::isfinite(static_cast<double>(r.loss))) throw numeric_error("pipeline loss is not finite");
  if (grad == nullptr) return r;

  const auto d_fine = soft_argmin_backward(fine, loss.grad);
  auto agg = cais_backward(sample.cost, gl, gr, cfg, d_fine);
  if (mode == ablation::left_only) {
    for (std::size_t i = 0; i < agg.guidance_left.size(); ++i) agg.guidance_left[i] += agg.guidance_right[i];
    *grad = guidance_backward(params, sample.left_fine, sample.left_coarse, s, win, agg.guidance_left, false).params;
    return r;
  }
  *grad = guidance_backward(params, sample.left_fine, sample.left_coarse, s, win, agg.guidance_left, false).params;
  const auto right = guidance_backward(params, sample.right_fine, sample.right_coarse, s, win, agg.guidance_right, false).params;
  auto dst = grad->tensors();
  const auto src = right.tensors();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    for (std::size_t j = 0; j < dst[i]->size(); ++j) (*dst[i])[j] += (*src[i])[j];
  }
  return r;
}

std::uint64_t scene_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  return rng();
}

namespace {

synthetic_scene scene_for(const train_config& cfg, std::uint64_t stream, std::uint64_t index) {
  return gen_scene(scene_seed(cfg.seed, stream, index), cfg.height, cfg.width, cfg.rects, cfg.d_max, cfg.scene);
}

guidance_encoding encoding_for(ablation a) {
  return a == ablation::no_encoding ? guidance_encoding::plain_concat : guidance_encoding::explicit_shift;
}

}  // namespace

double heldout_epe(const guidance_params<float>& params, const train_config& cfg) {
  double acc = 0.0;
  for (int i = 0; i < cfg.heldout; ++i) {
    const auto sample = make_sample(scene_for(cfg, 1, static_cast<std::uint64_t>(i)), cfg.agg.scale);
    const auto r = run_pipeline(params, sample, cfg.agg, cfg.mode);
    acc += epe(r.prediction, sample.gt, sample.mask);
  }
  return acc / cfg.heldout;
}

train_result train_toy(const train_config& cfg) {
  validate(cfg.agg);
  if (cfg.iterations < 0) throw config_error("iterations must be non-negative");
  if (cfg.heldout < 1) throw config_error("need at least one held-out scene");
  if (cfg.batch < 1) throw config_error("batch must be at least 1");

  train_result out;
  out.report.config = cfg;
  out.params = init_guidance_params(4, cfg.hidden, cfg.seed, encoding_for(cfg.mode), cfg.agg.spatial_window);

  std::vector<stereo_sample<float>> heldout;
  for (int i = 0; i < cfg.heldout; ++i) heldout.push_back(make_sample(scene_for(cfg, 1, static_cast<std::uint64_t>(i)), cfg.agg.scale));
  auto baseline = [&](upsample_method m) {
    double acc = 0.0;
    for (const auto& h : heldout) acc += epe(soft_argmin(upsample_baseline(h.cost, cfg.agg.scale, m)), h.gt, h.mask);
    return acc / cfg.heldout;
  };
  out.report.epe_nearest = baseline(upsample_method::nearest);
  out.report.epe_trilinear = baseline(upsample_method::trilinear);
  out.report.epe_deconv = baseline(upsample_method::deconv_bilinear);
  if (cfg.iterations == 0) return out;

  auto evaluate = [&](double* bad1) {
    double acc = 0.0, bad = 0.0;
    for (const auto& h : heldout) {
      const auto r = run_pipeline(out.params, h, cfg.agg, cfg.mode);
      acc += epe(r.prediction, h.gt, h.mask);
      bad += bad_ratio(r.prediction, h.gt, h.mask, 1.0);
    }
    if (bad1 != nullptr) *bad1 = bad / cfg.heldout;
    return acc / cfg.heldout;
  };
  out.report.epe_initial = evaluate(nullptr);

  adam_state<float> opt;
  opt.lr = cfg.lr;
  auto grad = out.params;
  auto step_grad = out.params;
  for (int it = 0; it < cfg.iterations; ++it) {
    double loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto index = static_cast<std::uint64_t>(it) * static_cast<std::uint64_t>(cfg.batch) + static_cast<std::uint64_t>(b);
      const auto sample = make_sample(scene_for(cfg, 0, index), cfg.agg.scale);
      const auto r = run_pipeline(out.params, sample, cfg.agg, cfg.mode, b == 0 ? &step_grad : &grad);
      loss += static_cast<double>(r.loss);
      if (b == 0) continue;
      auto dst = step_grad.tensors();
      const auto src = std::as_const(grad).tensors();
      for (std::size_t i = 0; i < dst.size(); ++i) {
        for (std::size_t j = 0; j < dst[i]->size(); ++j) (*dst[i])[j] += (*src[i])[j];
      }
    }
    if (cfg.batch > 1) {
      const float inv = 1.0f / static_cast<float>(cfg.batch);
      for (auto* t : step_grad.tensors()) {
        for (float& v : t->data()) v *= inv;
      }
    }
    out.report.losses.push_back(loss / cfg.batch);
    const auto p = out.params.tensors();
    const auto g = std::as_const(step_grad).tensors();
    adam_step(opt, std::vector<tensor*>(p.begin(), p.end()), std::vector<const tensor*>(g.begin(), g.end()));
  }
  double bad1 = 0.0;
  out.report.epe_final = evaluate(&bad1);
  out.report.bad1_final = bad1;
  return out;
}

void train_report::write(std::ostream& os) const {
  os << "seed = " << config.seed << '\n'
     << "iterations = " << config.iterations << '\n'
     << "scale = " << config.agg.scale << '\n'
     << "ablation = " << to_string(config.mode) << '\n'
     << "size = " << config.height << 'x' << config.width << '\n'
     << "d_max = " << config.d_max << '\n';
  for (std::size_t i = 0; i < losses.size(); ++i) os << "loss." << i << " = " << losses[i] << '\n';
  if (epe_initial) os << "epe_initial = " << *epe_initial << '\n';
  if (epe_final) os << "epe_final = " << *epe_final << '\n';
  if (bad1_final) os << "bad1_final = " << *bad1_final << '\n';
  os << "epe_nearest = " << epe_nearest << '\n'
     << "epe_trilinear = " << epe_trilinear << '\n'
     << "epe_deconv_bilinear = " << epe_deconv << '\n';
}

template pipeline_result<float> run_pipeline(const guidance_params<float>&, const stereo_sample<float>&, const aggregation_config&,
                                             ablation, guidance_params<float>*);
template pipeline_result<double> run_pipeline(const guidance_params<double>&, const stereo_sample<double>&, const aggregation_config&,
                                              ablation, guidance_params<double>*);

}  // namespace cais
