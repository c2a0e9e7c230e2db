#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "cais/aggregate.hpp"
#include "cais/flops.hpp"
#include "cais/gradcheck.hpp"
#include "cais/parallel.hpp"
#include "cais/regression.hpp"
#include "cais/scene.hpp"
#include "cais/tensor_io.hpp"
#include "cais/train.hpp"

namespace fs = std::filesystem;
using namespace cais;

namespace {

constexpr int exit_usage = 2;
constexpr int exit_numeric = 1;

class usage_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::size_t> parse_dims(const std::string& text, std::size_t count, const char* flag) {
  std::vector<std::size_t> out;
  bool ok = !text.empty() && text.back() != 'x';
  std::stringstream ss(text);
  std::string part;
  while (ok && std::getline(ss, part, 'x')) {
    std::size_t used = 0;
    long v = -1;
    try {
      v = std::stol(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    ok = !part.empty() && used == part.size() && v > 0;
    out.push_back(static_cast<std::size_t>(v));
  }
  if (!ok || out.size() != count) {
    throw usage_error(std::string(flag) + " expects " + (count == 2 ? "HxW" : "HxWxD") + " with positive extents, got '" + text + "'");
  }
  return out;
}

std::string fixed(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

struct aggregation_flags {
  int scale = 2;
  int spatial_window = 3;
  int disparity_window = 3;
  std::string reduce = "mean";
  bool no_renormalize = false;
  bool no_center_scale = false;
  bool border_renormalize = false;

  void attach(CLI::App* app) {
    app->add_option("--scale", scale, "Scale ratio s")->check(CLI::IsMember({2, 4, 8}))->capture_default_str();
    app->add_option("--spatial-window", spatial_window, "Spatial window w_s (odd)")->capture_default_str();
    app->add_option("--disparity-window", disparity_window, "Disparity window w_d (odd)")->capture_default_str();
    app->add_option("--reduce", reduce, "Block reduction")->check(CLI::IsMember({"mean", "sum"}))->capture_default_str();
    app->add_flag("--no-renormalize", no_renormalize, "Disable stage-1 weight renormalization");
    app->add_flag("--no-center-scale", no_center_scale, "Disable the left centre-direction scaling");
    app->add_flag("--border-renormalize", border_renormalize, "Renormalize spatial weights at the border");
  }

  aggregation_config config() const {
    aggregation_config cfg;
    cfg.scale = scale;
    cfg.spatial_window = spatial_window;
    cfg.disparity_window = disparity_window;
    cfg.reduce = parse_block_reduce(reduce);
    cfg.stage1_renormalize = !no_renormalize;
    cfg.left_center_scale = !no_center_scale;
    cfg.border_renormalize_spatial = border_renormalize;
    validate(cfg);
    return cfg;
  }
};

int cmd_gen(std::uint64_t seed, const std::string& size, int dmax, int rects, const fs::path& out) {
  const auto hw = parse_dims(size, 2, "--size");
  const auto scene = gen_scene(seed, hw[0], hw[1], rects, dmax);
  fs::create_directories(out);
  write_tensor(out / "left.cvt1", scene.left);
  write_tensor(out / "right.cvt1", scene.right);
  write_pfm(out / "gt.pfm", scene.gt);
  write_tensor(out / "mask.cvt1", scene.mask);
  std::cout << "seed = " << seed << "\nsize = " << hw[0] << "x" << hw[1] << "\nd_max = " << dmax << "\nrects = " << rects
            << "\nout = " << out.string() << "\n";
  return 0;
}

int cmd_upsample(const std::string& cv, const std::string& gl, const std::string& gr, const aggregation_flags& flags,
                 const std::string& mode, const std::string& method, const fs::path& out) {
  const auto cost = read_tensor(cv);
  const auto cfg = flags.config();
  tensor fine;
  if (!method.empty()) {
    fine = upsample_baseline(cost, cfg.scale, parse_upsample_method(method));
  } else {
    if (gl.empty() || gr.empty()) throw usage_error("--mode needs --guidance-left and --guidance-right");
    const auto left = read_tensor(gl);
    const auto right = read_tensor(gr);
    fine = mode == "full3d" ? full3d_upsample(cost, left, right, cfg) : cais_upsample(cost, left, right, cfg);
  }
  require_finite(fine, "upsampled volume");
  write_tensor(out, fine);
  std::cout << "shape = " << shape_string(fine.shape()) << "\nout = " << out.string() << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& target, std::uint64_t seed, int scale) {
  const auto t = parse_gradcheck_target(target);
  const auto r = gradcheck(t, seed, scale);
  const double tol = gradcheck_tolerance(t);
  const bool pass = r.max_rel_error < tol;
  std::cout << "target = " << target << "\nseed = " << seed << "\nscale = " << scale << "\ncoordinates = " << r.coordinates
            << "\nmax_rel_error = " << r.max_rel_error << "\ntolerance = " << tol << "\nstatus = " << (pass ? "pass" : "fail") << "\n";
  return pass ? 0 : exit_numeric;
}

int cmd_bench(const std::string& size, const aggregation_flags& flags, int repeat, std::uint64_t seed) {
  const auto dims = parse_dims(size, 3, "--size");
  const auto cfg = flags.config();
  if (repeat < 1) throw usage_error("--repeat must be at least 1");
  const auto s = static_cast<std::size_t>(cfg.scale);
  const auto k = static_cast<std::size_t>(cfg.directions());

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  tensor cost({dims[0], dims[1], dims[2]});
  for (float& v : cost.data()) v = dist(rng);
  tensor gl({k, dims[0] * s, dims[1] * s}), gr({k, dims[0] * s, dims[1] * s});
  for (tensor* g : {&gl, &gr}) {
    const std::size_t plane = dims[0] * s * dims[1] * s;
    for (float& v : g->data()) v = dist(rng);
    for (std::size_t i = 0; i < plane; ++i) {
      float sum = 0.0f;
      for (std::size_t c = 0; c < k; ++c) sum += (*g)[c * plane + i];
      for (std::size_t c = 0; c < k; ++c) (*g)[c * plane + i] /= sum;
    }
  }

  auto time = [&](auto&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < repeat; ++i) fn();
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / repeat;
  };
  flop_counter full_counter, dec_counter;
  full3d_upsample(cost, gl, gr, cfg, &full_counter);
  cais_upsample(cost, gl, gr, cfg, &dec_counter);
  const auto full_an = flops_analytic(dims[0], dims[1], dims[2], cfg, flop_mode::full3d);
  const auto dec_an = flops_analytic(dims[0], dims[1], dims[2], cfg, flop_mode::decomposed);
  const auto full_rt = flops_runtime(full_counter, "full3d");
  const auto dec_rt = flops_runtime(dec_counter, "decomposed");
  const double full_s = time([&] { full3d_upsample(cost, gl, gr, cfg); });
  const double dec_s = time([&] { cais_upsample(cost, gl, gr, cfg); });

  full_an.write(std::cout, "full3d");
  dec_an.write(std::cout, "decomposed");
  const bool agree = full_an.totals() == full_rt.totals() && dec_an.totals() == dec_rt.totals();
  std::cout << "runtime_matches_analytic = " << (agree ? "true" : "false") << "\n";
  std::cout << "flop_ratio = " << static_cast<double>(full_an.totals().total()) / static_cast<double>(dec_an.totals().total()) << "\n";
  std::cout << "full3d.seconds = " << full_s << "\ndecomposed.seconds = " << dec_s << "\n";
  return agree ? 0 : exit_numeric;
}

int cmd_train(int iters, std::uint64_t seed, bool ablate_stereo, bool ablate_encoding, const aggregation_flags& flags,
              const std::string& size, int dmax, int batch, const fs::path& out) {
  if (ablate_stereo && ablate_encoding) throw usage_error("--ablate-stereo and --ablate-encoding are exclusive");
  train_config cfg;
  cfg.seed = seed;
  cfg.iterations = iters;
  cfg.agg = flags.config();
  cfg.mode = ablate_stereo ? ablation::left_only : ablate_encoding ? ablation::no_encoding : ablation::none;
  const auto hw = parse_dims(size, 2, "--size");
  cfg.height = hw[0];
  cfg.width = hw[1];
  cfg.d_max = dmax;
  cfg.batch = batch;
  const auto result = train_toy(cfg);
  fs::create_directories(out);
  save_guidance_params(out, result.params);
  std::ofstream report(out / "report.txt");
  result.report.write(report);
  result.report.write(std::cout);
  return 0;
}

int cmd_eval(const std::string& pred_path, const std::string& gt_path, const std::string& mask_path) {
  const auto pred = read_pfm(pred_path);
  const auto gt = read_pfm(gt_path);
  const auto mask = mask_path.empty() ? tensor(gt.shape(), 1.0f) : read_tensor(mask_path);
  require_finite(pred, "prediction");
  std::cout << "epe = " << fixed(epe(pred, gt, mask)) << "\n";
  for (double delta : {0.5, 1.0, 2.0, 4.0}) {
    std::cout << "bad_" << (delta == 0.5 ? std::string("0.5") : std::to_string(static_cast<int>(delta))) << " = "
              << fixed(bad_ratio(pred, gt, mask, delta)) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Content-aware inter-scale cost aggregation toolkit", "cais"};
  app.set_help_all_flag("--help-all", "Print help for every subcommand");
  app.require_subcommand(1);
  std::size_t threads = 0;
  app.add_option("--threads", threads, "Worker thread cap (0 = all cores)")->capture_default_str();

  auto* gen = app.add_subcommand("gen-synthetic", "Write a synthetic stereo pair with ground truth");
  std::uint64_t seed = 0;
  std::string size = "32x32";
  int dmax = 8, rects = 3;
  fs::path out;
  gen->add_option("--seed", seed, "Scene seed")->capture_default_str();
  gen->add_option("--size", size, "Image size HxW")->capture_default_str();
  gen->add_option("--dmax", dmax, "Disparity bound (exclusive)")->capture_default_str();
  gen->add_option("--rects", rects, "Foreground rectangles")->capture_default_str();
  gen->add_option("--out", out, "Output directory")->required();

  auto* up = app.add_subcommand("upsample", "Upsample a coarse cost volume");
  std::string cv, gl, gr, mode, method;
  aggregation_flags up_flags;
  fs::path up_out;
  up->add_option("--cv", cv, "Coarse cost volume (CVT1, HxWxD)")->required();
  up->add_option("--guidance-left", gl, "Left guidance field (CVT1, KxH'xW')");
  up->add_option("--guidance-right", gr, "Right guidance field (CVT1, KxH'xW')");
  auto* mode_opt = up->add_option("--mode", mode, "Guided form")->check(CLI::IsMember({"decomposed", "full3d"}));
  auto* method_opt =
      up->add_option("--method", method, "Fixed-weight baseline")->check(CLI::IsMember({"nearest", "trilinear", "deconv_bilinear"}));
  mode_opt->excludes(method_opt);
  up_flags.attach(up);
  up->add_option("--out", up_out, "Output volume (CVT1)")->required();

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of a backward pass");
  std::string target;
  std::uint64_t gc_seed = 0;
  int gc_scale = 2;
  gc->add_option("--target", target, "Operator under test")
      ->required()
      ->check(CLI::IsMember({"guidance", "cais", "full3d", "soft_argmin", "loss", "end_to_end"}));
  gc->add_option("--seed", gc_seed, "Instance seed")->capture_default_str();
  gc->add_option("--scale", gc_scale, "Scale ratio s")->check(CLI::IsMember({2, 4, 8}))->capture_default_str();

  auto* bench = app.add_subcommand("bench", "FLOP counts and wall time, full3d vs decomposed");
  std::string bench_size = "8x8x4";
  int repeat = 3;
  std::uint64_t bench_seed = 0;
  aggregation_flags bench_flags;
  bench->add_option("--size", bench_size, "Coarse volume HxWxD")->capture_default_str();
  bench->add_option("--repeat", repeat, "Timed repetitions")->capture_default_str();
  bench->add_option("--seed", bench_seed, "Input seed")->capture_default_str();
  bench_flags.attach(bench);

  auto* train = app.add_subcommand("train-toy", "Train guidance on synthetic scenes");
  int iters = 500, batch = 4, train_dmax = 8;
  std::uint64_t train_seed = 0;
  bool ablate_stereo = false, ablate_encoding = false;
  std::string train_size = "32x32";
  aggregation_flags train_flags;
  fs::path train_out;
  train->add_option("--iters", iters, "Optimizer steps")->capture_default_str();
  train->add_option("--seed", train_seed, "Run seed")->capture_default_str();
  auto* as = train->add_flag("--ablate-stereo", ablate_stereo, "Reuse left guidance for the right view");
  auto* ae = train->add_flag("--ablate-encoding", ablate_encoding, "Plain concatenation without location maps");
  as->excludes(ae);
  train->add_option("--size", train_size, "Scene size HxW")->capture_default_str();
  train->add_option("--dmax", train_dmax, "Disparity bound (exclusive)")->capture_default_str();
  train->add_option("--batch", batch, "Scenes per step")->capture_default_str();
  train_flags.attach(train);
  train->add_option("--out", train_out, "Parameter bundle directory")->required();

  auto* ev = app.add_subcommand("eval", "EPE and bad-delta ratios of a disparity map");
  std::string pred, gt, mask;
  ev->add_option("--pred", pred, "Predicted disparity (PFM)")->required();
  ev->add_option("--gt", gt, "Ground-truth disparity (PFM)")->required();
  ev->add_option("--mask", mask, "Evaluation mask (CVT1, nonzero = counted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_usage;
  }

  try {
    set_num_threads(threads);
    if (*gen) return cmd_gen(seed, size, dmax, rects, out);
    if (*up) {
      if (mode.empty() && method.empty()) throw usage_error("upsample needs --mode or --method");
      return cmd_upsample(cv, gl, gr, up_flags, mode, method, up_out);
    }
    if (*gc) return cmd_gradcheck(target, gc_seed, gc_scale);
    if (*bench) return cmd_bench(bench_size, bench_flags, repeat, bench_seed);
    if (*train) return cmd_train(iters, train_seed, ablate_stereo, ablate_encoding, train_flags, train_size, train_dmax, batch, train_out);
    if (*ev) return cmd_eval(pred, gt, mask);
  } catch (const numeric_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_numeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_usage;
  }
  return exit_usage;
}
