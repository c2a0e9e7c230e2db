#include <doctest.h>

#include <limits>
#include <random>
#include <sstream>

#include "cais/aggregate.hpp"
#include "cais/flops.hpp"
#include "cais/guidance.hpp"
#include "support/oracles.hpp"

using namespace cais;

namespace {

aggregation_config cfg_for(int s) {
  aggregation_config c;
  c.scale = s;
  return c;
}

std::uint64_t total(std::size_t h, std::size_t w, std::size_t d, const aggregation_config& cfg, flop_mode m) {
  return flops_analytic(h, w, d, cfg, m).totals().total();
}

flop_report run_counted(std::size_t h, std::size_t w, std::size_t d, const aggregation_config& cfg, flop_mode m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto us = static_cast<std::size_t>(cfg.scale);
  const auto cost = oracle::random_tensor(rng, {h, w, d});
  const auto k = static_cast<std::size_t>(cfg.directions());
  const auto gl = oracle::random_guidance(rng, k, h * us, w * us);
  const auto gr = oracle::random_guidance(rng, k, h * us, w * us);
  flop_counter counter;
  switch (m) {
    case flop_mode::full3d: full3d_upsample(cost, gl, gr, cfg, &counter); break;
    case flop_mode::decomposed: cais_upsample(cost, gl, gr, cfg, &counter); break;
    case flop_mode::trilinear: upsample_baseline(cost, cfg.scale, upsample_method::trilinear, &counter); break;
    case flop_mode::deconv_bilinear: upsample_baseline(cost, cfg.scale, upsample_method::deconv_bilinear, &counter); break;
    case flop_mode::nearest: upsample_baseline(cost, cfg.scale, upsample_method::nearest, &counter); break;
  }
  return flops_runtime(counter);
}

}  // namespace

TEST_CASE("worked example at 8x8x4, s=2") {
  const auto full = flops_analytic(8, 8, 4, cfg_for(2), flop_mode::full3d);
  CHECK(full.totals().total() == 165888);
  const auto dec = flops_analytic(8, 8, 4, cfg_for(2), flop_mode::decomposed);
  REQUIRE(dec.stage("spatial") != nullptr);
  CHECK(dec.stage("spatial")->total() == 36864);
  CHECK(dec.totals().total() == 51520);
  CHECK(dec.totals().total() < 60000);
  CHECK(static_cast<double>(full.totals().total()) / static_cast<double>(dec.totals().total()) > 2.5);
}

TEST_CASE("totals are the sum of the stages") {
  const auto rep = flops_analytic(5, 7, 3, cfg_for(4), flop_mode::decomposed);
  flop_counts sum;
  for (const auto& [name, c] : rep.stages) sum += c;
  CHECK(sum == rep.totals());
  CHECK(rep.stage("missing") == nullptr);
}

TEST_CASE("decomposed is cheaper than full 3D at windows 3") {
  for (int s : {2, 4, 8}) {
    for (std::size_t h : {2, 5, 16}) {
      for (std::size_t d : {2, 3, 12}) {
        CHECK(total(h, h + 1, d, cfg_for(s), flop_mode::decomposed) < total(h, h + 1, d, cfg_for(s), flop_mode::full3d));
      }
    }
  }
  const auto ratio = [](int s) {
    return static_cast<double>(total(16, 16, 8, cfg_for(s), flop_mode::full3d)) /
           static_cast<double>(total(16, 16, 8, cfg_for(s), flop_mode::decomposed));
  };
  CHECK(ratio(2) >= 2.5);
  CHECK(ratio(4) >= 3.5);
  CHECK(ratio(8) > ratio(4));
}

TEST_CASE("single-tap windows") {
  // With w_s = w_d = 1 both forms keep two multiplies and one add per fine
  // output; the decomposed form adds the block reductions on top.
  for (int s : {2, 4, 8}) {
    auto cfg = cfg_for(s);
    cfg.spatial_window = 1;
    cfg.disparity_window = 1;
    const std::uint64_t h = 3, w = 4, d = 5, us = static_cast<std::uint64_t>(s);
    const std::uint64_t cells = h * w, mid = cells * d * us, fine = mid * us * us;
    CHECK(total(h, w, d, cfg, flop_mode::full3d) == 3 * fine);
    CHECK(total(h, w, d, cfg, flop_mode::decomposed) == 3 * fine + 6 * mid + cells * us * us + cells);
  }
}

TEST_CASE("runtime counters agree with the closed forms") {
  std::vector<aggregation_config> variants(5, cfg_for(2));
  variants[1].scale = 4;
  variants[2].reduce = block_reduce::sum;
  variants[2].stage1_renormalize = false;
  variants[3].left_center_scale = false;
  variants[3].border_renormalize_spatial = true;
  variants[4].spatial_window = 5;
  variants[4].disparity_window = 1;
  for (const auto& cfg : variants) {
    for (auto m : {flop_mode::full3d, flop_mode::decomposed, flop_mode::trilinear, flop_mode::deconv_bilinear, flop_mode::nearest}) {
      CAPTURE(to_string(m));
      CAPTURE(cfg.scale);
      const auto rt = run_counted(3, 4, 3, cfg, m, 17);
      const auto an = flops_analytic(3, 4, 3, cfg, m);
      REQUIRE(rt.stages.size() == an.stages.size());
      for (std::size_t i = 0; i < an.stages.size(); ++i) {
        CHECK(rt.stages[i].first == an.stages[i].first);
        CHECK(rt.stages[i].second == an.stages[i].second);
      }
    }
  }
  CHECK(flops_analytic(4, 4, 4, cfg_for(2), flop_mode::nearest).totals().total() == 0);
}

TEST_CASE("guidance counter agrees with its closed form") {
  for (auto enc : {guidance_encoding::explicit_shift, guidance_encoding::plain_concat}) {
    std::mt19937_64 rng(3);
    const auto fine = oracle::random_tensor(rng, {4, 6, 8});
    const auto coarse = oracle::random_tensor(rng, {4, 3, 4});
    flop_counter counter;
    guidance_forward(init_guidance_params(4, 8, 1, enc), fine, coarse, 2, 3, &counter);
    const auto rt = flops_runtime(counter).totals();
    const auto an = flops_guidance(6, 8, 4, 8, 3, enc).totals();
    CHECK(rt == an);
    CHECK(an.exps == 6 * 8 * 9);
  }
}

TEST_CASE("counting never changes outputs") {
  std::mt19937_64 rng(8);
  const auto cost = oracle::random_tensor(rng, {3, 3, 2});
  const auto gl = oracle::random_guidance(rng, 9, 6, 6);
  const auto gr = oracle::random_guidance(rng, 9, 6, 6);
  flop_counter counter;
  CHECK(cais_upsample(cost, gl, gr, cfg_for(2), &counter) == cais_upsample(cost, gl, gr, cfg_for(2)));
  CHECK(full3d_upsample(cost, gl, gr, cfg_for(2), &counter) == full3d_upsample(cost, gl, gr, cfg_for(2)));
}

TEST_CASE("overflow and report format") {
  flop_counts big;
  big.adds = std::numeric_limits<std::uint64_t>::max();
  flop_counts one;
  one.adds = 1;
  CHECK_THROWS_AS(big += one, numeric_error);
  flop_counts near_max;
  near_max.adds = std::numeric_limits<std::uint64_t>::max() - 1;
  near_max.muls = 5;
  CHECK_THROWS_AS(near_max.total(), numeric_error);

  std::ostringstream os;
  flops_analytic(8, 8, 4, cfg_for(2), flop_mode::decomposed).write(os, "decomposed");
  const auto text = os.str();
  CHECK(text.find("decomposed.mode = decomposed\n") != std::string::npos);
  CHECK(text.find("decomposed.dims = 8x8x4\n") != std::string::npos);
  CHECK(text.find("decomposed.spatial.muls = 18432\n") != std::string::npos);
  CHECK(text.find("decomposed.total = 51520\n") != std::string::npos);
  CHECK_THROWS_AS(flops_analytic(0, 8, 4, cfg_for(2), flop_mode::full3d), config_error);
  CHECK_THROWS_AS(parse_flop_mode("fft"), config_error);
}
