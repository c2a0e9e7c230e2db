#include <doctest.h>

#include <cmath>
#include <random>

#include "cais/aggregate.hpp"
#include "cais/gradcheck.hpp"
#include "cais/parallel.hpp"
#include "support/oracles.hpp"

using namespace cais;

namespace {

aggregation_config cfg_for(int s) {
  aggregation_config c;
  c.scale = s;
  return c;
}

tensor uniform_guidance(std::size_t h, std::size_t w) { return tensor({9, h, w}, 1.0f / 9.0f); }

struct instance {
  tensor cost, gl, gr;
};

instance random_instance(std::uint64_t seed, std::size_t h, std::size_t w, std::size_t d, int s) {
  std::mt19937_64 rng(seed);
  const auto us = static_cast<std::size_t>(s);
  instance in;
  in.cost = oracle::random_tensor(rng, {h, w, d}, -2.0, 2.0);
  in.gl = oracle::random_guidance(rng, 9, h * us, w * us);
  in.gr = oracle::random_guidance(rng, 9, h * us, w * us);
  return in;
}

double max_abs_diff(const tensor& a, const tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

double dot(const tensor& a, const tensor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

}  // namespace

TEST_CASE("stage 1 worked examples") {
  tensor cost({3, 3, 2});
  for (std::size_t y = 0; y < 3; ++y) {
    for (std::size_t x = 0; x < 3; ++x) {
      cost(y, x, 0) = 3.0f;
      cost(y, x, 1) = 7.0f;
    }
  }
  const auto one_hot = oracle::one_hot_center(9, 6, 6);
  SUBCASE("one-hot centre") {
    const auto out = disparity_upsample(cost, one_hot, one_hot, cfg_for(2));
    REQUIRE(out.shape() == shape_t{3, 3, 4});
    for (std::size_t y = 0; y < 3; ++y) {
      for (std::size_t x = 0; x < 3; ++x) {
        CHECK(out(y, x, 0) == 3.0f);
        CHECK(out(y, x, 1) == 3.0f);
        CHECK(out(y, x, 2) == 7.0f);
        CHECK(out(y, x, 3) == 7.0f);
      }
    }
  }
  SUBCASE("uniform guidance averages the valid candidates") {
    const auto g = uniform_guidance(6, 6);
    auto c = cfg_for(2);
    c.left_center_scale = false;
    CHECK(disparity_upsample(cost, g, g, c)(1, 1, 0) == doctest::Approx(5.0).epsilon(1e-6));
    c.left_center_scale = true;
    CHECK(disparity_upsample(cost, g, g, c)(1, 1, 0) == doctest::Approx(5.0 / 9.0).epsilon(1e-6));
  }
  SUBCASE("zero right guidance falls back to uniform weights") {
    auto c = cfg_for(2);
    c.left_center_scale = false;
    const auto out = disparity_upsample(cost, tensor({9, 6, 6}), one_hot, c);
    CHECK(out(0, 0, 0) == doctest::Approx(5.0).epsilon(1e-6));
    CHECK(out(0, 0, 2) == doctest::Approx(5.0).epsilon(1e-6));
  }
  SUBCASE("renormalization off with zero right guidance gives zero") {
    auto c = cfg_for(2);
    c.stage1_renormalize = false;
    const auto out = disparity_upsample(cost, tensor({9, 6, 6}), one_hot, c);
    for (float v : out.data()) CHECK(v == 0.0f);
  }
  SUBCASE("sum reduction scales one-hot output by s^2 per block factor") {
    auto c = cfg_for(2);
    c.reduce = block_reduce::sum;
    c.stage1_renormalize = false;
    const auto out = disparity_upsample(cost, one_hot, one_hot, c);
    CHECK(out(1, 1, 0) == 3.0f * 4.0f * 4.0f);
  }
}

TEST_CASE("stage 2 worked examples") {
  const float c = 2.5f;
  const tensor cv1({3, 3, 4}, c);
  const auto g = uniform_guidance(6, 6);
  auto cfg = cfg_for(2);
  const auto out = spatial_upsample(cv1, g, cfg);
  REQUIRE(out.shape() == shape_t{6, 6, 4});
  CHECK(out(2, 2, 1) == doctest::Approx(c).epsilon(1e-6));
  CHECK(out(0, 0, 1) == doctest::Approx(4.0 * c / 9.0).epsilon(1e-6));
  CHECK(out(0, 3, 1) == doctest::Approx(6.0 * c / 9.0).epsilon(1e-6));
  cfg.border_renormalize_spatial = true;
  const auto renorm = spatial_upsample(cv1, g, cfg);
  for (float v : renorm.data()) CHECK(v == doctest::Approx(c).epsilon(1e-6));
  const auto one_hot = spatial_upsample(cv1, oracle::one_hot_center(9, 6, 6), cfg_for(2));
  for (float v : one_hot.data()) CHECK(v == c);
}

TEST_CASE("full 3D uniform interior value") {
  const float c = 3.0f;
  const tensor cost({4, 4, 4}, c);
  const auto g = uniform_guidance(8, 8);
  const auto out = full3d_upsample(cost, g, g, cfg_for(2));
  // 21 of the 27 taps fall inside the right-guidance window.
  CHECK(out(3, 3, 3) == doctest::Approx(7.0 * c / 27.0).epsilon(1e-6));
  CHECK(out(4, 4, 4) == doctest::Approx(7.0 * c / 27.0).epsilon(1e-6));
}

TEST_CASE("one-hot centre guidance reduces every form to nearest upsampling") {
  for (int s : {2, 4, 8}) {
    const auto in = random_instance(static_cast<std::uint64_t>(s), 3, 2, 3, s);
    const auto us = static_cast<std::size_t>(s);
    const auto g = oracle::one_hot_center(9, 3 * us, 2 * us);
    const auto nearest = upsample_baseline(in.cost, s, upsample_method::nearest);
    CHECK(cais_upsample(in.cost, g, g, cfg_for(s)) == nearest);
    CHECK(full3d_upsample(in.cost, g, g, cfg_for(s)) == nearest);
    for (std::size_t y = 0; y < 3 * us; ++y) {
      for (std::size_t x = 0; x < 2 * us; ++x) {
        for (std::size_t d = 0; d < 3 * us; ++d) CHECK(nearest(y, x, d) == in.cost(y / us, x / us, d / us));
      }
    }
  }
}

TEST_CASE("operators match the scalar-loop oracles exactly") {
  std::vector<aggregation_config> variants(6, cfg_for(2));
  variants[1].reduce = block_reduce::sum;
  variants[2].stage1_renormalize = false;
  variants[3].left_center_scale = false;
  variants[4].border_renormalize_spatial = true;
  variants[5].scale = 4;
  for (std::size_t v = 0; v < variants.size(); ++v) {
    const auto& cfg = variants[v];
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const auto in = random_instance(100 + seed, 3, 3, 2, cfg.scale);
      CAPTURE(v);
      CAPTURE(seed);
      const auto stage1 = disparity_upsample(in.cost, in.gr, in.gl, cfg);
      CHECK(stage1 == oracle::disparity_upsample(in.cost, in.gr, in.gl, cfg));
      CHECK(spatial_upsample(stage1, in.gl, cfg) == oracle::spatial_upsample(stage1, in.gl, cfg));
      CHECK(cais_upsample(in.cost, in.gl, in.gr, cfg) == oracle::cais_upsample(in.cost, in.gl, in.gr, cfg));
      CHECK(full3d_upsample(in.cost, in.gl, in.gr, cfg) == oracle::full3d_upsample(in.cost, in.gl, in.gr, cfg));
    }
  }
}

TEST_CASE("linearity in the cost volume") {
  std::mt19937_64 rng(4);
  const auto in = random_instance(5, 3, 3, 2, 2);
  const auto b = oracle::random_tensor(rng, {3, 3, 2}, -2.0, 2.0);
  const float alpha = 0.7f, beta = -1.3f;
  tensor mix({3, 3, 2});
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * in.cost[i] + beta * b[i];
  auto combine = [&](const tensor& fa, const tensor& fb) {
    tensor out(fa.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * fa[i] + beta * fb[i];
    return out;
  };
  const auto cfg = cfg_for(2);
  CHECK(max_abs_diff(cais_upsample(mix, in.gl, in.gr, cfg),
                     combine(cais_upsample(in.cost, in.gl, in.gr, cfg), cais_upsample(b, in.gl, in.gr, cfg))) < 1e-5);
  CHECK(max_abs_diff(full3d_upsample(mix, in.gl, in.gr, cfg),
                     combine(full3d_upsample(in.cost, in.gl, in.gr, cfg), full3d_upsample(b, in.gl, in.gr, cfg))) < 1e-5);
  for (auto m : {upsample_method::nearest, upsample_method::trilinear, upsample_method::deconv_bilinear}) {
    CHECK(max_abs_diff(upsample_baseline(mix, 2, m), combine(upsample_baseline(in.cost, 2, m), upsample_baseline(b, 2, m))) < 1e-5);
  }
}

TEST_CASE("backward passes") {
  const auto in = random_instance(9, 3, 3, 2, 2);
  const auto cfg = cfg_for(2);
  SUBCASE("zero upstream") {
    const tensor zero({6, 6, 4});
    for (const auto& g : {cais_backward(in.cost, in.gl, in.gr, cfg, zero), full3d_backward(in.cost, in.gl, in.gr, cfg, zero)}) {
      for (float v : g.cost.data()) CHECK(v == 0.0f);
      for (float v : g.guidance_left.data()) CHECK(v == 0.0f);
      for (float v : g.guidance_right.data()) CHECK(v == 0.0f);
    }
  }
  SUBCASE("cost gradient is the transpose of the frozen operator") {
    std::mt19937_64 rng(2);
    const auto y = oracle::random_tensor(rng, {6, 6, 4}, -1.0, 1.0);
    const double lhs = dot(cais_upsample(in.cost, in.gl, in.gr, cfg), y);
    const double rhs = dot(in.cost, cais_backward(in.cost, in.gl, in.gr, cfg, y).cost);
    CHECK(std::abs(lhs - rhs) <= 1e-5 * std::max(std::abs(lhs), std::abs(rhs)));
  }
  SUBCASE("adjoint identity for every linear operator") {
    for (auto t : {adjoint_target::cais, adjoint_target::full3d, adjoint_target::nearest, adjoint_target::trilinear,
                   adjoint_target::deconv_bilinear}) {
      for (int s : {2, 4}) {
        CAPTURE(to_string(t));
        CHECK(adjoint_error(t, 3, s) < 1e-10);
      }
    }
  }
  SUBCASE("finite differences") {
    for (auto t : {gradcheck_target::cais, gradcheck_target::full3d}) {
      for (std::uint64_t seed = 0; seed < 3; ++seed) CHECK(gradcheck(t, seed, 2).max_rel_error < 1e-5);
      CHECK(gradcheck(t, 0, 2, true).max_rel_error == 0.0);
    }
    CHECK(gradcheck(gradcheck_target::cais, 1, 4).max_rel_error < 1e-5);
  }
  CHECK_THROWS_AS(cais_backward(in.cost, in.gl, in.gr, cfg, tensor({6, 6, 3})), shape_error);
}

TEST_CASE("spatial stage is convex with border renormalization") {
  std::mt19937_64 rng(31);
  const auto cv1 = oracle::random_tensor(rng, {3, 4, 2}, -5.0, 5.0);
  const auto g = oracle::random_guidance(rng, 9, 6, 8);
  auto cfg = cfg_for(2);
  cfg.border_renormalize_spatial = true;
  const auto out = spatial_upsample(cv1, g, cfg);
  for (int yf = 0; yf < 6; ++yf) {
    for (int xf = 0; xf < 8; ++xf) {
      for (std::size_t d = 0; d < 2; ++d) {
        float lo = 1e9f, hi = -1e9f;
        for (int y = yf / 2 - 1; y <= yf / 2 + 1; ++y) {
          for (int x = xf / 2 - 1; x <= xf / 2 + 1; ++x) {
            if (y < 0 || x < 0 || y >= 3 || x >= 4) continue;
            lo = std::min(lo, cv1(static_cast<std::size_t>(y), static_cast<std::size_t>(x), d));
            hi = std::max(hi, cv1(static_cast<std::size_t>(y), static_cast<std::size_t>(x), d));
          }
        }
        const float v = out(static_cast<std::size_t>(yf), static_cast<std::size_t>(xf), d);
        CHECK(v >= lo - 1e-5f);
        CHECK(v <= hi + 1e-5f);
      }
    }
  }
}

TEST_CASE("results do not depend on the thread count") {
  const auto in = random_instance(77, 4, 4, 3, 2);
  const auto cfg = cfg_for(2);
  std::mt19937_64 rng(1);
  const auto up = oracle::random_tensor(rng, {8, 8, 6});
  set_num_threads(1);
  const auto a = cais_upsample(in.cost, in.gl, in.gr, cfg);
  const auto fa = full3d_upsample(in.cost, in.gl, in.gr, cfg);
  const auto ga = cais_backward(in.cost, in.gl, in.gr, cfg, up);
  set_num_threads(3);
  const auto b = cais_upsample(in.cost, in.gl, in.gr, cfg);
  const auto fb = full3d_upsample(in.cost, in.gl, in.gr, cfg);
  const auto gb = cais_backward(in.cost, in.gl, in.gr, cfg, up);
  set_num_threads(0);
  CHECK(a == b);
  CHECK(fa == fb);
  CHECK(ga.cost == gb.cost);
  CHECK(ga.guidance_left == gb.guidance_left);
  CHECK(ga.guidance_right == gb.guidance_right);
}

TEST_CASE("two s=2 passes give the s=4 shape") {
  const auto in = random_instance(6, 2, 3, 2, 4);
  const auto once = cais_upsample(in.cost, in.gl, in.gr, cfg_for(4));
  std::mt19937_64 rng(6);
  const auto g2 = oracle::random_guidance(rng, 9, 4, 6);
  const auto mid = cais_upsample(in.cost, g2, g2, cfg_for(2));
  const auto g4 = oracle::random_guidance(rng, 9, 8, 12);
  const auto twice = cais_upsample(mid, g4, g4, cfg_for(2));
  CHECK(once.shape() == twice.shape());
  CHECK(once.shape() == shape_t{8, 12, 8});
}

TEST_CASE("fixed-weight baselines") {
  SUBCASE("nearest block copy") {
    tensor cost({1, 1, 2}, std::vector<float>{3, 7});
    const auto out = upsample_baseline(cost, 2, upsample_method::nearest);
    REQUIRE(out.shape() == shape_t{2, 2, 4});
    for (std::size_t y = 0; y < 2; ++y) {
      for (std::size_t x = 0; x < 2; ++x) {
        CHECK(out(y, x, 0) == 3.0f);
        CHECK(out(y, x, 1) == 3.0f);
        CHECK(out(y, x, 2) == 7.0f);
        CHECK(out(y, x, 3) == 7.0f);
      }
    }
  }
  SUBCASE("trilinear reproduces constants") {
    for (int s : {2, 4, 8}) {
      const auto out = upsample_baseline(tensor({3, 2, 3}, 1.75f), s, upsample_method::trilinear);
      for (float v : out.data()) {
        CHECK(v == doctest::Approx(1.75).epsilon(1e-6));
      }
    }
  }
  SUBCASE("trilinear ramp along disparity") {
    tensor ramp({2, 2, 4});
    for (std::size_t i = 0; i < ramp.size(); ++i) ramp[i] = static_cast<float>(i % 4);
    for (int s : {2, 4}) {
      const auto out = upsample_baseline(ramp, s, upsample_method::trilinear);
      for (std::size_t d = 0; d < out.extent(2); ++d) {
        const double src = (static_cast<double>(d) + 0.5) / s - 0.5;
        const double expected = std::clamp(src, 0.0, 3.0);
        CHECK(out(1, 2, d) == doctest::Approx(expected).epsilon(1e-6));
      }
    }
  }
  SUBCASE("bilinear kernels") {
    CHECK(bilinear_kernel(2) == std::vector<double>{0.25, 0.75, 0.75, 0.25});
    CHECK(bilinear_kernel(4).size() == 8);
    CHECK(bilinear_kernel(8).size() == 16);
    for (int s : {2, 4, 8}) {
      const auto k = bilinear_kernel(s);
      double sum = 0.0;
      for (double v : k) sum += v;
      CHECK(sum == doctest::Approx(s));
    }
  }
  SUBCASE("deconvolution keeps interior constants") {
    for (int s : {2, 4}) {
      const auto out = upsample_baseline(tensor({4, 4, 4}, 2.0f), s, upsample_method::deconv_bilinear);
      const auto us = static_cast<std::size_t>(s);
      for (std::size_t i = us; i < 3 * us; ++i) CHECK(out(i, i, i) == doctest::Approx(2.0).epsilon(1e-6));
    }
  }
  CHECK_THROWS_AS(upsample_baseline(tensor({2, 2, 2}), 3, upsample_method::nearest), config_error);
  CHECK_THROWS_AS(parse_upsample_method("bicubic"), config_error);
}

TEST_CASE("shape and config errors") {
  const auto in = random_instance(1, 2, 2, 2, 2);
  CHECK_THROWS_AS(cais_upsample(in.cost, tensor({9, 4, 5}), in.gr, cfg_for(2)), shape_error);
  CHECK_THROWS_AS(full3d_upsample(in.cost, in.gl, tensor({8, 4, 4}), cfg_for(2)), shape_error);
  CHECK_THROWS_AS(spatial_upsample(tensor({2, 2, 4}), tensor({9, 4, 3}), cfg_for(2)), shape_error);
  auto bad = cfg_for(2);
  bad.spatial_window = 2;
  CHECK_THROWS_AS(cais_upsample(in.cost, in.gl, in.gr, bad), config_error);
  CHECK_THROWS_AS(cais_upsample(in.cost, in.gl, in.gr, cfg_for(3)), config_error);
}
