#include <doctest.h>

#include <filesystem>
#include <random>

#include "cais/gradcheck.hpp"
#include "cais/guidance.hpp"
#include "cais/parallel.hpp"
#include "support/oracles.hpp"

using namespace cais;

namespace {

struct feature_pair {
  tensor fine, coarse;
};

feature_pair random_pair(std::uint64_t seed, std::size_t ch, std::size_t cw, int s) {
  std::mt19937_64 rng(seed);
  const auto us = static_cast<std::size_t>(s);
  return {oracle::random_tensor(rng, {4, ch * us, cw * us}, -1.0, 1.0), oracle::random_tensor(rng, {4, ch, cw}, -1.0, 1.0)};
}

std::vector<int> row(const tensor& m, std::size_t ch, std::size_t y, std::size_t n) {
  std::vector<int> out;
  for (std::size_t x = 0; x < n; ++x) out.push_back(static_cast<int>(m(ch, y, x)));
  return out;
}

std::vector<int> column(const tensor& m, std::size_t ch, std::size_t x, std::size_t n) {
  std::vector<int> out;
  for (std::size_t y = 0; y < n; ++y) out.push_back(static_cast<int>(m(ch, y, x)));
  return out;
}

}  // namespace

TEST_CASE("nearest_expand copies blocks") {
  tensor c({1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  const auto f = nearest_expand(c, 2);
  REQUIRE(f.shape() == shape_t{1, 4, 4});
  CHECK(row(f, 0, 0, 4) == std::vector<int>{1, 1, 2, 2});
  CHECK(row(f, 0, 3, 4) == std::vector<int>{3, 3, 4, 4});
  const auto one = nearest_expand(tensor({1, 1, 1}, 7.0f), 4);
  for (float v : one.data()) CHECK(v == 7.0f);
  CHECK_THROWS_AS(nearest_expand(c, 3), config_error);
}

TEST_CASE("location map block patterns") {
  SUBCASE("s=4 centre direction") {
    const auto m = make_location_map(4, {0, 0}, 3, 8, 8);
    for (std::size_t y = 0; y < 8; ++y) CHECK(row(m, 0, y, 4) == std::vector<int>{-2, -1, 1, 2});
    for (std::size_t x = 0; x < 8; ++x) CHECK(column(m, 1, x, 4) == std::vector<int>{2, 1, -1, -2});
    CHECK(row(m, 0, 5, 8) == std::vector<int>{-2, -1, 1, 2, -2, -1, 1, 2});
  }
  SUBCASE("s=2 centre direction") {
    const auto m = make_location_map(2, {0, 0}, 3, 4, 4);
    CHECK(row(m, 0, 0, 2) == std::vector<int>{-1, 1});
    CHECK(column(m, 1, 0, 2) == std::vector<int>{1, -1});
  }
  SUBCASE("s=4 direction (1, 0)") {
    const auto m = make_location_map(4, {1, 0}, 3, 4, 4);
    CHECK(row(m, 0, 0, 4) == std::vector<int>{-6, -5, -3, -2});
    CHECK(column(m, 1, 0, 4) == std::vector<int>{2, 1, -1, -2});
  }
  SUBCASE("vertical offset adds s * dir_y") {
    const auto m = make_location_map(2, {0, -1}, 3, 2, 2);
    CHECK(column(m, 1, 0, 2) == std::vector<int>{-1, -3});
  }
  SUBCASE("centre pattern never hits zero and is antisymmetric") {
    for (int s : {2, 4, 8}) {
      const auto m = make_location_map(s, {0, 0}, 3, static_cast<std::size_t>(s), static_cast<std::size_t>(s));
      for (int o = 0; o < s; ++o) {
        const int a = static_cast<int>(m(0, 0, static_cast<std::size_t>(o)));
        const int b = static_cast<int>(m(0, 0, static_cast<std::size_t>(s - 1 - o)));
        CHECK(a != 0);
        CHECK(a == -b);
      }
    }
  }
  CHECK_THROWS_AS(make_location_map(2, {2, 0}, 3, 4, 4), range_error);
  CHECK_THROWS_AS(make_location_map(2, {0, -2}, 3, 4, 4), range_error);
}

TEST_CASE("closed-form coarse lookup equals pad-and-shift of the expanded map") {
  for (int s : {2, 4}) {
    const auto fp = random_pair(11, 3, 4, s);
    const auto expanded = nearest_expand(fp.coarse, s);
    const long fh = static_cast<long>(fp.fine.extent(1)), fw = static_cast<long>(fp.fine.extent(2));
    for (int k = 0; k < 9; ++k) {
      const auto dir = direction_at(k, 3);
      const auto in = guidance_input(fp.fine, fp.coarse, dir, s, 3);
      for (long y = 0; y < fh; ++y) {
        for (long x = 0; x < fw; ++x) {
          const long sy = y + s * dir.dy, sx = x + s * dir.dx;
          const bool inside = sy >= 0 && sx >= 0 && sy < fh && sx < fw;
          for (std::size_t c = 0; c < 4; ++c) {
            const float shifted = inside ? expanded(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)) : 0.0f;
            CHECK(in(4 + c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) == shifted);
          }
        }
      }
    }
  }
}

TEST_CASE("logit map edge cases") {
  const auto fp = random_pair(5, 2, 2, 2);
  auto p = guidance_params<float>::zeros(4, 8);
  const auto zero = guidance_logit_map(p, fp.fine, fp.coarse, {1, 1}, 2, 3);
  for (float v : zero.data()) CHECK(v == 0.0f);
  p.b3[0] = 2.5f;
  const auto bias = guidance_logit_map(p, fp.fine, fp.coarse, {-1, 0}, 2, 3);
  for (float v : bias.data()) CHECK(v == 2.5f);
  CHECK_THROWS_AS(guidance_logit_map(p, tensor({3, 4, 4}), tensor({3, 2, 2}), {0, 0}, 2, 3), shape_error);
}

TEST_CASE("logit map matches a scalar MLP evaluation") {
  const auto fp = random_pair(7, 2, 2, 2);
  const auto p = init_guidance_params(4, 8, 99);
  const auto logits = guidance_logit_map(p, fp.fine, fp.coarse, {1, 1}, 2, 3);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) {
      const auto z = oracle::guidance_input(fp.fine, fp.coarse, 2, y, x, 1, 1);
      CHECK(logits(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) == oracle::mlp(p, z));
    }
  }
  // Bottom-right pixels look past the coarse grid and see a zero vector.
  const auto z = oracle::guidance_input(fp.fine, fp.coarse, 2, 3, 3, 1, 1);
  for (std::size_t c = 4; c < 8; ++c) CHECK(z[c] == 0.0f);
}

TEST_CASE("guidance field normalization and invariances") {
  const auto fp = random_pair(3, 3, 3, 2);
  SUBCASE("zero params give 1/9") {
    const auto g = guidance_forward(guidance_params<float>::zeros(4, 8), fp.fine, fp.coarse, 2, 3);
    for (float v : g.data()) CHECK(v == doctest::Approx(1.0 / 9.0).epsilon(1e-7));
  }
  SUBCASE("random params sum to one and stay nonnegative") {
    const auto g = guidance_forward(init_guidance_params(4, 16, 1), fp.fine, fp.coarse, 2, 3);
    const std::size_t plane = 36;
    for (std::size_t i = 0; i < plane; ++i) {
      double sum = 0.0;
      for (std::size_t k = 0; k < 9; ++k) {
        CHECK(g[k * plane + i] >= 0.0f);
        sum += g[k * plane + i];
      }
      CHECK(std::abs(sum - 1.0) <= 1e-6);
    }
  }
  SUBCASE("layer-3 bias shift leaves the field unchanged") {
    auto p = init_guidance_params(4, 16, 2);
    const auto a = guidance_forward(p, fp.fine, fp.coarse, 2, 3);
    p.b3[0] += 3.0f;
    const auto b = guidance_forward(p, fp.fine, fp.coarse, 2, 3);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-6);
  }
}

TEST_CASE("directions are tied to their location maps") {
  const auto fp = random_pair(21, 2, 2, 2);
  const auto p = init_guidance_params(4, 16, 4);
  const auto logits = guidance_logit_map(p, fp.fine, fp.coarse, {-1, 0}, 2, 3);
  const auto other = guidance_input(fp.fine, fp.coarse, {1, 0}, 2, 3);
  bool changed = false;
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) {
      auto z = oracle::guidance_input(fp.fine, fp.coarse, 2, y, x, -1, 0);
      z[8] = other(8, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
      z[9] = other(9, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
      changed |= oracle::mlp(p, z) != logits(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
    }
  }
  CHECK(changed);
}

TEST_CASE("guidance backward properties") {
  const auto fp = random_pair(8, 2, 2, 2);
  const auto p = init_guidance_params(4, 8, 6);
  SUBCASE("zero upstream") {
    const auto g = guidance_backward(p, fp.fine, fp.coarse, 2, 3, tensor({9, 4, 4}));
    for (const auto* t : g.params.tensors()) {
      for (float v : t->data()) CHECK(v == 0.0f);
    }
    for (float v : g.fine.data()) CHECK(v == 0.0f);
    for (float v : g.coarse.data()) CHECK(v == 0.0f);
  }
  SUBCASE("upstream constant across directions") {
    std::mt19937_64 rng(1);
    const auto per_pixel = oracle::random_tensor(rng, {4, 4}, -2.0, 2.0);
    tensor up({9, 4, 4});
    for (std::size_t k = 0; k < 9; ++k) {
      for (std::size_t i = 0; i < 16; ++i) up[k * 16 + i] = per_pixel[i];
    }
    const auto g = guidance_backward(p, fp.fine, fp.coarse, 2, 3, up);
    for (const auto* t : g.params.tensors()) {
      for (float v : t->data()) CHECK(std::abs(v) <= 1e-6);
    }
  }
  CHECK_THROWS_AS(guidance_backward(p, fp.fine, fp.coarse, 2, 3, tensor({8, 4, 4})), shape_error);
}

TEST_CASE("guidance backward matches a scalar per-pixel implementation") {
  for (int s : {2, 4}) {
    CAPTURE(s);
    const auto fp = random_pair(20 + static_cast<std::uint64_t>(s), 3, 2, s);
    const auto p = init_guidance_params(4, 8, 5);
    std::mt19937_64 rng(3);
    const auto up = oracle::random_tensor(rng, {9, fp.fine.extent(1), fp.fine.extent(2)}, -1.0, 1.0);
    const auto g = guidance_backward(p, fp.fine, fp.coarse, s, 3, up);
    const auto [ref, dfine] = oracle::guidance_grad(p, fp.fine, fp.coarse, s, 3, up);
    const auto got = g.params.tensors();
    const auto want = ref.tensors();
    for (std::size_t t = 0; t < got.size(); ++t) {
      for (std::size_t i = 0; i < got[t]->size(); ++i) CHECK((*got[t])[i] == (*want[t])[i]);
    }
    for (std::size_t i = 0; i < dfine.size(); ++i) CHECK(g.fine[i] == dfine[i]);
  }
}

TEST_CASE("guidance finite-difference check") {
  for (int s : {2, 4}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto r = gradcheck(gradcheck_target::guidance, seed, s);
      CAPTURE(s);
      CAPTURE(seed);
      CHECK(r.max_rel_error < 1e-5);
      CHECK(r.min_relu_margin > 1e-4);
    }
  }
  // Large location-map values at s = 8 amplify weight perturbations; the
  // instance must keep every pre-activation clear of the step.
  const auto r8 = gradcheck(gradcheck_target::guidance, 4, 8);
  CHECK(r8.max_rel_error < 1e-5);
  CHECK(r8.min_relu_margin > 1e-4);
  CHECK(gradcheck(gradcheck_target::guidance, 1, 2, true).max_rel_error == 0.0);
}

TEST_CASE("plain concatenation encoding") {
  const auto fp = random_pair(9, 2, 2, 2);
  const auto p = init_guidance_params(4, 8, 3, guidance_encoding::plain_concat);
  CHECK(p.input_width() == 8);
  CHECK(p.outputs() == 9);
  const auto g = guidance_forward(p, fp.fine, fp.coarse, 2, 3);
  for (std::size_t i = 0; i < 16; ++i) {
    double sum = 0.0;
    for (std::size_t k = 0; k < 9; ++k) sum += g[k * 16 + i];
    CHECK(std::abs(sum - 1.0) <= 1e-6);
  }
  CHECK_THROWS_AS(guidance_logit_map(p, fp.fine, fp.coarse, {0, 0}, 2, 3), config_error);
}

TEST_CASE("parameter bundle round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "cais_tests" / "params";
  for (auto enc : {guidance_encoding::explicit_shift, guidance_encoding::plain_concat}) {
    const auto p = init_guidance_params(4, 8, 12, enc);
    save_guidance_params(dir, p);
    CHECK(std::filesystem::exists(dir / "layer1_weight.cvt1"));
    CHECK(std::filesystem::exists(dir / "layer3_bias.cvt1"));
    const auto q = load_guidance_params(dir);
    CHECK(q.encoding == enc);
    const auto a = p.tensors();
    const auto b = q.tensors();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i] == *b[i]);
  }
}

TEST_CASE("guidance output does not depend on the thread count") {
  const auto fp = random_pair(13, 4, 4, 2);
  const auto p = init_guidance_params(4, 16, 5);
  set_num_threads(1);
  const auto a = guidance_forward(p, fp.fine, fp.coarse, 2, 3);
  const auto ga = guidance_backward(p, fp.fine, fp.coarse, 2, 3, a);
  set_num_threads(4);
  const auto b = guidance_forward(p, fp.fine, fp.coarse, 2, 3);
  const auto gb = guidance_backward(p, fp.fine, fp.coarse, 2, 3, b);
  set_num_threads(0);
  CHECK(a == b);
  CHECK(ga.fine == gb.fine);
  CHECK(ga.params.w1 == gb.params.w1);
}
