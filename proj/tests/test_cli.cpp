#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sys/wait.h>

#include "cais/tensor_io.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;

namespace {

struct run_result {
  int code = -1;
  std::string out;
};

run_result run(const std::string& args) {
  const std::string cmd = std::string(CAIS_CLI_PATH) + " " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  run_result r;
  char buf[4096];
  std::size_t n = 0;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "cais_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string value_of(const std::string& text, const std::string& key) {
  const auto at = text.find(key + " = ");
  if (at == std::string::npos) return {};
  const auto start = at + key.size() + 3;
  return text.substr(start, text.find('\n', start) - start);
}

}  // namespace

TEST_CASE("help output matches the golden file") {
  const auto r = run("--help-all");
  CHECK(r.code == 0);
  CHECK(r.out == slurp(fs::path(CAIS_GOLDEN_DIR) / "help.txt"));
}

TEST_CASE("usage errors exit with 2") {
  CHECK(run("").code == 2);
  CHECK(run("frobnicate").code == 2);
  CHECK(run("gradcheck --target cais --bogus 1").code == 2);
  CHECK(run("gradcheck --target nope").code == 2);
  CHECK(run("upsample --cv a --mode full3d --method nearest --out b").code == 2);
  CHECK(run("train-toy --ablate-stereo --ablate-encoding --out x").code == 2);
  CHECK(run("bench --size 4x4xa").code == 2);
  CHECK(run("eval --pred missing.pfm --gt missing.pfm").code == 2);
}

TEST_CASE("gen-synthetic then eval against itself") {
  const auto dir = scratch("gen");
  REQUIRE(run("gen-synthetic --seed 3 --size 16x24 --dmax 6 --out " + dir.string()).code == 0);
  for (const char* f : {"left.cvt1", "right.cvt1", "gt.pfm", "mask.cvt1"}) CHECK(fs::exists(dir / f));
  const auto gt = cais::read_pfm(dir / "gt.pfm");
  CHECK(gt.shape() == cais::shape_t{16, 24});
  const auto r = run("eval --pred " + (dir / "gt.pfm").string() + " --gt " + (dir / "gt.pfm").string() + " --mask " +
                     (dir / "mask.cvt1").string());
  CHECK(r.code == 0);
  CHECK(r.out.find("epe = 0.000000\n") != std::string::npos);
  CHECK(value_of(r.out, "bad_1") == "0.000000");
  const auto again = scratch("gen2");
  REQUIRE(run("gen-synthetic --seed 3 --size 16x24 --dmax 6 --out " + again.string()).code == 0);
  CHECK(slurp(dir / "left.cvt1") == slurp(again / "left.cvt1"));
}

TEST_CASE("decomposed and full3d agree byte for byte on one-hot guidance") {
  const auto dir = scratch("upsample");
  std::mt19937_64 rng(4);
  cais::write_tensor(dir / "cv.cvt1", oracle::random_tensor(rng, {3, 4, 3}, 0.0, 5.0));
  cais::write_tensor(dir / "g.cvt1", oracle::one_hot_center(9, 6, 8));
  const std::string common = "upsample --cv " + (dir / "cv.cvt1").string() + " --guidance-left " + (dir / "g.cvt1").string() +
                             " --guidance-right " + (dir / "g.cvt1").string() + " --scale 2";
  REQUIRE(run(common + " --mode decomposed --out " + (dir / "a.cvt1").string()).code == 0);
  REQUIRE(run(common + " --mode full3d --out " + (dir / "b.cvt1").string()).code == 0);
  REQUIRE(run("upsample --cv " + (dir / "cv.cvt1").string() + " --method nearest --out " + (dir / "c.cvt1").string()).code == 0);
  const auto a = slurp(dir / "a.cvt1");
  CHECK(a.size() == 8 + 4 * 3 + 4 * 6 * 8 * 6);
  CHECK(a == slurp(dir / "b.cvt1"));
  CHECK(a == slurp(dir / "c.cvt1"));
  CHECK(run(common + " --mode decomposed --scale 4 --out " + (dir / "d.cvt1").string()).code == 2);
  CHECK(run("upsample --cv " + (dir / "cv.cvt1").string() + " --mode full3d --out " + (dir / "e.cvt1").string()).code == 2);
}

TEST_CASE("bench reports the FLOP ratio") {
  const auto r = run("bench --size 8x8x4 --scale 2 --repeat 1");
  CHECK(r.code == 0);
  CHECK(value_of(r.out, "full3d.total") == "165888");
  CHECK(value_of(r.out, "decomposed.total") == "51520");
  CHECK(value_of(r.out, "runtime_matches_analytic") == "true");
  CHECK(std::stod(value_of(r.out, "flop_ratio")) > 2.5);
}

TEST_CASE("gradcheck subcommand") {
  const auto r = run("gradcheck --target cais --seed 1");
  CHECK(r.code == 0);
  CHECK(std::stod(value_of(r.out, "max_rel_error")) < 1e-5);
  CHECK(value_of(r.out, "status") == "pass");
}

TEST_CASE("train-toy writes a parameter bundle and report") {
  const auto dir = scratch("train");
  const auto r = run("--threads 1 train-toy --iters 3 --seed 2 --size 16x16 --dmax 4 --out " + dir.string());
  CHECK(r.code == 0);
  CHECK(fs::exists(dir / "layer1_weight.cvt1"));
  CHECK(fs::exists(dir / "report.txt"));
  CHECK(value_of(slurp(dir / "report.txt"), "iterations") == "3");
  const auto again = scratch("train2");
  REQUIRE(run("--threads 1 train-toy --iters 3 --seed 2 --size 16x16 --dmax 4 --out " + again.string()).code == 0);
  CHECK(slurp(dir / "report.txt") == slurp(again / "report.txt"));
  CHECK(slurp(dir / "layer1_weight.cvt1") == slurp(again / "layer1_weight.cvt1"));
}
