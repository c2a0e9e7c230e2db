#include "cais/flops.hpp"

#include <ostream>

#include "cais/error.hpp"

namespace cais {
namespace {

std::uint64_t checked_add(std::uint64_t a, std::uint64_t b) {
  std::uint64_t out = 0;
  if (__builtin_add_overflow(a, b, &out)) throw numeric_error("FLOP counter overflow (64-bit)");
  return out;
}

}  // namespace

std::uint64_t flop_counts::total() const { return checked_add(checked_add(adds, muls), divs); }

flop_counts& flop_counts::operator+=(const flop_counts& other) {
  adds = checked_add(adds, other.adds);
  muls = checked_add(muls, other.muls);
  divs = checked_add(divs, other.divs);
  exps = checked_add(exps, other.exps);
  return *this;
}

flop_counts flop_report::totals() const {
  flop_counts sum;
  for (const auto& [name, counts] : stages) sum += counts;
  return sum;
}

const flop_counts* flop_report::stage(std::string_view name) const {
  for (const auto& [n, counts] : stages) {
    if (n == name) return &counts;
  }
  return nullptr;
}

void flop_report::write(std::ostream& os, std::string_view prefix) const {
  const std::string p = prefix.empty() ? std::string() : std::string(prefix) + ".";
  os << p << "mode = " << mode << "\n";
  if (height) {
    os << p << "dims = " << height << "x" << width << "x" << disparities << "\n";
    os << p << "scale = " << cfg.scale << "\n";
    os << p << "spatial_window = " << cfg.spatial_window << "\n";
    os << p << "disparity_window = " << cfg.disparity_window << "\n";
  }
  for (const auto& [name, c] : stages) {
    os << p << name << ".adds = " << c.adds << "\n";
    os << p << name << ".muls = " << c.muls << "\n";
    os << p << name << ".divs = " << c.divs << "\n";
    os << p << name << ".exps = " << c.exps << "\n";
  }
  const auto t = totals();
  os << p << "total.adds = " << t.adds << "\n";
  os << p << "total.muls = " << t.muls << "\n";
  os << p << "total.divs = " << t.divs << "\n";
  os << p << "total.exps = " << t.exps << "\n";
  os << p << "total = " << t.total() << "\n";
}

void flop_counter::record(std::string_view stage, const flop_counts& counts) {
  for (auto& [name, c] : stages_) {
    if (name == stage) {
      c += counts;
      return;
    }
  }
  stages_.emplace_back(std::string(stage), counts);
}

void record_tallies(flop_counter* counter, std::string_view stage, const std::vector<flop_counts>& tallies) {
  if (!counter) return;
  flop_counts sum;
  for (const auto& t : tallies) sum += t;
  counter->record(stage, sum);
}

std::string_view to_string(flop_mode m) {
  switch (m) {
    case flop_mode::full3d: return "full3d";
    case flop_mode::decomposed: return "decomposed";
    case flop_mode::deconv_bilinear: return "deconv_bilinear";
    case flop_mode::trilinear: return "trilinear";
    case flop_mode::nearest: return "nearest";
  }
  return "?";
}

flop_mode parse_flop_mode(std::string_view s) {
  if (s == "full3d") return flop_mode::full3d;
  if (s == "decomposed") return flop_mode::decomposed;
  if (s == "deconv_bilinear") return flop_mode::deconv_bilinear;
  if (s == "trilinear") return flop_mode::trilinear;
  if (s == "nearest") return flop_mode::nearest;
  throw config_error("unknown FLOP mode '" + std::string(s) + "'");
}

flop_report flops_analytic(std::size_t height, std::size_t width, std::size_t disparities, const aggregation_config& cfg,
                           flop_mode mode) {
  validate(cfg);
  if (height == 0 || width == 0 || disparities == 0) throw config_error("volume extents must be positive");
  flop_report rep;
  rep.mode = std::string(to_string(mode));
  rep.height = height;
  rep.width = width;
  rep.disparities = disparities;
  rep.cfg = cfg;

  const std::uint64_t s = static_cast<std::uint64_t>(cfg.scale);
  const std::uint64_t s2 = s * s;
  const std::uint64_t cells = height * width;
  const std::uint64_t mid = cells * disparities * s;   // (H, W, D s)
  const std::uint64_t fine = mid * s2;                 // (H s, W s, D s)
  const std::uint64_t pixels = cells * s2;
  const std::uint64_t ks = static_cast<std::uint64_t>(cfg.directions());
  const std::uint64_t wd = static_cast<std::uint64_t>(cfg.disparity_window);
  const bool mean = cfg.reduce == block_reduce::mean;

  switch (mode) {
    case flop_mode::full3d: {
      flop_counts c;
      c.muls = fine * ks * wd * 2;
      c.adds = fine * ks * wd;
      rep.stages.emplace_back("full3d", c);
      break;
    }
    case flop_mode::decomposed: {
      flop_counts disp;
      disp.adds = mid * wd * (s2 + 1 + (cfg.stage1_renormalize ? 1 : 0));
      disp.muls = mid * wd;
      disp.divs = mid * wd * ((mean ? 1 : 0) + (cfg.stage1_renormalize ? 1 : 0));
      rep.stages.emplace_back("disparity", disp);
      if (cfg.left_center_scale) {
        flop_counts lcs;
        lcs.adds = cells * s2;
        lcs.divs = mean ? cells : 0;
        lcs.muls = mid;
        rep.stages.emplace_back("left_center_scale", lcs);
      }
      flop_counts sp;
      sp.muls = fine * ks;
      sp.adds = fine * ks;
      if (cfg.border_renormalize_spatial) {
        sp.adds += pixels * ks;
        sp.divs = fine;
      }
      rep.stages.emplace_back("spatial", sp);
      break;
    }
    case flop_mode::trilinear: {
      const std::uint64_t elements = cells * disparities * s + height * width * s * disparities * s + fine;
      flop_counts c;
      c.muls = 2 * elements;
      c.adds = elements;
      rep.stages.emplace_back("trilinear", c);
      break;
    }
    case flop_mode::deconv_bilinear: {
      flop_counts c;
      c.muls = fine * 8 * 3;
      c.adds = fine * 8;
      rep.stages.emplace_back("deconv_bilinear", c);
      break;
    }
    case flop_mode::nearest:
      rep.stages.emplace_back("nearest", flop_counts{});
      break;
  }
  return rep;
}

flop_report flops_guidance(std::size_t fine_h, std::size_t fine_w, std::size_t channels, std::size_t hidden, int spatial_window,
                           guidance_encoding encoding) {
  flop_report rep;
  rep.mode = "guidance";
  const std::uint64_t pixels = fine_h * fine_w;
  const std::uint64_t k = static_cast<std::uint64_t>(spatial_window) * static_cast<std::uint64_t>(spatial_window);
  const bool explicit_shift = encoding == guidance_encoding::explicit_shift;
  const std::uint64_t in = explicit_shift ? 2 * channels + 2 : 2 * channels;
  const std::uint64_t outs = explicit_shift ? 1 : k;
  const std::uint64_t macs = hidden * in + hidden * hidden + outs * hidden;
  const std::uint64_t evals = explicit_shift ? pixels * k : pixels;
  flop_counts c;
  c.muls = evals * macs;
  c.adds = evals * macs + pixels * 2 * k;
  c.exps = pixels * k;
  c.divs = pixels * k;
  rep.stages.emplace_back("guidance", c);
  return rep;
}

flop_report flops_runtime(const flop_counter& counter, std::string mode) {
  flop_report rep;
  rep.mode = std::move(mode);
  rep.stages = counter.stages();
  return rep;
}

}  // namespace cais
