#include "cais/config.hpp"

#include "cais/error.hpp"

namespace cais {

void validate_scale(int s) {
  if (s != 2 && s != 4 && s != 8) throw config_error("scale ratio must be 2, 4 or 8, got " + std::to_string(s));
}

void validate(const aggregation_config& cfg) {
  validate_scale(cfg.scale);
  if (cfg.spatial_window < 1 || cfg.spatial_window % 2 == 0) {
    throw config_error("spatial window must be odd and positive, got " + std::to_string(cfg.spatial_window));
  }
  if (cfg.disparity_window < 1 || cfg.disparity_window % 2 == 0) {
    throw config_error("disparity window must be odd and positive, got " + std::to_string(cfg.disparity_window));
  }
}

std::string_view to_string(block_reduce r) { return r == block_reduce::mean ? "mean" : "sum"; }

block_reduce parse_block_reduce(std::string_view s) {
  if (s == "mean") return block_reduce::mean;
  if (s == "sum") return block_reduce::sum;
  throw config_error("unknown block reduction '" + std::string(s) + "'");
}

}  // namespace cais
