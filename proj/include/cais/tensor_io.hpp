#pragma once

#include <filesystem>

#include "cais/tensor.hpp"

namespace cais {

// CVT1: "CVT1", u32 ndim, ndim x u32 extents, float32 data. All little-endian.
void write_tensor(const std::filesystem::path& path, const tensor& t);
tensor read_tensor(const std::filesystem::path& path);

// Grayscale PFM ("Pf"), scale -1.0 (little-endian), rows stored bottom-to-top.
void write_pfm(const std::filesystem::path& path, const tensor& map);
tensor read_pfm(const std::filesystem::path& path);

}  // namespace cais
