#pragma once

#include <filesystem>
#include <string>

#include "tumorseg/nn/optim.hpp"

namespace tumorseg::detail {

// Binary layout (little endian):
//   "TSGW" u32 version | u32 meta_len | meta (JSON text) | u32 tensor_count |
//   per tensor: u16 name_len | name | u8 rank | i32 dims[rank] | f32 data[numel]
struct WeightsFile {
  std::string meta;
  nn::ParamSet<float> tensors;
};

/// Writes to a temporary sibling and renames, so readers never see a torn file.
void write_weights(const std::filesystem::path& path, const std::string& meta, const nn::ParamSet<float>& tensors);
WeightsFile read_weights(const std::filesystem::path& path);
std::string read_weights_meta(const std::filesystem::path& path);

}  // namespace tumorseg::detail
