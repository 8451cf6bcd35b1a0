// SPDX-License-Identifier: Apache-2.0
//
// Flat binary parameter checkpoints:
//
//   "TIPSCKPT"  u32 version  u64 count
//   per record: u32 name_len, name bytes, u32 rank, u64 dims[rank],
//               float64 payload (little endian, row major)

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "tips/tensor.hpp"

namespace tips {

struct NamedTensor {
  std::string name;
  Tensor value;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& params);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace tips
