// SPDX-License-Identifier: Apache-2.0
#include "tips/checkpoint.hpp"

#include <fstream>

#include "tips/binary_io.hpp"

namespace tips {

namespace {
constexpr char kMagic[9] = "TIPSCKPT";
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path.string());
  binio::write_magic(out, kMagic);
  binio::write_le(out, kCheckpointVersion);
  binio::write_le(out, static_cast<std::uint64_t>(params.size()));
  for (const auto& [name, value] : params) {
    binio::write_string(out, name);
    binio::write_le(out, static_cast<std::uint32_t>(value.rank()));
    for (std::size_t d : value.shape()) binio::write_le(out, static_cast<std::uint64_t>(d));
    binio::write_f64s(out, value.data());
  }
  if (!out) throw DataError("failed writing checkpoint: " + path.string());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  binio::expect_magic(in, kMagic, "checkpoint");
  auto version = binio::read_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  auto count = binio::read_le<std::uint64_t>(in);
  std::vector<NamedTensor> params;
  params.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor entry;
    entry.name = binio::read_string(in);
    auto rank = binio::read_le<std::uint32_t>(in);
    if (rank > 8) throw DataError("checkpoint record '" + entry.name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = binio::read_le<std::uint64_t>(in);
    entry.value = Tensor::from(shape, binio::read_f64s(in, shape_numel(shape)));
    params.push_back(std::move(entry));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw DataError("trailing bytes after checkpoint records: " + path.string());
  }
  return params;
}

}  // namespace tips
