// SPDX-License-Identifier: Apache-2.0
#include "cbb/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "cbb/errors.hpp"

namespace cbb {

namespace {

constexpr std::array<char, 4> kMagic{'C', 'B', 'T', 'N'};

void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> bytes{};
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

std::uint64_t get_u64(std::istream& in) {
  std::array<unsigned char, 8> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw FormatError("tensor file truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

std::uint8_t get_u8(std::istream& in) {
  char c = 0;
  in.read(&c, 1);
  if (!in) throw FormatError("tensor file truncated");
  return static_cast<std::uint8_t>(c);
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  if (t.rank() > 255) throw FormatError("tensor rank exceeds container limit");
  out.write(kMagic.data(), kMagic.size());
  out.put(static_cast<char>(kTensorFormatVersion));
  out.put(static_cast<char>(t.rank()));
  for (auto extent : t.shape()) put_u64(out, extent);
  for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  if (!out) throw FormatError("failed writing tensor");
}

Tensor read_tensor(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw FormatError("not a tensor container (bad magic)");
  const auto version = get_u8(in);
  if (version != kTensorFormatVersion) {
    throw FormatError("unsupported tensor format version " + std::to_string(version));
  }
  const auto rank = get_u8(in);
  if (rank == 0) throw FormatError("tensor container with rank 0");
  Shape shape(rank);
  for (auto& extent : shape) {
    extent = get_u64(in);
    if (extent == 0) throw FormatError("tensor container with zero extent");
  }
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = std::bit_cast<double>(get_u64(in));
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_tensor(in);
}

}  // namespace cbb
