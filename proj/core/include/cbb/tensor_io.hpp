// SPDX-License-Identifier: Apache-2.0
#pragma once

// Binary tensor container:
//   "CBTN" | version u8 | rank u8 | extents u64 LE × rank | data f64 LE × numel
// Gradients are not stored.

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "cbb/tensor.hpp"

namespace cbb {

inline constexpr std::uint8_t kTensorFormatVersion = 1;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace cbb
