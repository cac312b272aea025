// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace xcaps {

// Binary PGM (P5), 8-bit, pixel bytes = round(255 * clamp(value, 0, 1)).
template <typename T>
void write_pgm(const std::filesystem::path& file, std::size_t width, std::size_t height,
               const std::vector<T>& pixels) {
  if (pixels.size() != width * height)
    throw std::invalid_argument("write_pgm: " + std::to_string(pixels.size()) + " pixels for " +
                                std::to_string(width) + "x" + std::to_string(height));
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_pgm: cannot open " + file.string());
  out << "P5\n" << width << " " << height << "\n255\n";
  std::vector<std::uint8_t> bytes(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    double v = static_cast<double>(pixels[i]);
    v = std::min(1.0, std::max(0.0, v));
    bytes[i] = static_cast<std::uint8_t>(std::lround(255.0 * v));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write_pgm: write failed for " + file.string());
}

}  // namespace xcaps
