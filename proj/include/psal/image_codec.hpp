#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "psal/data.hpp"

namespace psal {

/// 8-bit PNG; channels is 1 (gray), 3 (RGB) or 4 (RGBA), pixels interleaved row-major.
std::vector<std::uint8_t> encode_png(std::size_t width, std::size_t height, std::size_t channels,
                                     const std::vector<std::uint8_t>& pixels);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

/// Undoes the per-channel normalization, clamps to [0,1] and interleaves a
/// [C,H,W] image into 8-bit samples.
std::vector<std::uint8_t> image_to_bytes(const Tensor& image, const NormalizationStats& normalization);

/// Single-hue RGBA heat map: red, alpha proportional to the value in [0,1].
std::vector<std::uint8_t> heat_overlay(const std::vector<double>& values);

}  // namespace psal
