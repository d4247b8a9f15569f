#include "psal/image_codec.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>

#include "psal/error.hpp"

namespace psal {

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

}  // namespace

std::vector<std::uint8_t> encode_png(std::size_t width, std::size_t height, std::size_t channels,
                                     const std::vector<std::uint8_t>& pixels) {
  if (channels != 1 && channels != 3 && channels != 4) throw ShapeError("png: channels must be 1, 3 or 4");
  if (pixels.size() != width * height * channels) throw ShapeError("png: pixel buffer has the wrong size");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = channels == 1 ? PNG_FORMAT_GRAY : channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_RGBA;
  png_alloc_size_t size = 0;
  // first call sizes the buffer
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    throw Error(std::string("png: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, pixels.data(), 0, nullptr)) {
    throw Error(std::string("png: ") + image.message);
  }
  out.resize(size);
  return out;
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    for (int s = 18; s >= 0; s -= 6) out.push_back(kAlphabet[(v >> s) & 63]);
  }
  if (i < bytes.size()) {
    std::uint32_t v = bytes[i] << 16;
    if (i + 1 < bytes.size()) v |= bytes[i + 1] << 8;
    out.push_back(kAlphabet[(v >> 18) & 63]);
    out.push_back(kAlphabet[(v >> 12) & 63]);
    out.push_back(i + 1 < bytes.size() ? kAlphabet[(v >> 6) & 63] : '=');
    out.push_back('=');
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw FormatError("base64: length is not a multiple of 4");
  auto value = [](char c) -> std::uint32_t {
    const char* p = std::find(kAlphabet, kAlphabet + 64, c);
    if (p == kAlphabet + 64) throw FormatError("base64: invalid character");
    return static_cast<std::uint32_t>(p - kAlphabet);
  };
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i < text.size(); i += 4) {
    const int pad = (text[i + 3] == '=') + (text[i + 2] == '=');
    std::uint32_t v = (value(text[i]) << 18) | (value(text[i + 1]) << 12);
    if (pad < 2) v |= value(text[i + 2]) << 6;
    if (pad < 1) v |= value(text[i + 3]);
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(v >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(v));
  }
  return out;
}

std::vector<std::uint8_t> image_to_bytes(const Tensor& image, const NormalizationStats& normalization) {
  const auto& s = image.shape();
  if (s.size() != 3) throw ShapeError("image_to_bytes expects [C,H,W]");
  const std::size_t c = s[0], hw = s[1] * s[2];
  if (normalization.mean.size() != c || normalization.std.size() != c) {
    throw ShapeError("normalization statistics do not match the image channels");
  }
  const auto v = image.data();
  std::vector<std::uint8_t> out(c * hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < hw; ++p) {
      const double x = std::clamp(v[ch * hw + p] * normalization.std[ch] + normalization.mean[ch], 0.0, 1.0);
      out[p * c + ch] = static_cast<std::uint8_t>(std::lround(x * 255.0));
    }
  }
  return out;
}

std::vector<std::uint8_t> heat_overlay(const std::vector<double>& values) {
  std::vector<std::uint8_t> out;
  out.reserve(values.size() * 4);
  for (double v : values) {
    out.insert(out.end(), {255, 0, 0, static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))});
  }
  return out;
}

}  // namespace psal
