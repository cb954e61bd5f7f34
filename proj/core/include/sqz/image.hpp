#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sqz/tensor.hpp"

namespace sqz {

// 8-bit image with interleaved channels (1 = gray, 3 = RGB), row-major.
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  friend bool operator==(const Image8&, const Image8&) = default;
};

// Planar float image (CHW), values nominally in [0, 1].
struct ImageF {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }

  friend bool operator==(const ImageF&, const ImageF&) = default;
};

// Binary PPM (P6) and PGM (P5) with maxval <= 255. `source` names the input
// in error messages.
Image8 decode_pnm(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");
std::vector<std::uint8_t> encode_pnm(const Image8& image);
Image8 read_pnm(const std::filesystem::path& path);
void write_pnm(const Image8& image, const std::filesystem::path& path);

// Gray input is replicated to `channels` planes; values scaled to [0, 1].
ImageF to_float(const Image8& image, int channels = 3);

// Corner-aligned bilinear resampling: output pixel i samples source
// coordinate i * (in - 1) / (out - 1) on each axis (the centre when out == 1).
ImageF resize_bilinear(const ImageF& image, int out_height, int out_width);

// Output size when the shorter side is scaled to `short_side`; the longer
// side is rounded half-up and the aspect ratio otherwise kept.
std::array<int, 2> short_side_size(int height, int width, int short_side);
ImageF resize_short_side(const ImageF& image, int short_side);

ImageF crop(const ImageF& image, int top, int left, int height, int width);
ImageF hflip(const ImageF& image);

constexpr int kResizeShortSide = 129;
constexpr int kCropSize = 113;

struct Normalization {
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> stddev{0.5f, 0.5f, 0.5f};
};

// Writes (x - mean) / std of each plane into `out` (size C*H*W).
void normalize_into(const ImageF& image, const Normalization& norm, std::span<float> out);

// Shorter side to 129 (bilinear), centre 113x113 crop, mean/std normalised.
// Returns [3, 113, 113].
Tensor eval_preprocess(const Image8& image, const Normalization& norm = {});
// Same, starting from an image that already has its shorter side at 129.
Tensor eval_preprocess_resized(const ImageF& resized, const Normalization& norm = {});

}  // namespace sqz
