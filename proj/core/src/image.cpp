#include "sqz/image.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iterator>

#include "sqz/errors.hpp"

namespace sqz {

namespace {

class PnmReader {
 public:
  PnmReader(std::span<const std::uint8_t> bytes, const std::string& source)
      : bytes_(bytes), source_(source) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const auto c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(c)) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  int read_int(const char* field) {
    skip_space_and_comments();
    long value = 0;
    std::size_t digits = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > 1 << 20) fail(std::string(field) + " too large");
      ++pos_;
      ++digits;
    }
    if (digits == 0) fail(std::string("missing ") + field);
    return static_cast<int>(value);
  }

  void expect_single_space() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) fail("missing whitespace after header");
    ++pos_;
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw DataError(source_ + ": invalid PNM image: " + what);
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  const std::string& source_;
};

}  // namespace

Image8 decode_pnm(std::span<const std::uint8_t> bytes, const std::string& source) {
  PnmReader r(bytes, source);
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    r.fail("expected binary P5 or P6 magic");
  }
  r.pos_ = 2;
  Image8 img;
  img.channels = bytes[1] == '6' ? 3 : 1;
  img.width = r.read_int("width");
  img.height = r.read_int("height");
  const int maxval = r.read_int("maxval");
  if (img.width <= 0 || img.height <= 0) r.fail("zero dimension");
  if (maxval <= 0 || maxval > 255) r.fail("maxval " + std::to_string(maxval) + " unsupported");
  r.expect_single_space();
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * img.channels;
  if (bytes.size() - r.pos_ < n) r.fail("truncated pixel data");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos_),
                    bytes.begin() + static_cast<std::ptrdiff_t>(r.pos_ + n));
  if (maxval != 255) {
    for (auto& p : img.pixels) {
      p = static_cast<std::uint8_t>(std::min<int>(255, (p * 255 + maxval / 2) / maxval));
    }
  }
  return img;
}

std::vector<std::uint8_t> encode_pnm(const Image8& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw DataError("PNM encoding supports 1 or 3 channels, got " + std::to_string(image.channels));
  }
  const std::size_t n = static_cast<std::size_t>(image.width) * image.height * image.channels;
  if (image.width <= 0 || image.height <= 0 || image.pixels.size() != n) {
    throw DataError("image buffer does not match its dimensions");
  }
  const std::string header = std::string(image.channels == 3 ? "P6" : "P5") + "\n" +
                             std::to_string(image.width) + " " + std::to_string(image.height) +
                             "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

Image8 read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string() + ": cannot open image");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_pnm(bytes, path.string());
}

void write_pnm(const Image8& image, const std::filesystem::path& path) {
  const auto bytes = encode_pnm(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path.string() + ": write failed");
}

ImageF to_float(const Image8& image, int channels) {
  if (image.channels != 1 && image.channels != channels) {
    throw DataError("cannot convert " + std::to_string(image.channels) + "-channel image to " +
                    std::to_string(channels) + " channels");
  }
  ImageF out{channels, image.height, image.width,
             std::vector<float>(static_cast<std::size_t>(channels) * image.height * image.width)};
  for (int c = 0; c < channels; ++c) {
    const int src_c = image.channels == 1 ? 0 : c;
    for (int y = 0; y < image.height; ++y) {
      for (int x = 0; x < image.width; ++x) {
        const auto p = image.pixels[(static_cast<std::size_t>(y) * image.width + x) * image.channels + src_c];
        out.at(c, y, x) = static_cast<float>(p) / 255.0f;
      }
    }
  }
  return out;
}

namespace {

struct Tap {
  int lo;
  int hi;
  double frac;
};

std::vector<Tap> sample_taps(int in, int out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  for (int i = 0; i < out; ++i) {
    const double src = out == 1 ? (in - 1) / 2.0 : static_cast<double>(i) * (in - 1) / (out - 1);
    int lo = static_cast<int>(src);
    lo = std::clamp(lo, 0, in - 1);
    const int hi = std::min(lo + 1, in - 1);
    taps[static_cast<std::size_t>(i)] = {lo, hi, src - lo};
  }
  return taps;
}

}  // namespace

ImageF resize_bilinear(const ImageF& image, int out_height, int out_width) {
  if (out_height <= 0 || out_width <= 0 || image.height <= 0 || image.width <= 0) {
    throw DataError("degenerate resize " + std::to_string(image.height) + "x" +
                    std::to_string(image.width) + " -> " + std::to_string(out_height) + "x" +
                    std::to_string(out_width));
  }
  const auto ty = sample_taps(image.height, out_height);
  const auto tx = sample_taps(image.width, out_width);
  ImageF out{image.channels, out_height, out_width,
             std::vector<float>(static_cast<std::size_t>(image.channels) * out_height * out_width)};
  for (int c = 0; c < image.channels; ++c) {
    for (int y = 0; y < out_height; ++y) {
      const Tap& a = ty[static_cast<std::size_t>(y)];
      for (int x = 0; x < out_width; ++x) {
        const Tap& b = tx[static_cast<std::size_t>(x)];
        const double top = image.at(c, a.lo, b.lo) * (1.0 - b.frac) + image.at(c, a.lo, b.hi) * b.frac;
        const double bot = image.at(c, a.hi, b.lo) * (1.0 - b.frac) + image.at(c, a.hi, b.hi) * b.frac;
        out.at(c, y, x) = static_cast<float>(top * (1.0 - a.frac) + bot * a.frac);
      }
    }
  }
  return out;
}

std::array<int, 2> short_side_size(int height, int width, int short_side) {
  if (height <= 0 || width <= 0 || short_side <= 0) {
    throw DataError("degenerate image dimensions " + std::to_string(height) + "x" + std::to_string(width));
  }
  if (height <= width) {
    const long long w = (static_cast<long long>(width) * short_side + height / 2) / height;
    return {short_side, static_cast<int>(w)};
  }
  const long long h = (static_cast<long long>(height) * short_side + width / 2) / width;
  return {static_cast<int>(h), short_side};
}

ImageF resize_short_side(const ImageF& image, int short_side) {
  const auto [h, w] = short_side_size(image.height, image.width, short_side);
  return resize_bilinear(image, h, w);
}

ImageF crop(const ImageF& image, int top, int left, int height, int width) {
  if (top < 0 || left < 0 || height <= 0 || width <= 0 || top + height > image.height ||
      left + width > image.width) {
    throw DataError("crop " + std::to_string(height) + "x" + std::to_string(width) + " at (" +
                    std::to_string(top) + "," + std::to_string(left) + ") outside " +
                    std::to_string(image.height) + "x" + std::to_string(image.width) + " image");
  }
  ImageF out{image.channels, height, width,
             std::vector<float>(static_cast<std::size_t>(image.channels) * height * width)};
  for (int c = 0; c < image.channels; ++c) {
    for (int y = 0; y < height; ++y) {
      const float* src = &image.data[(static_cast<std::size_t>(c) * image.height + top + y) * image.width + left];
      std::copy(src, src + width, &out.at(c, y, 0));
    }
  }
  return out;
}

ImageF hflip(const ImageF& image) {
  ImageF out = image;
  for (int c = 0; c < image.channels; ++c) {
    for (int y = 0; y < image.height; ++y) {
      float* row = &out.at(c, y, 0);
      std::reverse(row, row + image.width);
    }
  }
  return out;
}

void normalize_into(const ImageF& image, const Normalization& norm, std::span<float> out) {
  if (image.channels > 3 || out.size() != image.data.size()) {
    throw ShapeError("normalize_into: destination size mismatch");
  }
  const std::size_t plane = static_cast<std::size_t>(image.height) * image.width;
  for (int c = 0; c < image.channels; ++c) {
    const float mean = norm.mean[static_cast<std::size_t>(c)];
    const float inv = 1.0f / norm.stddev[static_cast<std::size_t>(c)];
    const float* src = image.data.data() + c * plane;
    float* dst = out.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) dst[i] = (src[i] - mean) * inv;
  }
}

Tensor eval_preprocess_resized(const ImageF& resized, const Normalization& norm) {
  if (resized.height < kCropSize || resized.width < kCropSize) {
    throw DataError("image smaller than the " + std::to_string(kCropSize) + " crop after resize");
  }
  const int top = (resized.height - kCropSize) / 2;
  const int left = (resized.width - kCropSize) / 2;
  const ImageF c = crop(resized, top, left, kCropSize, kCropSize);
  Tensor out({static_cast<std::size_t>(c.channels), kCropSize, kCropSize});
  normalize_into(c, norm, out.values());
  return out;
}

Tensor eval_preprocess(const Image8& image, const Normalization& norm) {
  return eval_preprocess_resized(resize_short_side(to_float(image), kResizeShortSide), norm);
}

}  // namespace sqz
