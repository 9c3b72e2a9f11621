#include "skyrm/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

namespace skyrm {

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

[[noreturn]] void format_error(const std::filesystem::path& path, const std::string& what) {
  throw FormatError("'" + path.string() + "': " + what);
}

Gray8 parse_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 2;
  auto next_token = [&]() -> long {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    long v = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos]) && digits < 9) {
      v = v * 10 + (bytes[pos++] - '0');
      ++digits;
    }
    if (digits == 0) format_error(path, "malformed PGM header");
    return v;
  };
  const long w = next_token();
  const long h = next_token();
  const long maxval = next_token();
  if (maxval != 255) format_error(path, "PGM maxval " + std::to_string(maxval) + " is not 255");
  if (w < 1 || h < 1) format_error(path, "PGM has empty dimensions");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) format_error(path, "malformed PGM header");
  ++pos;
  const auto n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (bytes.size() - pos < n) format_error(path, "PGM pixel data truncated");
  Gray8 g(static_cast<int>(h), static_cast<int>(w));
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), n, g.data.begin());
  return g;
}

Gray8 parse_png(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    format_error(path, std::string("PNG decode failed: ") + img.message);
  const auto fmt = img.format;
  if (fmt & PNG_FORMAT_FLAG_COLORMAP) {
    // Palette files are accepted only if every entry is grey; checked after
    // decoding below by requesting RGB.
  } else if (fmt & PNG_FORMAT_FLAG_COLOR) {
    png_image_free(&img);
    format_error(path, "colour PNG, expected 8-bit greyscale");
  }
  if (fmt & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&img);
    format_error(path, "16-bit PNG, expected 8-bit greyscale");
  }
  if (fmt & PNG_FORMAT_FLAG_ALPHA) {
    png_image_free(&img);
    format_error(path, "PNG has an alpha channel, expected plain greyscale");
  }
  const int w = static_cast<int>(img.width), h = static_cast<int>(img.height);
  if (fmt & PNG_FORMAT_FLAG_COLORMAP) {
    img.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, rgb.data(), 0, nullptr))
      format_error(path, std::string("PNG decode failed: ") + img.message);
    Gray8 g(h, w);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (rgb[3 * i] != rgb[3 * i + 1] || rgb[3 * i] != rgb[3 * i + 2])
        format_error(path, "colour PNG, expected 8-bit greyscale");
      g.data[i] = rgb[3 * i];
    }
    return g;
  }
  img.format = PNG_FORMAT_GRAY;
  Gray8 g(h, w);
  if (!png_image_finish_read(&img, nullptr, g.data.data(), 0, nullptr))
    format_error(path, std::string("PNG decode failed: ") + img.message);
  return g;
}

}  // namespace

Gray8 read_gray8(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  static constexpr std::uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(png_sig, png_sig + 8, bytes.begin())) return parse_png(path, bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P') {
    if (bytes[1] == '5') return parse_pgm(path, bytes);
    format_error(path, std::string("unsupported PNM variant P") + static_cast<char>(bytes[1]));
  }
  format_error(path, "unsupported image format (expected PGM P5 or PNG)");
}

void write_gray8(const std::filesystem::path& path, const Gray8& pixels) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".pgm") {
    std::ofstream out(path, std::ios::binary);
    out << "P5\n" << pixels.w << ' ' << pixels.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(pixels.data.data()), static_cast<std::streamsize>(pixels.size()));
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    return;
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(pixels.w);
  img.height = static_cast<png_uint_32>(pixels.h);
  img.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, pixels.data.data(), 0, nullptr))
    throw DataError("cannot write '" + path.string() + "': " + img.message);
}

Gray8 quantize(const Image& image) {
  Gray8 g(image.h, image.w);
  for (std::size_t i = 0; i < image.size(); ++i)
    g.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.data[i], 0.0f, 1.0f) * 255.0f));
  return g;
}

Image dequantize(const Gray8& pixels) {
  Image img(pixels.h, pixels.w);
  for (std::size_t i = 0; i < pixels.size(); ++i) img.data[i] = static_cast<float>(pixels.data[i]) / 255.0f;
  return img;
}

Image load_image(const std::filesystem::path& path) { return dequantize(read_gray8(path)); }

void save_image(const std::filesystem::path& path, const Image& image) { write_gray8(path, quantize(image)); }

ClassMask load_mask(const std::filesystem::path& path, int num_classes) {
  const Gray8 g = read_gray8(path);
  ClassMask m(g.h, g.w);
  for (int y = 0; y < g.h; ++y)
    for (int x = 0; x < g.w; ++x) {
      const std::uint8_t v = g.at(y, x);
      int cls = -1;
      for (int k = 0; k < 3; ++k)
        if (v == kMaskLevels[k]) cls = k;
      if (cls < 0)
        throw DataError("'" + path.string() + "': mask value " + std::to_string(v) + " at (row " +
                        std::to_string(y) + ", col " + std::to_string(x) + ") is not 0, 128 or 255");
      if (cls >= num_classes)
        throw DataError("'" + path.string() + "': class " + std::to_string(cls) + " at (row " + std::to_string(y) +
                        ", col " + std::to_string(x) + ") exceeds " + std::to_string(num_classes) + " classes");
      m.at(y, x) = static_cast<std::uint8_t>(cls);
    }
  return m;
}

void save_mask(const std::filesystem::path& path, const ClassMask& mask) {
  Gray8 g(mask.h, mask.w);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask.data[i] > kDefect)
      throw DataError("save_mask: class " + std::to_string(mask.data[i]) + " has no file encoding");
    g.data[i] = kMaskLevels[mask.data[i]];
  }
  write_gray8(path, g);
}

}  // namespace skyrm
