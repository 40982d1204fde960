#include "deepsnake/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "deepsnake/error.hpp"

namespace deepsnake {

namespace {

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

RasterImage decode_png(std::span<const std::uint8_t> bytes) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
    throw FormatError(std::string("invalid PNG: ") + png.message);
  }
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const int channels = color ? 3 : 1;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    std::string message = png.message;
    png_image_free(&png);
    throw FormatError("invalid PNG: " + message);
  }
  RasterImage image(static_cast<int>(png.width), static_cast<int>(png.height), channels);
  auto samples = image.samples();
  for (std::size_t i = 0; i < samples.size(); ++i) samples[i] = buffer[i] / 255.0f;
  return image;
}

// Binary PNM (P5 / P6) with maxval <= 255.
RasterImage decode_pnm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 2;
  auto next_token = [&]() -> int {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    int value = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      value = value * 10 + (bytes[pos++] - '0');
      any = true;
    }
    if (!any) throw FormatError("malformed PNM header");
    return value;
  };
  const int channels = bytes[1] == '5' ? 1 : 3;
  const int width = next_token();
  const int height = next_token();
  const int maxval = next_token();
  if (maxval <= 0 || maxval > 255) throw FormatError("unsupported PNM maxval");
  ++pos;  // single whitespace after maxval
  const std::size_t count = static_cast<std::size_t>(width) * height * channels;
  if (width <= 0 || height <= 0 || bytes.size() < pos + count) {
    throw FormatError("truncated PNM data");
  }
  RasterImage image(width, height, channels);
  auto samples = image.samples();
  for (std::size_t i = 0; i < count; ++i) {
    samples[i] = static_cast<float>(bytes[pos + i]) / static_cast<float>(maxval);
  }
  return image;
}

bool has_extension(const std::filesystem::path& path, std::initializer_list<const char*> exts) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return std::any_of(exts.begin(), exts.end(), [&](const char* e) { return ext == e; });
}

}  // namespace

RasterImage decode_image(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kPngMagic[] = {0x89, 'P', 'N', 'G'};
  if (bytes.size() >= 4 && std::equal(std::begin(kPngMagic), std::end(kPngMagic), bytes.begin())) {
    return decode_png(bytes);
  }
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) {
    return decode_pnm(bytes);
  }
  throw FormatError("unrecognized image format (expected PNG, PGM or PPM)");
}

std::vector<std::uint8_t> encode_png(const RasterImage& image) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width());
  png.height = static_cast<png_uint_32>(image.height());
  png.format = image.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;

  std::vector<std::uint8_t> pixels(image.samples().size());
  std::transform(image.samples().begin(), image.samples().end(), pixels.begin(), to_byte);

  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    throw FormatError(std::string("PNG encoding failed: ") + png.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, pixels.data(), 0, nullptr)) {
    throw FormatError(std::string("PNG encoding failed: ") + png.message);
  }
  out.resize(size);
  return out;
}

std::vector<std::uint8_t> encode_pnm(const RasterImage& image) {
  std::ostringstream header;
  header << (image.channels() == 3 ? "P6" : "P5") << '\n'
         << image.width() << ' ' << image.height() << "\n255\n";
  const std::string h = header.str();
  std::vector<std::uint8_t> out(h.begin(), h.end());
  out.reserve(out.size() + image.samples().size());
  for (float v : image.samples()) out.push_back(to_byte(v));
  return out;
}

RasterImage read_image(const std::filesystem::path& path) {
  try {
    return decode_image(read_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_image(const std::filesystem::path& path, const RasterImage& image) {
  if (has_extension(path, {".pgm", ".ppm", ".pnm"})) {
    write_bytes(path, encode_pnm(image));
  } else {
    write_bytes(path, encode_png(image));
  }
}

BinaryMask read_mask(const std::filesystem::path& path) { return to_mask(read_image(path)); }

void write_mask(const std::filesystem::path& path, const BinaryMask& mask) {
  write_image(path, to_image(mask));
}

}  // namespace deepsnake
