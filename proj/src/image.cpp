#include "secagent/image.hpp"

#include <png.h>

#include <array>
#include <fstream>
#include <iterator>

namespace secagent {

namespace {

std::uint32_t be32(const unsigned char* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) |
         (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
}

ImageSize jpeg_size(std::ifstream& in, const std::filesystem::path& path) {
  in.seekg(2);
  for (;;) {
    int c = in.get();
    if (c == EOF) break;
    if (c != 0xFF) continue;
    int marker = in.get();
    while (marker == 0xFF) marker = in.get();
    if (marker == EOF) break;
    if (marker == 0xD8 || marker == 0x01 || (marker >= 0xD0 && marker <= 0xD7)) continue;
    std::array<unsigned char, 2> len_bytes{};
    in.read(reinterpret_cast<char*>(len_bytes.data()), 2);
    const int len = (len_bytes[0] << 8) | len_bytes[1];
    const bool sof = marker >= 0xC0 && marker <= 0xCF && marker != 0xC4 &&
                     marker != 0xC8 && marker != 0xCC;
    if (sof) {
      std::array<unsigned char, 5> sof_bytes{};
      in.read(reinterpret_cast<char*>(sof_bytes.data()), 5);
      if (!in) break;
      return {(sof_bytes[3] << 8) | sof_bytes[4], (sof_bytes[1] << 8) | sof_bytes[2]};
    }
    if (len < 2) break;
    in.seekg(len - 2, std::ios::cur);
  }
  throw ImageError("no JPEG frame header in " + path.string());
}

}  // namespace

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string sniff_media_type(const std::string& bytes) {
  if (bytes.size() >= 8 && bytes.compare(0, 8, "\x89PNG\r\n\x1a\n") == 0) return "image/png";
  if (bytes.size() >= 3 && static_cast<unsigned char>(bytes[0]) == 0xFF &&
      static_cast<unsigned char>(bytes[1]) == 0xD8) {
    return "image/jpeg";
  }
  return "application/octet-stream";
}

ImageSize read_image_size(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open image " + path.string());
  std::array<unsigned char, 24> head{};
  in.read(reinterpret_cast<char*>(head.data()), head.size());
  const auto got = in.gcount();
  in.clear();
  static constexpr unsigned char kPngMagic[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (got >= 24 && std::equal(std::begin(kPngMagic), std::end(kPngMagic), head.begin())) {
    return {static_cast<int>(be32(&head[16])), static_cast<int>(be32(&head[20]))};
  }
  if (got >= 2 && head[0] == 0xFF && head[1] == 0xD8) return jpeg_size(in, path);
  throw ImageError("unsupported image format: " + path.string());
}

RgbImage read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw ImageError("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  RgbImage out;
  out.width = static_cast<int>(image.width);
  out.height = static_cast<int>(image.height);
  out.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw ImageError("cannot decode PNG " + path.string() + ": " + msg);
  }
  return out;
}

void write_png(const std::filesystem::path& path, const RgbImage& img) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw ImageError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

}  // namespace secagent
