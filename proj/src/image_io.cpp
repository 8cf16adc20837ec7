// Copyright 2026 The DMM Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "dmm/image_io.hpp"

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dmm/phantom.hpp"

namespace dmm {

namespace {

std::vector<unsigned char> quantize_u8(const Tensor& img) {
  require(img.shape().rank() == 2, "image write: (H,W) tensor expected");
  Tensor q = denormalize_intensity(img, 8);
  std::vector<unsigned char> out(static_cast<size_t>(q.numel()));
  for (int64_t i = 0; i < q.numel(); ++i) out[i] = static_cast<unsigned char>(q.at(i));
  return out;
}

Tensor dequantize_u8(const std::vector<unsigned char>& bytes, int64_t h, int64_t w) {
  std::vector<double> raw(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i) raw[i] = static_cast<double>(bytes[i]);
  return normalize_intensity(Tensor::from(Shape{h, w}, std::move(raw)), 8);
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

void write_pgm(const std::string& path, const Tensor& img) {
  std::vector<unsigned char> bytes = quantize_u8(img);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("write_pgm: cannot open " + path);
  os << "P5\n" << img.shape().dim(1) << " " << img.shape().dim(0) << "\n255\n";
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write_pgm: write failed for " + path);
}

Tensor read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("read_pgm: cannot open " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5") throw IoError("read_pgm: not a binary PGM: " + path);
  auto next_token = [&is, &path]() {
    std::string tok;
    while (is >> tok) {
      if (tok[0] == '#') {
        std::string rest;
        std::getline(is, rest);
        continue;
      }
      return tok;
    }
    throw IoError("read_pgm: truncated header: " + path);
  };
  int64_t w = std::stoll(next_token());
  int64_t h = std::stoll(next_token());
  int64_t maxval = std::stoll(next_token());
  if (maxval != 255) throw IoError("read_pgm: only 8-bit PGM supported: " + path);
  is.get();  // single whitespace after maxval
  std::vector<unsigned char> bytes(static_cast<size_t>(h * w));
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!is) throw IoError("read_pgm: truncated pixel data: " + path);
  return dequantize_u8(bytes, h, w);
}

void write_png8(const std::string& path, const Tensor& img) {
  std::vector<unsigned char> bytes = quantize_u8(img);
  int64_t h = img.shape().dim(0), w = img.shape().dim(1);
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError("write_png8: cannot open " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("write_png8: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("write_png8: encode failed for " + path);
  }
  png_init_io(png, fp);
  // Fixed settings keep the byte stream reproducible across runs.
  png_set_compression_level(png, 6);
  png_set_filter(png, 0, PNG_FILTER_NONE);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int64_t y = 0; y < h; ++y)
    png_write_row(png, const_cast<png_bytep>(bytes.data() + y * w));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

Tensor read_png8(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("read_png8: cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("read_png8: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("read_png8: decode failed for " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  png_byte color = png_get_color_type(png, info);
  png_byte depth = png_get_bit_depth(png, info);
  // normalize to 8-bit grayscale
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (depth == 16) png_set_strip_16(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
      color == PNG_COLOR_TYPE_PALETTE)
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);
  std::vector<unsigned char> bytes(static_cast<size_t>(w) * h);
  for (png_uint_32 y = 0; y < h; ++y) png_read_row(png, bytes.data() + y * w, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return dequantize_u8(bytes, h, w);
}

void write_image(const std::string& path, const Tensor& img) {
  if (ends_with(path, ".pgm"))
    write_pgm(path, img);
  else if (ends_with(path, ".png"))
    write_png8(path, img);
  else
    throw IoError("write_image: unsupported extension: " + path);
}

Tensor read_image(const std::string& path) {
  if (ends_with(path, ".pgm")) return read_pgm(path);
  if (ends_with(path, ".png")) return read_png8(path);
  throw IoError("read_image: unsupported extension: " + path);
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw IoError("write_manifest: cannot open " + path);
  for (const ManifestEntry& e : entries) os << e.source << "\t" << e.target << "\n";
  if (!os) throw IoError("write_manifest: write failed for " + path);
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("read_manifest: cannot open " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw IoError("read_manifest: malformed line (no tab): " + line);
    out.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return out;
}

}  // namespace dmm
