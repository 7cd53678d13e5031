#include "sdet/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "sdet/error.hpp"

namespace sdet::img {

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// PGM headers allow whitespace runs and '#' comment lines between tokens.
int next_pgm_int(std::istream& is, const char* what) {
  for (;;) {
    int c = is.peek();
    if (c == EOF) fail("format", "truncated header", what);
    if (c == '#') {
      std::string line;
      std::getline(is, line);
      continue;
    }
    if (std::isspace(c)) {
      is.get();
      continue;
    }
    break;
  }
  int v;
  if (!(is >> v)) fail("format", "malformed header", what);
  return v;
}

}  // namespace

Image8 read_image(const std::string& path) {
  if (ends_with(path, ".pgm")) return read_pgm(path);
  if (ends_with(path, ".png")) return read_png(path);
  fail("bad_argument", "unsupported image extension", path);
}

void write_image(const std::string& path, const Image8& im) {
  if (ends_with(path, ".pgm")) return write_pgm(path, im);
  if (ends_with(path, ".png")) return write_png(path, im);
  fail("bad_argument", "unsupported image extension", path);
}

Image8 read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("io", "cannot open for reading", path);
  char m0 = 0, m1 = 0;
  is.get(m0).get(m1);
  if (m0 != 'P' || m1 != '5') fail("format", "not a binary PGM (P5)", path);
  int w = next_pgm_int(is, path.c_str());
  int h = next_pgm_int(is, path.c_str());
  int maxval = next_pgm_int(is, path.c_str());
  if (w <= 0 || h <= 0 || maxval != 255) fail("format", "unsupported PGM geometry", path);
  is.get();  // single whitespace byte before the raster
  Image8 im(size_t(w), size_t(h), 1);
  is.read(reinterpret_cast<char*>(im.pixels.data()), std::streamsize(im.pixels.size()));
  if (size_t(is.gcount()) != im.pixels.size()) fail("format", "truncated raster", path);
  return im;
}

void write_pgm(const std::string& path, const Image8& im) {
  if (im.channels != 1) fail("bad_argument", "PGM is single-channel", path);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail("io", "cannot open for writing", path);
  os << "P5\n" << im.width << " " << im.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(im.pixels.data()), std::streamsize(im.pixels.size()));
  if (!os) fail("io", "write failed", path);
}

Image8 read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) fail("io", "cannot open for reading", path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    fail("io", "libpng init failed", path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    fail("format", "png decode failed", path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_expand(png);  // palette -> rgb, low-depth gray -> 8 bit
  png_read_update_info(png, info);
  size_t w = png_get_image_width(png, info);
  size_t h = png_get_image_height(png, info);
  size_t c = png_get_channels(png, info);
  if (c != 1 && c != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    fail("format", "expected gray or RGB png", path);
  }
  Image8 im(w, h, c);
  std::vector<png_bytep> rows(h);
  for (size_t y = 0; y < h; ++y) rows[y] = im.pixels.data() + y * w * c;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return im;
}

void write_png(const std::string& path, const Image8& im) {
  if (im.channels != 1 && im.channels != 3) fail("bad_argument", "png supports gray or RGB");
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) fail("io", "cannot open for writing", path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    fail("io", "libpng init failed", path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    fail("io", "png encode failed", path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, png_uint_32(im.width), png_uint_32(im.height), 8,
               im.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(im.height);
  for (size_t y = 0; y < im.height; ++y)
    rows[y] = const_cast<png_bytep>(im.pixels.data() + y * im.width * im.channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

Image8 resize_bilinear(const Image8& im, size_t out_w, size_t out_h) {
  if (im.width == 0 || im.height == 0 || out_w == 0 || out_h == 0)
    fail("bad_argument", "resize with empty extent");
  Image8 out(out_w, out_h, im.channels);
  double sx = double(im.width) / double(out_w);
  double sy = double(im.height) / double(out_h);
  for (size_t oy = 0; oy < out_h; ++oy) {
    double fy = (double(oy) + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, double(im.height - 1));
    size_t y0 = size_t(fy);
    size_t y1 = std::min(y0 + 1, im.height - 1);
    double wy = fy - double(y0);
    for (size_t ox = 0; ox < out_w; ++ox) {
      double fx = (double(ox) + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, double(im.width - 1));
      size_t x0 = size_t(fx);
      size_t x1 = std::min(x0 + 1, im.width - 1);
      double wx = fx - double(x0);
      for (size_t c = 0; c < im.channels; ++c) {
        double top = (1 - wx) * im.at(y0, x0, c) + wx * im.at(y0, x1, c);
        double bot = (1 - wx) * im.at(y1, x0, c) + wx * im.at(y1, x1, c);
        double v = (1 - wy) * top + wy * bot;
        out.at(oy, ox, c) = uint8_t(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  return out;
}

Tensor to_tensor(const Image8& im) {
  Shape shape{1, im.channels, im.height, im.width};
  std::vector<double> data(shape_numel(shape));
  for (size_t c = 0; c < im.channels; ++c)
    for (size_t y = 0; y < im.height; ++y)
      for (size_t x = 0; x < im.width; ++x)
        data[(c * im.height + y) * im.width + x] = im.at(y, x, c) / 255.0;
  return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace sdet::img
