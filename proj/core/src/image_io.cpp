#include "safnet/image_io.hpp"

#include <png.h>
#include <tiffio.h>

#include <algorithm>
#include <bit>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "safnet/checkpoint.hpp"

namespace safnet::io {

namespace fs = std::filesystem;

namespace {

std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

// Assembles 1 x 3 x H x W from interleaved samples.
template <typename Sample>
TensorD from_interleaved(const std::vector<Sample>& buf, int h, int w, int spp, double maxv) {
  TensorD out({1, 3, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Sample* px = &buf[(static_cast<std::size_t>(y) * w + x) * spp];
      for (int c = 0; c < 3; ++c) {
        const int src = spp >= 3 ? c : 0;
        out.at(0, c, y, x) = px[src] / maxv;
      }
    }
  }
  return out;
}

void require_channels(const TensorD& image, const fs::path& path, bool allow_two) {
  const int c = image.c();
  if (image.n() != 1 || !(c == 1 || c == 3 || (allow_two && c == 2))) {
    throw ShapeError(path.string() + ": cannot store image of shape " + image.shape().str());
  }
}

std::uint32_t quantize(double v, int bits) {
  const double maxv = bits == 16 ? 65535.0 : 255.0;
  const double q = std::round(std::clamp(v, 0.0, 1.0) * maxv);
  return static_cast<std::uint32_t>(q);
}

// Library diagnostics are collected here and reported through exceptions
// instead of being printed.
void png_on_error(png_structp png, png_const_charp msg) {
  *static_cast<std::string*>(png_get_error_ptr(png)) = msg;
  png_longjmp(png, 1);
}

void png_on_warning(png_structp, png_const_charp) {}

thread_local std::string tiff_message;

void tiff_on_error(const char* module, const char* fmt, va_list ap) {
  char buf[512];
  std::vsnprintf(buf, sizeof(buf), fmt, ap);
  tiff_message = module ? std::string(module) + ": " + buf : std::string(buf);
}

void tiff_on_warning(const char*, const char*, va_list) {}

void quiet_tiff() {
  static const bool once = [] {
    TIFFSetErrorHandler(tiff_on_error);
    TIFFSetWarningHandler(tiff_on_warning);
    return true;
  }();
  (void)once;
  tiff_message.clear();
}

std::string tiff_detail() { return tiff_message.empty() ? "" : " (" + tiff_message + ")"; }

TensorD read_png(const fs::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw LoadError(path.string() + ": cannot open");
  std::string message;
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, png_on_error, png_on_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) throw LoadError(path.string() + ": libpng init failed");
  std::vector<std::uint8_t> raw;
  std::vector<png_bytep> rows;
  int h = 0, w = 0, spp = 0, depth = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw LoadError(path.string() + ": corrupt PNG (" + message + ")");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_expand(png);  // palette/low-bit gray -> 8 bit, tRNS -> alpha
  depth = png_get_bit_depth(png, info) == 16 ? 16 : 8;
  if (depth == 16 && std::endian::native == std::endian::little) png_set_swap(png);
  png_read_update_info(png, info);
  h = static_cast<int>(png_get_image_height(png, info));
  w = static_cast<int>(png_get_image_width(png, info));
  spp = png_get_channels(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  raw.resize(rowbytes * h);
  rows.resize(h);
  for (int y = 0; y < h; ++y) rows[y] = raw.data() + rowbytes * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  if (depth == 16) {
    std::vector<std::uint16_t> buf(raw.size() / 2);
    std::memcpy(buf.data(), raw.data(), raw.size());
    return from_interleaved(buf, h, w, spp, 65535.0);
  }
  return from_interleaved(raw, h, w, spp, 255.0);
}

TensorD read_tiff(const fs::path& path) {
  quiet_tiff();
  std::unique_ptr<TIFF, void (*)(TIFF*)> tif(TIFFOpen(path.c_str(), "r"), &TIFFClose);
  if (!tif) throw LoadError(path.string() + ": cannot open TIFF" + tiff_detail());
  std::uint32_t w = 0, h = 0;
  std::uint16_t bps = 8, spp = 1, planar = PLANARCONFIG_CONTIG;
  TIFFGetField(tif.get(), TIFFTAG_IMAGEWIDTH, &w);
  TIFFGetField(tif.get(), TIFFTAG_IMAGELENGTH, &h);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_BITSPERSAMPLE, &bps);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLESPERPIXEL, &spp);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_PLANARCONFIG, &planar);
  if ((bps != 8 && bps != 16) || planar != PLANARCONFIG_CONTIG || spp < 1) {
    throw LoadError(path.string() + ": unsupported TIFF layout (need contiguous 8/16-bit)");
  }
  const std::size_t line = TIFFScanlineSize(tif.get());
  std::vector<std::uint8_t> raw(line * h);
  for (std::uint32_t y = 0; y < h; ++y) {
    if (TIFFReadScanline(tif.get(), raw.data() + line * y, y) < 0) {
      throw LoadError(path.string() + ": TIFF read failed at row " + std::to_string(y) +
                      tiff_detail());
    }
  }
  if (bps == 16) {
    std::vector<std::uint16_t> buf(raw.size() / 2);
    std::memcpy(buf.data(), raw.data(), raw.size());
    return from_interleaved(buf, int(h), int(w), spp, 65535.0);
  }
  return from_interleaved(raw, int(h), int(w), spp, 255.0);
}

fs::path temp_sibling(const fs::path& path) {
  std::random_device rd;
  return path.parent_path() /
         (path.filename().string() + ".tmp" + std::to_string(rd() % 1000000));
}

void png_write_stream(png_structp png, png_bytep data, png_size_t len) {
  auto* os = static_cast<std::ostream*>(png_get_io_ptr(png));
  os->write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(len));
}

void png_flush_stream(png_structp png) {
  static_cast<std::ostream*>(png_get_io_ptr(png))->flush();
}

// Normalised line reader for the text headers of PFM and RGBE.
std::string read_line(std::istream& is) {
  std::string line;
  std::getline(is, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

void rgbe_from_float(double r, double g, double b, std::uint8_t* out) {
  const double v = std::max({r, g, b});
  if (v < 1e-32) {
    out[0] = out[1] = out[2] = out[3] = 0;
    return;
  }
  int e = 0;
  const double m = std::frexp(v, &e) * 256.0 / v;
  out[0] = static_cast<std::uint8_t>(std::max(0.0, r) * m);
  out[1] = static_cast<std::uint8_t>(std::max(0.0, g) * m);
  out[2] = static_cast<std::uint8_t>(std::max(0.0, b) * m);
  out[3] = static_cast<std::uint8_t>(e + 128);
}

void float_from_rgbe(const std::uint8_t* in, double* rgb) {
  if (in[3] == 0) {
    rgb[0] = rgb[1] = rgb[2] = 0;
    return;
  }
  const double f = std::ldexp(1.0, int(in[3]) - (128 + 8));
  for (int c = 0; c < 3; ++c) rgb[c] = (in[c] + 0.5) * f;
}

}  // namespace

TensorD read_ldr(const fs::path& path) {
  if (!fs::exists(path)) throw LoadError(path.string() + ": file not found");
  const std::string ext = lower_ext(path);
  if (ext == ".png") return read_png(path);
  if (ext == ".tif" || ext == ".tiff") return read_tiff(path);
  throw LoadError(path.string() + ": unsupported image format (expected .png or .tif)");
}

void write_png(const fs::path& path, const TensorD& image, int bit_depth) {
  require_channels(image, path, false);
  if (bit_depth != 8 && bit_depth != 16) throw IoError("PNG bit depth must be 8 or 16");
  const int h = image.h(), w = image.w(), c = image.c();
  const int bytes = bit_depth / 8;
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(h) * w * c * bytes);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int k = 0; k < c; ++k) {
        const std::uint32_t q = quantize(image.at(0, k, y, x), bit_depth);
        std::uint8_t* dst = &raw[((static_cast<std::size_t>(y) * w + x) * c + k) * bytes];
        if (bytes == 2) {
          dst[0] = static_cast<std::uint8_t>(q >> 8);  // PNG is big-endian
          dst[1] = static_cast<std::uint8_t>(q & 0xff);
        } else {
          dst[0] = static_cast<std::uint8_t>(q);
        }
      }
    }
  }
  write_atomically(path, [&](std::ostream& os) {
    std::string message;
    png_structp png =
        png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, png_on_error, png_on_warning);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) throw IoError(path.string() + ": libpng init failed");
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      throw IoError(path.string() + ": PNG encode failed (" + message + ")");
    }
    png_set_write_fn(png, &os, png_write_stream, png_flush_stream);
    png_set_IHDR(png, info, w, h, bit_depth, c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t rowbytes = static_cast<std::size_t>(w) * c * bytes;
    for (int y = 0; y < h; ++y) png_write_row(png, raw.data() + rowbytes * y);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  });
}

void write_tiff(const fs::path& path, const TensorD& image, int bit_depth) {
  require_channels(image, path, false);
  if (bit_depth != 8 && bit_depth != 16) throw IoError("TIFF bit depth must be 8 or 16");
  const int h = image.h(), w = image.w(), c = image.c();
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  const fs::path tmp = temp_sibling(path);
  quiet_tiff();
  {
    std::unique_ptr<TIFF, void (*)(TIFF*)> tif(TIFFOpen(tmp.c_str(), "w"), &TIFFClose);
    if (!tif) throw IoError(path.string() + ": cannot open for writing" + tiff_detail());
    TIFFSetField(tif.get(), TIFFTAG_IMAGEWIDTH, std::uint32_t(w));
    TIFFSetField(tif.get(), TIFFTAG_IMAGELENGTH, std::uint32_t(h));
    TIFFSetField(tif.get(), TIFFTAG_BITSPERSAMPLE, std::uint16_t(bit_depth));
    TIFFSetField(tif.get(), TIFFTAG_SAMPLESPERPIXEL, std::uint16_t(c));
    TIFFSetField(tif.get(), TIFFTAG_PLANARCONFIG, PLANARCONFIG_CONTIG);
    TIFFSetField(tif.get(), TIFFTAG_PHOTOMETRIC, c == 3 ? PHOTOMETRIC_RGB : PHOTOMETRIC_MINISBLACK);
    TIFFSetField(tif.get(), TIFFTAG_ROWSPERSTRIP, std::uint32_t(1));
    std::vector<std::uint8_t> line8(static_cast<std::size_t>(w) * c);
    std::vector<std::uint16_t> line16(static_cast<std::size_t>(w) * c);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int k = 0; k < c; ++k) {
          const std::uint32_t q = quantize(image.at(0, k, y, x), bit_depth);
          line8[x * c + k] = static_cast<std::uint8_t>(q);
          line16[x * c + k] = static_cast<std::uint16_t>(q);
        }
      }
      void* buf = bit_depth == 16 ? static_cast<void*>(line16.data()) : line8.data();
      if (TIFFWriteScanline(tif.get(), buf, y) < 0) {
        tif.reset();
        fs::remove(tmp, ec);
        throw IoError(path.string() + ": TIFF write failed" + tiff_detail());
      }
    }
  }
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError(path.string() + ": cannot move temporary file into place");
  }
}

void write_pfm(const fs::path& path, const TensorD& image) {
  require_channels(image, path, true);
  const int h = image.h(), w = image.w(), c = image.c();
  const int fc = c == 1 ? 1 : 3;
  std::vector<float> data(static_cast<std::size_t>(h) * w * fc, 0.0f);
  for (int y = 0; y < h; ++y) {
    const int row = h - 1 - y;  // bottom-up
    for (int x = 0; x < w; ++x) {
      for (int k = 0; k < c; ++k) {
        data[(static_cast<std::size_t>(row) * w + x) * fc + k] =
            static_cast<float>(image.at(0, k, y, x));
      }
    }
  }
  static_assert(std::endian::native == std::endian::little);
  write_atomically(path, [&](std::ostream& os) {
    os << (fc == 3 ? "PF" : "Pf") << '\n' << w << ' ' << h << '\n' << "-1.0" << '\n';
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(float)));
  });
}

TensorD read_pfm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError(path.string() + ": cannot open");
  const std::string tag = read_line(is);
  int fc = 0;
  if (tag == "PF") fc = 3;
  else if (tag == "Pf") fc = 1;
  else throw LoadError(path.string() + ": not a PFM file");
  int w = 0, h = 0;
  double scale = 0;
  {
    std::string dims = read_line(is);
    std::istringstream ds(dims);
    if (!(ds >> w >> h)) throw LoadError(path.string() + ": bad PFM dimensions");
    std::istringstream ss(read_line(is));
    if (!(ss >> scale) || scale == 0) throw LoadError(path.string() + ": bad PFM scale");
  }
  if (w <= 0 || h <= 0) throw LoadError(path.string() + ": bad PFM dimensions");
  std::vector<float> data(static_cast<std::size_t>(h) * w * fc);
  if (!is.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(data.size() * sizeof(float)))) {
    throw LoadError(path.string() + ": truncated PFM data");
  }
  if (scale > 0) {  // big-endian payload
    for (auto& f : data) f = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(f)));
  }
  TensorD out({1, fc, h, w});
  for (int y = 0; y < h; ++y) {
    const int row = h - 1 - y;
    for (int x = 0; x < w; ++x) {
      for (int k = 0; k < fc; ++k) {
        out.at(0, k, y, x) = data[(static_cast<std::size_t>(row) * w + x) * fc + k];
      }
    }
  }
  return out;
}

void write_rgbe(const fs::path& path, const TensorD& image) {
  if (image.n() != 1 || image.c() != 3) {
    throw ShapeError(path.string() + ": RGBE needs a 1x3xHxW image, got " + image.shape().str());
  }
  const int h = image.h(), w = image.w();
  std::vector<std::uint8_t> data(static_cast<std::size_t>(h) * w * 4);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      rgbe_from_float(image.at(0, 0, y, x), image.at(0, 1, y, x), image.at(0, 2, y, x),
                      &data[(static_cast<std::size_t>(y) * w + x) * 4]);
    }
  }
  write_atomically(path, [&](std::ostream& os) {
    os << "#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y " << h << " +X " << w << '\n';
    os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  });
}

TensorD read_rgbe(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError(path.string() + ": cannot open");
  std::string line = read_line(is);
  if (line.rfind("#?", 0) != 0) throw LoadError(path.string() + ": not a Radiance file");
  while (is) {
    line = read_line(is);
    if (line.empty()) break;
    if (line.rfind("FORMAT=", 0) == 0 && line != "FORMAT=32-bit_rle_rgbe") {
      throw LoadError(path.string() + ": unsupported Radiance format " + line.substr(7));
    }
  }
  int h = 0, w = 0;
  {
    std::istringstream rs(read_line(is));
    std::string ya, xa;
    if (!(rs >> ya >> h >> xa >> w) || ya != "-Y" || xa != "+X" || h <= 0 || w <= 0) {
      throw LoadError(path.string() + ": unsupported Radiance resolution line");
    }
  }
  std::vector<std::uint8_t> scan(static_cast<std::size_t>(w) * 4);
  TensorD out({1, 3, h, w});
  auto fail = [&]() { throw LoadError(path.string() + ": truncated or corrupt RGBE data"); };
  auto byte = [&]() {
    const int v = is.get();
    if (v == EOF) fail();
    return static_cast<std::uint8_t>(v);
  };
  for (int y = 0; y < h; ++y) {
    std::uint8_t head[4];
    for (auto& b : head) b = byte();
    const bool rle = w >= 8 && w < 32768 && head[0] == 2 && head[1] == 2 && !(head[2] & 0x80) &&
                     ((head[2] << 8) | head[3]) == w;
    if (rle) {
      for (int k = 0; k < 4; ++k) {
        int x = 0;
        while (x < w) {
          int count = byte();
          if (count > 128) {
            count -= 128;
            if (x + count > w) fail();
            const std::uint8_t v = byte();
            for (int i = 0; i < count; ++i) scan[(x++) * 4 + k] = v;
          } else {
            if (count == 0 || x + count > w) fail();
            for (int i = 0; i < count; ++i) scan[(x++) * 4 + k] = byte();
          }
        }
      }
    } else {
      std::memcpy(scan.data(), head, 4);
      if (!is.read(reinterpret_cast<char*>(scan.data() + 4), static_cast<std::streamsize>(w - 1) * 4)) {
        fail();
      }
    }
    for (int x = 0; x < w; ++x) {
      double rgb[3];
      float_from_rgbe(&scan[x * 4], rgb);
      for (int c = 0; c < 3; ++c) out.at(0, c, y, x) = rgb[c];
    }
  }
  return out;
}

TensorD read_hdr_image(const fs::path& path) {
  if (!fs::exists(path)) throw LoadError(path.string() + ": file not found");
  const std::string ext = lower_ext(path);
  if (ext == ".pfm") return read_pfm(path);
  if (ext == ".hdr" || ext == ".rgbe" || ext == ".pic") return read_rgbe(path);
  throw LoadError(path.string() + ": unsupported HDR format (expected .hdr or .pfm)");
}

}  // namespace safnet::io
