#include "dapo/png_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dapo {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) |
         (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

void write_chunk(std::vector<std::uint8_t>& out, const char type[4],
                 const std::vector<std::uint8_t>& payload) {
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0, out.data() + crc_start, static_cast<uInt>(4 + payload.size())));
  put_u32(out, crc);
}

std::vector<std::uint8_t> zlib_compress(const std::vector<std::uint8_t>& in) {
  uLongf bound = compressBound(static_cast<uLong>(in.size()));
  std::vector<std::uint8_t> out(bound);
  if (compress2(out.data(), &bound, in.data(), static_cast<uLong>(in.size()), 6) != Z_OK)
    throw std::runtime_error("png: deflate failed");
  out.resize(bound);
  return out;
}

std::vector<std::uint8_t> zlib_decompress(const std::vector<std::uint8_t>& in,
                                          std::size_t expected) {
  std::vector<std::uint8_t> out(expected);
  uLongf n = static_cast<uLongf>(expected);
  if (uncompress(out.data(), &n, in.data(), static_cast<uLong>(in.size())) != Z_OK ||
      n != expected)
    throw std::runtime_error("png: inflate failed");
  return out;
}

int paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

const std::uint8_t kSignature[8] = {137, 80, 78, 71, 13, 10, 26, 10};

}  // namespace

void write_png(const std::string& path, const PngImage& img) {
  if (img.width <= 0 || img.height <= 0)
    throw std::invalid_argument("png: empty image for " + path);
  int ch = img.indexed ? 1 : img.channels;
  if (static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height) * ch !=
      img.pixels.size())
    throw std::invalid_argument("png: pixel buffer size mismatch for " + path);

  std::vector<std::uint8_t> out(kSignature, kSignature + 8);

  std::vector<std::uint8_t> ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(img.width));
  put_u32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(img.indexed ? 3 : (img.channels == 3 ? 2 : 0));
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  write_chunk(out, "IHDR", ihdr);

  if (img.indexed) {
    if (img.palette.empty())
      throw std::invalid_argument("png: indexed image without palette for " + path);
    std::vector<std::uint8_t> plte;
    for (const auto& c : img.palette) {
      plte.push_back(c[0]);
      plte.push_back(c[1]);
      plte.push_back(c[2]);
    }
    write_chunk(out, "PLTE", plte);
  }

  std::size_t stride = static_cast<std::size_t>(img.width) * ch;
  std::vector<std::uint8_t> raw;
  raw.reserve((stride + 1) * static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), img.pixels.begin() + static_cast<long>(y * stride),
               img.pixels.begin() + static_cast<long>((y + 1) * stride));
  }
  write_chunk(out, "IDAT", zlib_compress(raw));
  write_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("png: cannot write " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<long>(out.size()));
  if (!f) throw std::runtime_error("png: write failed for " + path);
}

PngImage read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("png: cannot open " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  if (buf.size() < 8 || std::memcmp(buf.data(), kSignature, 8) != 0)
    throw std::runtime_error("png: bad signature in " + path);

  PngImage img;
  std::vector<std::uint8_t> idat;
  int color_type = -1;
  std::size_t pos = 8;
  while (pos + 8 <= buf.size()) {
    std::uint32_t len = get_u32(buf.data() + pos);
    if (pos + 12 + len > buf.size())
      throw std::runtime_error("png: truncated chunk in " + path);
    std::string type(reinterpret_cast<const char*>(buf.data() + pos + 4), 4);
    const std::uint8_t* payload = buf.data() + pos + 8;
    if (type == "IHDR") {
      img.width = static_cast<int>(get_u32(payload));
      img.height = static_cast<int>(get_u32(payload + 4));
      int bit_depth = payload[8];
      color_type = payload[9];
      if (bit_depth != 8 || payload[12] != 0)
        throw std::runtime_error("png: unsupported format in " + path);
      if (color_type == 0) img.channels = 1;
      else if (color_type == 2) img.channels = 3;
      else if (color_type == 3) {
        img.channels = 1;
        img.indexed = true;
      } else
        throw std::runtime_error("png: unsupported color type in " + path);
    } else if (type == "PLTE") {
      for (std::uint32_t i = 0; i + 2 < len; i += 3)
        img.palette.push_back({payload[i], payload[i + 1], payload[i + 2]});
    } else if (type == "IDAT") {
      idat.insert(idat.end(), payload, payload + len);
    } else if (type == "IEND") {
      break;
    }
    pos += 12 + len;
  }
  if (img.width <= 0 || img.height <= 0 || color_type < 0)
    throw std::runtime_error("png: missing IHDR in " + path);

  int ch = img.channels;
  std::size_t stride = static_cast<std::size_t>(img.width) * ch;
  std::vector<std::uint8_t> raw =
      zlib_decompress(idat, (stride + 1) * static_cast<std::size_t>(img.height));

  img.pixels.assign(stride * static_cast<std::size_t>(img.height), 0);
  std::vector<std::uint8_t> prev(stride, 0);
  for (int y = 0; y < img.height; ++y) {
    const std::uint8_t* src = raw.data() + static_cast<std::size_t>(y) * (stride + 1);
    std::uint8_t filter = src[0];
    std::uint8_t* dst = img.pixels.data() + static_cast<std::size_t>(y) * stride;
    for (std::size_t x = 0; x < stride; ++x) {
      int a = x >= static_cast<std::size_t>(ch) ? dst[x - ch] : 0;
      int b = prev[x];
      int c = x >= static_cast<std::size_t>(ch) ? prev[x - ch] : 0;
      int v = src[1 + x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default:
          throw std::runtime_error("png: bad filter byte in " + path);
      }
      dst[x] = static_cast<std::uint8_t>(v);
    }
    std::memcpy(prev.data(), dst, stride);
  }
  return img;
}

}  // namespace dapo
