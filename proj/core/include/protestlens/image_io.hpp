#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "protestlens/csv.hpp"
#include "protestlens/error.hpp"
#include "protestlens/tensor.hpp"

namespace protestlens {

struct RawImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> rgb;  // H*W*3, row-major, values in [0,1]
};

namespace detail {

inline void skip_ppm_space(std::istream& in) {
  int ch;
  while ((ch = in.peek()) != EOF) {
    if (ch == '#') {
      std::string comment;
      std::getline(in, comment);
    } else if (std::isspace(ch)) {
      in.get();
    } else {
      break;
    }
  }
}

inline std::uint32_t read_u32_le(std::istream& in, const std::string& path) {
  unsigned char buf[4];
  if (!in.read(reinterpret_cast<char*>(buf), 4)) {
    throw DataError("truncated header in " + path);
  }
  return std::uint32_t(buf[0]) | (std::uint32_t(buf[1]) << 8) |
         (std::uint32_t(buf[2]) << 16) | (std::uint32_t(buf[3]) << 24);
}

}  // namespace detail

/// Binary PPM (P6), maxval up to 255, comments allowed in the header.
inline RawImage decode_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw DataError("not a P6 PPM file: " + path);
  detail::skip_ppm_space(in);
  std::size_t w = 0, h = 0;
  long maxval = 0;
  in >> w;
  detail::skip_ppm_space(in);
  in >> h;
  detail::skip_ppm_space(in);
  in >> maxval;
  if (!in || w == 0 || h == 0) throw DataError("bad PPM dimensions in " + path);
  if (maxval <= 0 || maxval > 255) {
    throw DataError("unsupported PPM maxval " + std::to_string(maxval) + " in " + path);
  }
  in.get();  // the single whitespace byte before the raster
  std::vector<unsigned char> raw(w * h * 3);
  if (!in.read(reinterpret_cast<char*>(raw.data()),
               static_cast<std::streamsize>(raw.size()))) {
    throw DataError("truncated PPM raster in " + path);
  }
  RawImage img;
  img.height = h;
  img.width = w;
  img.rgb.resize(raw.size());
  const float inv = 1.0f / static_cast<float>(maxval);
  for (std::size_t i = 0; i < raw.size(); ++i) img.rgb[i] = raw[i] * inv;
  return img;
}

/// Raw tensor image: magic "PLIM", u32 H, u32 W, u32 C, then H*W*C
/// little-endian f32 in [0,1].
inline RawImage decode_plim(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image: " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "PLIM", 4) != 0) {
    throw DataError("not a PLIM file: " + path);
  }
  const std::uint32_t h = detail::read_u32_le(in, path);
  const std::uint32_t w = detail::read_u32_le(in, path);
  const std::uint32_t c = detail::read_u32_le(in, path);
  if (c != 3) {
    throw DataError("PLIM channel count " + std::to_string(c) + " != 3 in " + path);
  }
  if (h == 0 || w == 0 || std::uint64_t(h) * w > (1u << 26)) {
    throw DataError("bad PLIM dimensions " + std::to_string(h) + "x" +
                    std::to_string(w) + " in " + path);
  }
  RawImage img;
  img.height = h;
  img.width = w;
  img.rgb.resize(std::size_t(h) * w * c);
  if (!in.read(reinterpret_cast<char*>(img.rgb.data()),
               static_cast<std::streamsize>(img.rgb.size() * sizeof(float)))) {
    throw DataError("truncated PLIM payload in " + path);
  }
  for (float& v : img.rgb) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

inline void write_plim(const std::string& path, const RawImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image: " + path);
  out.write("PLIM", 4);
  auto put_u32 = [&](std::uint32_t v) {
    unsigned char buf[4] = {static_cast<unsigned char>(v & 0xff),
                            static_cast<unsigned char>((v >> 8) & 0xff),
                            static_cast<unsigned char>((v >> 16) & 0xff),
                            static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<char*>(buf), 4);
  };
  put_u32(static_cast<std::uint32_t>(img.height));
  put_u32(static_cast<std::uint32_t>(img.width));
  put_u32(3);
  out.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size() * sizeof(float)));
  if (!out) throw DataError("failed writing image: " + path);
}

/// Bilinear resample with half-pixel centers.
inline RawImage bilinear_resize(const RawImage& src, std::size_t out_h,
                                std::size_t out_w) {
  RawImage dst;
  dst.height = out_h;
  dst.width = out_w;
  dst.rgb.resize(out_h * out_w * 3);
  const double sy = double(src.height) / double(out_h);
  const double sx = double(src.width) / double(out_w);
  for (std::size_t r = 0; r < out_h; ++r) {
    double fy = (r + 0.5) * sy - 0.5;
    fy = std::max(0.0, std::min(fy, double(src.height - 1)));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - double(y0);
    for (std::size_t c = 0; c < out_w; ++c) {
      double fx = (c + 0.5) * sx - 0.5;
      fx = std::max(0.0, std::min(fx, double(src.width - 1)));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - double(x0);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v00 = src.rgb[(y0 * src.width + x0) * 3 + ch];
        const double v01 = src.rgb[(y0 * src.width + x1) * 3 + ch];
        const double v10 = src.rgb[(y1 * src.width + x0) * 3 + ch];
        const double v11 = src.rgb[(y1 * src.width + x1) * 3 + ch];
        const double top = v00 + (v01 - v00) * wx;
        const double bot = v10 + (v11 - v10) * wx;
        dst.rgb[(r * out_w + c) * 3 + ch] = static_cast<float>(top + (bot - top) * wy);
      }
    }
  }
  return dst;
}

/// Decode by sniffing the leading magic bytes, resize to the square model
/// resolution, return [size x size x 3].
inline Tensor<float> load_image(const std::string& path, std::size_t image_size) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw DataError("cannot open image: " + path);
  char head[4] = {0, 0, 0, 0};
  probe.read(head, 4);
  probe.close();
  RawImage img;
  if (std::memcmp(head, "PLIM", 4) == 0) {
    img = decode_plim(path);
  } else if (head[0] == 'P' && head[1] == '6') {
    img = decode_ppm(path);
  } else {
    throw DataError("unrecognized image format (want PPM P6 or PLIM): " + path);
  }
  if (img.height != image_size || img.width != image_size) {
    img = bilinear_resize(img, image_size, image_size);
  }
  return Tensor<float>::from({image_size, image_size, 3}, std::move(img.rgb));
}

struct ImageLabelRow {
  std::string path;
  std::vector<std::string> names;   // column order from the manifest header
  std::vector<float> values;        // aligned with names
  std::vector<float> present;       // 1 = labeled, 0 = blank cell (masked)
};

/// Label manifest: header `path,<attr>,<attr>,...`; blank cells mean the
/// attribute is unlabeled and must be masked out of the loss.
inline std::vector<ImageLabelRow> load_image_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image manifest: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty image manifest: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header = parse_csv_line(line);
  if (header.empty() || header[0] != "path") {
    throw DataError("image manifest must start with a 'path' column: " + path);
  }
  std::vector<std::string> attr_names(header.begin() + 1, header.end());
  std::vector<ImageLabelRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields = parse_csv_line(line);
    if (fields.size() != header.size()) {
      throw DataError("image manifest line " + std::to_string(lineno) + " has " +
                      std::to_string(fields.size()) + " fields, expected " +
                      std::to_string(header.size()));
    }
    ImageLabelRow row;
    row.path = fields[0];
    row.names = attr_names;
    for (std::size_t i = 1; i < fields.size(); ++i) {
      if (fields[i].empty()) {
        row.values.push_back(0.0f);
        row.present.push_back(0.0f);
        continue;
      }
      try {
        const float v = std::stof(fields[i]);
        if (v < 0.0f || v > 1.0f) {
          throw DataError("label value " + fields[i] + " outside [0,1] at line " +
                          std::to_string(lineno) + " of " + path);
        }
        row.values.push_back(v);
        row.present.push_back(1.0f);
      } catch (const std::invalid_argument&) {
        throw DataError("non-numeric label '" + fields[i] + "' at line " +
                        std::to_string(lineno) + " of " + path);
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace protestlens
