#include "cvrnet/image.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "cvrnet/rng.hpp"

namespace cvrnet {

namespace {

constexpr char kSidecarMagic[4] = {'C', 'V', 'R', 'T'};

// Header tokens may be separated by whitespace and '#' comments.
int next_header_int(std::istream& in, const std::string& path) {
  for (;;) {
    const int c = in.peek();
    if (c == EOF) throw FormatError("truncated netpbm header: " + path);
    if (c == '#') {
      std::string comment;
      std::getline(in, comment);
      continue;
    }
    if (std::isspace(c)) {
      in.get();
      continue;
    }
    break;
  }
  int value = 0;
  if (!(in >> value)) throw FormatError("malformed netpbm header: " + path);
  return value;
}

Tensor decode_netpbm(std::ifstream& in, const std::string& path, bool color) {
  const int w = next_header_int(in, path);
  const int h = next_header_int(in, path);
  const int maxval = next_header_int(in, path);
  if (w < 1 || h < 1) throw FormatError("invalid netpbm dimensions in " + path);
  if (maxval < 1 || maxval > 255) {
    throw FormatError("unsupported netpbm maxval " + std::to_string(maxval) + " in " + path +
                      " (8-bit only)");
  }
  in.get();  // single whitespace byte before the payload

  const std::size_t channels = color ? 3 : 1;
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
    throw FormatError("truncated netpbm payload: " + path);
  }

  Tensor img({1, h, w, 3});
  const float scale = 1.0f / static_cast<float>(maxval);
  for (std::int64_t r = 0; r < h; ++r) {
    for (std::int64_t c = 0; c < w; ++c) {
      const std::size_t base = (static_cast<std::size_t>(r) * w + c) * channels;
      if (color) {
        img(0, r, c, 0) = raw[base + 0] * scale;
        img(0, r, c, 1) = raw[base + 1] * scale;
        img(0, r, c, 2) = raw[base + 2] * scale;
      } else {
        const float v = raw[base] * scale;
        img(0, r, c, 0) = v;
        img(0, r, c, 1) = v;
        img(0, r, c, 2) = v;
      }
    }
  }
  return img;
}

std::uint32_t read_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) throw FormatError("truncated tensor file: " + path);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff),
                              static_cast<unsigned char>((v >> 16) & 0xff),
                              static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

Tensor decode_sidecar(std::ifstream& in, const std::string& path) {
  const std::uint32_t version = read_u32(in, path);
  if (version != 1) throw FormatError("unsupported tensor file version in " + path);
  const std::uint32_t name_len = read_u32(in, path);
  std::string name(name_len, '\0');
  in.read(name.data(), name_len);
  if (static_cast<std::uint32_t>(in.gcount()) != name_len)
    throw FormatError("truncated tensor file: " + path);
  const std::uint32_t rank = read_u32(in, path);
  if (rank != 3) throw FormatError("image tensor must have rank 3 (HxWxC): " + path);
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(read_u32(in, path));
  const std::int64_t c = shape[2];
  if (c != 1 && c != 3) throw FormatError("image tensor channels must be 1 or 3: " + path);
  const std::int64_t n = shape_numel(shape);
  std::vector<float> payload(static_cast<std::size_t>(n));
  in.read(reinterpret_cast<char*>(payload.data()), n * 4);
  if (in.gcount() != n * 4) throw FormatError("truncated tensor payload: " + path);

  Tensor img({1, shape[0], shape[1], 3});
  for (std::int64_t r = 0; r < shape[0]; ++r) {
    for (std::int64_t col = 0; col < shape[1]; ++col) {
      const float* src = payload.data() + (r * shape[1] + col) * c;
      for (std::int64_t ch = 0; ch < 3; ++ch) img(0, r, col, ch) = src[c == 1 ? 0 : ch];
    }
  }
  return img;
}

}  // namespace

Tensor decode_image_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image: " + path);
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (in.gcount() != 2) throw FormatError("file too short: " + path);
  if (magic[0] == 'P' && magic[1] == '5') return decode_netpbm(in, path, false);
  if (magic[0] == 'P' && magic[1] == '6') return decode_netpbm(in, path, true);
  if (magic[0] == 'C' && magic[1] == 'V') {
    char rest[2] = {0, 0};
    in.read(rest, 2);
    if (in.gcount() == 2 && rest[0] == 'R' && rest[1] == 'T') return decode_sidecar(in, path);
  }
  throw FormatError("unrecognized image format (want P5/P6 netpbm or CVRT tensor): " + path);
}

Tensor resize_nearest(const Tensor& img, std::int64_t out_h, std::int64_t out_w) {
  if (img.rank() != 4) throw ShapeError("resize expects 1xHxWxC input");
  if (out_h < 1 || out_w < 1) throw ValueError("resize target must be >= 1");
  const std::int64_t h = img.dim(1), w = img.dim(2), c = img.dim(3);
  if (h == out_h && w == out_w) return img;
  Tensor out({img.dim(0), out_h, out_w, c});
  for (std::int64_t r = 0; r < out_h; ++r) {
    const std::int64_t sr = static_cast<std::int64_t>(
        std::floor((static_cast<double>(r) + 0.5) * static_cast<double>(h) / static_cast<double>(out_h)));
    for (std::int64_t col = 0; col < out_w; ++col) {
      const std::int64_t sc = static_cast<std::int64_t>(std::floor(
          (static_cast<double>(col) + 0.5) * static_cast<double>(w) / static_cast<double>(out_w)));
      for (std::int64_t ch = 0; ch < c; ++ch) out(0, r, col, ch) = img(0, sr, sc, ch);
    }
  }
  return out;
}

Tensor load_and_resize(const std::string& path, std::int64_t out_h, std::int64_t out_w) {
  return resize_nearest(decode_image_file(path), out_h, out_w);
}

Tensor augment(const Tensor& img, const AugmentConfig& config, std::uint64_t per_sample_seed) {
  config.validate();
  if (img.rank() != 4 || img.dim(0) != 1) throw ShapeError("augment expects a 1xHxWxC image");
  const std::int64_t h = img.dim(1), w = img.dim(2), c = img.dim(3);

  Rng rng(per_sample_seed);
  const double theta_deg = rng.uniform(-config.rotation_deg_max, config.rotation_deg_max);
  const double shift_r = rng.uniform(-config.shift_frac_max, config.shift_frac_max) * static_cast<double>(h);
  const double shift_c = rng.uniform(-config.shift_frac_max, config.shift_frac_max) * static_cast<double>(w);
  const bool hflip = rng.uniform() < config.hflip_prob;
  const bool vflip = rng.uniform() < config.vflip_prob;

  if (theta_deg == 0.0 && shift_r == 0.0 && shift_c == 0.0 && !hflip && !vflip) return img;

  const double theta = theta_deg * 3.14159265358979323846 / 180.0;
  const double ct = std::cos(theta), st = std::sin(theta);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;

  Tensor out({1, h, w, c});
  for (std::int64_t r = 0; r < h; ++r) {
    for (std::int64_t col = 0; col < w; ++col) {
      // invert flips first, then the shifted rotation about the center
      const std::int64_t rr = vflip ? h - 1 - r : r;
      const std::int64_t cc = hflip ? w - 1 - col : col;
      const double ys = static_cast<double>(rr) - cy - shift_r;
      const double xs = static_cast<double>(cc) - cx - shift_c;
      const double src_x = ct * xs + st * ys + cx;
      const double src_y = -st * xs + ct * ys + cy;
      const std::int64_t sr = static_cast<std::int64_t>(std::floor(src_y + 0.5));
      const std::int64_t sc = static_cast<std::int64_t>(std::floor(src_x + 0.5));
      if (sr < 0 || sr >= h || sc < 0 || sc >= w) continue;  // out of frame -> 0
      for (std::int64_t ch = 0; ch < c; ++ch) out(0, r, col, ch) = img(0, sr, sc, ch);
    }
  }
  return out;
}

void write_image_sidecar(const std::string& path, const Tensor& hwc) {
  if (hwc.rank() != 3) throw ShapeError("sidecar image tensor must be HxWxC");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write tensor file: " + path);
  out.write(kSidecarMagic, 4);
  write_u32(out, 1);  // version
  const std::string name = "image";
  write_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u32(out, 3);
  for (int i = 0; i < 3; ++i) write_u32(out, static_cast<std::uint32_t>(hwc.dim(i)));
  out.write(reinterpret_cast<const char*>(hwc.data()),
            static_cast<std::streamsize>(hwc.numel()) * 4);
  if (!out) throw IoError("failed writing tensor file: " + path);
}

void write_netpbm(const std::string& path, const Tensor& img) {
  std::int64_t h = 0, w = 0, c = 0;
  if (img.rank() == 4 && img.dim(0) == 1) {
    h = img.dim(1);
    w = img.dim(2);
    c = img.dim(3);
  } else if (img.rank() == 3) {
    h = img.dim(0);
    w = img.dim(1);
    c = img.dim(2);
  } else {
    throw ShapeError("netpbm writer expects HxWxC or 1xHxWxC");
  }
  if (c != 1 && c != 3) throw ShapeError("netpbm writer expects 1 or 3 channels");

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write image: " + path);
  out << (c == 1 ? "P5" : "P6") << "\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> raw(static_cast<std::size_t>(h * w * c));
  const float* src = img.data();
  for (std::size_t i = 0; i < raw.size(); ++i) {
    float v = src[i];
    v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    raw[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("failed writing image: " + path);
}

}  // namespace cvrnet
