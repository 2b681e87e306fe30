#include "pluralfill/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>

#include "pluralfill/errors.hpp"

namespace pluralfill {

namespace {

void write_callback(png_structp png, png_bytep data, png_size_t n) {
  auto* out = static_cast<std::vector<uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + n);
}

void flush_callback(png_structp) {}

Rgb8 decode_rgb(std::span<const uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw Error("not a PNG image");
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw Error(std::string("png: ") + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  Rgb8 img;
  img.width = image.width;
  img.height = image.height;
  img.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw Error("png: " + msg);
  }
  return img;
}

// Rows must already be packed for (color_type, depth).
std::vector<uint8_t> encode(int64_t width, int64_t height, int color_type, int depth,
                            std::vector<std::vector<uint8_t>>& rows) {
  std::vector<uint8_t> out;
  std::vector<png_bytep> row_ptrs(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) row_ptrs[i] = rows[i].data();
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("png: out of memory");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("png: encoding failed");
  }
  png_set_write_fn(png, &out, write_callback, flush_callback);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, row_ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

}  // namespace

Rgb8 decode_png(std::span<const uint8_t> bytes) { return decode_rgb(bytes); }

std::vector<uint8_t> encode_png(const Rgb8& img) {
  if (img.width <= 0 || img.height <= 0 || img.pixels.size() != static_cast<size_t>(img.width * img.height * 3)) {
    throw ShapeError("encode_png: pixel buffer does not match dimensions");
  }
  std::vector<std::vector<uint8_t>> rows(static_cast<size_t>(img.height));
  for (int64_t y = 0; y < img.height; ++y) {
    rows[y].assign(img.pixels.begin() + y * img.width * 3, img.pixels.begin() + (y + 1) * img.width * 3);
  }
  return encode(img.width, img.height, PNG_COLOR_TYPE_RGB, 8, rows);
}

Array decode_mask_png(std::span<const uint8_t> bytes) {
  const Rgb8 img = decode_rgb(bytes);
  Array m({img.height, img.width});
  for (int64_t i = 0; i < img.width * img.height; ++i) {
    const int lum = (img.pixels[3 * i] + img.pixels[3 * i + 1] + img.pixels[3 * i + 2]) / 3;
    m[i] = lum >= 128 ? 1.0f : 0.0f;
  }
  return m;
}

std::vector<uint8_t> encode_mask_png(const Array& bitmap) {
  if (bitmap.rank() != 2) throw ShapeError("mask must be [H,W]");
  const int64_t H = bitmap.dim(0), W = bitmap.dim(1);
  std::vector<std::vector<uint8_t>> rows(static_cast<size_t>(H), std::vector<uint8_t>(static_cast<size_t>((W + 7) / 8)));
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x)
      if (bitmap[y * W + x] != 0.0f) rows[y][x / 8] |= static_cast<uint8_t>(0x80 >> (x % 8));
  return encode(W, H, PNG_COLOR_TYPE_GRAY, 1, rows);
}

uint8_t quantize_u8(float v) {
  const float s = std::round((std::clamp(v, -1.0f, 1.0f) + 1.0f) * 127.5f);
  return static_cast<uint8_t>(s);
}

Array to_float(const Rgb8& img) {
  const int64_t HW = img.width * img.height;
  Array out({3, img.height, img.width});
  for (int64_t i = 0; i < HW; ++i)
    for (int c = 0; c < 3; ++c) out[c * HW + i] = static_cast<float>(img.pixels[3 * i + c]) / 127.5f - 1.0f;
  return out;
}

Rgb8 to_rgb8(const Array& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("to_rgb8 expects [3,H,W], got " + shape_str(img.shape()));
  Rgb8 out{img.dim(2), img.dim(1), {}};
  const int64_t HW = out.width * out.height;
  out.pixels.resize(static_cast<size_t>(HW * 3));
  for (int64_t i = 0; i < HW; ++i)
    for (int c = 0; c < 3; ++c) out.pixels[3 * i + c] = quantize_u8(img[c * HW + i]);
  return out;
}

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("cannot write " + path.string());
}

std::vector<Array> load_png_directory(const std::filesystem::path& dir, int64_t size) {
  if (!std::filesystem::is_directory(dir)) throw NotFoundError("image directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    if (e.is_regular_file() && ext == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Array> out;
  for (const auto& f : files) {
    Array img = to_float(decode_png(read_file(f)));
    const int64_t H = img.dim(1), W = img.dim(2);
    if (H % size == 0 && W % size == 0 && H / size == W / size && H > size) {
      img = downsample_area(img, H / size);
    } else if (H != size || W != size) {
      img = resize_bilinear(img, size, size);
    }
    out.push_back(std::move(img));
  }
  return out;
}

std::string base64_encode(std::span<const uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kB64[v >> 18];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += kB64[v & 63];
  }
  if (i + 1 == bytes.size()) {
    const uint32_t v = bytes[i] << 16;
    out += kB64[v >> 18];
    out += kB64[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == bytes.size()) {
    const uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += kB64[v >> 18];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::vector<uint8_t> base64_decode(const std::string& text) {
  int table[256];
  std::fill(std::begin(table), std::end(table), -1);
  for (int i = 0; i < 64; ++i) table[static_cast<uint8_t>(kB64[i])] = i;

  std::string s;
  s.reserve(text.size());
  for (char c : text) {
    if (c != '\n' && c != '\r' && c != ' ') s += c;
  }
  // Tolerate a data-URL prefix.
  if (s.rfind("data:", 0) == 0) {
    const auto comma = s.find(',');
    if (comma == std::string::npos) throw Error("base64: malformed data URL");
    s = s.substr(comma + 1);
  }
  if (s.size() % 4 != 0) throw Error("base64: length is not a multiple of 4");
  std::vector<uint8_t> out;
  out.reserve(s.size() / 4 * 3);
  for (size_t i = 0; i < s.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = s[i + k];
      if (c == '=') {
        if (i + 4 != s.size() || k < 2) throw Error("base64: misplaced padding");
        v[k] = 0;
        ++pad;
      } else {
        if (pad) throw Error("base64: data after padding");
        v[k] = table[static_cast<uint8_t>(c)];
        if (v[k] < 0) throw Error("base64: invalid character");
      }
    }
    const uint32_t w = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<uint8_t>(w >> 16));
    if (pad < 2) out.push_back(static_cast<uint8_t>((w >> 8) & 0xFF));
    if (pad < 1) out.push_back(static_cast<uint8_t>(w & 0xFF));
  }
  return out;
}

Array resize_bilinear(const Array& img, int64_t H2, int64_t W2) {
  if (img.rank() != 3) throw ShapeError("resize expects [C,H,W]");
  const int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  Array out({C, H2, W2});
  const float sy = static_cast<float>(H) / static_cast<float>(H2), sx = static_cast<float>(W) / static_cast<float>(W2);
  for (int64_t y = 0; y < H2; ++y) {
    const float fy = std::clamp((static_cast<float>(y) + 0.5f) * sy - 0.5f, 0.0f, static_cast<float>(H - 1));
    const auto y0 = static_cast<int64_t>(fy);
    const int64_t y1 = std::min(y0 + 1, H - 1);
    const float ty = fy - static_cast<float>(y0);
    for (int64_t x = 0; x < W2; ++x) {
      const float fx = std::clamp((static_cast<float>(x) + 0.5f) * sx - 0.5f, 0.0f, static_cast<float>(W - 1));
      const auto x0 = static_cast<int64_t>(fx);
      const int64_t x1 = std::min(x0 + 1, W - 1);
      const float tx = fx - static_cast<float>(x0);
      for (int64_t c = 0; c < C; ++c) {
        const float* p = img.data().data() + c * H * W;
        const float top = p[y0 * W + x0] * (1 - tx) + p[y0 * W + x1] * tx;
        const float bot = p[y1 * W + x0] * (1 - tx) + p[y1 * W + x1] * tx;
        out[(c * H2 + y) * W2 + x] = top * (1 - ty) + bot * ty;
      }
    }
  }
  return out;
}

Array downsample_area(const Array& img, int64_t f) {
  if (img.rank() != 3) throw ShapeError("downsample expects [C,H,W]");
  const int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (f <= 0 || H % f || W % f) throw ShapeError("downsample factor must divide the image size");
  const int64_t h = H / f, w = W / f;
  Array out({C, h, w});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double s = 0.0;
        for (int64_t dy = 0; dy < f; ++dy)
          for (int64_t dx = 0; dx < f; ++dx) s += img[(c * H + y * f + dy) * W + x * f + dx];
        out[(c * h + y) * w + x] = static_cast<float>(s / static_cast<double>(f * f));
      }
  return out;
}

Array downsample_mask(const Array& bitmap, int64_t f) {
  if (bitmap.rank() != 2) throw ShapeError("mask must be [H,W]");
  const int64_t H = bitmap.dim(0), W = bitmap.dim(1);
  if (f <= 0 || H % f || W % f) throw ShapeError("downsample factor must divide the mask size");
  const int64_t h = H / f, w = W / f;
  Array out({h, w}, 1.0f);
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x)
      if (bitmap[y * W + x] == 0.0f) out[(y / f) * w + x / f] = 0.0f;
  return out;
}

Array dihedral(const Array& img, int k) {
  if (img.rank() != 3 || img.dim(1) != img.dim(2)) throw ShapeError("dihedral: expected square [C,H,W]");
  if (k < 0 || k > 7) throw ConfigError("dihedral: k must lie in [0, 7]");
  const int64_t C = img.dim(0), n = img.dim(1);
  Array out(img.shape());
  for (int64_t y = 0; y < n; ++y)
    for (int64_t x = 0; x < n; ++x) {
      int64_t sy = y, sx = k & 4 ? n - 1 - x : x;
      for (int r = 0; r < (k & 3); ++r) {
        const int64_t t = sy;
        sy = sx;
        sx = n - 1 - t;
      }
      for (int64_t c = 0; c < C; ++c) out[(c * n + y) * n + x] = img[(c * n + sy) * n + sx];
    }
  return out;
}

Array resample_mask(const Array& bitmap, int64_t h, int64_t w) {
  if (bitmap.rank() != 2) throw ShapeError("mask must be [H,W]");
  if (h <= 0 || w <= 0) throw ShapeError("resample_mask: target size must be positive");
  const int64_t H = bitmap.dim(0), W = bitmap.dim(1);
  Array out({h, w}, 1.0f);
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x)
      if (bitmap[y * W + x] == 0.0f) out[(y * h / H) * w + x * w / W] = 0.0f;
  for (int64_t ty = 0; ty < h; ++ty)
    for (int64_t tx = 0; tx < w; ++tx) {
      const int64_t sy = std::min(H - 1, (2 * ty + 1) * H / (2 * h)), sx = std::min(W - 1, (2 * tx + 1) * W / (2 * w));
      if (bitmap[sy * W + sx] == 0.0f) out[ty * w + tx] = 0.0f;
    }
  return out;
}

}  // namespace pluralfill
