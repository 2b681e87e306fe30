#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pluralfill/array.hpp"

namespace pluralfill {

/// 8-bit RGB image, interleaved HWC.
struct Rgb8 {
  int64_t width = 0;
  int64_t height = 0;
  std::vector<uint8_t> pixels;
};

Rgb8 decode_png(std::span<const uint8_t> bytes);
std::vector<uint8_t> encode_png(const Rgb8& img);
/// Any PNG; pixels with luminance >= 128 are visible (1). Returns [H,W].
Array decode_mask_png(std::span<const uint8_t> bytes);
/// 1-bit grayscale PNG, white = visible.
std::vector<uint8_t> encode_mask_png(const Array& bitmap);

/// [3,H,W] in [-1,1] <-> 8-bit RGB (round to nearest).
Array to_float(const Rgb8& img);
Rgb8 to_rgb8(const Array& img);
uint8_t quantize_u8(float v);

std::vector<uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes);

/// Every *.png under `dir` (sorted by filename), resized to size x size.
std::vector<Array> load_png_directory(const std::filesystem::path& dir, int64_t size);

std::string base64_encode(std::span<const uint8_t> bytes);
/// Throws Error on characters outside the standard alphabet or bad padding.
std::vector<uint8_t> base64_decode(const std::string& text);

/// Half-pixel-centred bilinear resize of [C,H,W].
Array resize_bilinear(const Array& img, int64_t H, int64_t W);
/// Box average over factor x factor blocks of [C,H,W].
Array downsample_area(const Array& img, int64_t factor);
/// A coarse pixel is visible only if every covered pixel is visible.
Array downsample_mask(const Array& bitmap, int64_t factor);
/// One of the 8 square symmetries of [C,H,W]: k & 3 quarter turns, then a
/// horizontal flip when k & 4.
Array dihedral(const Array& img, int k);
/// Any-ratio mask resize. A target pixel is hidden if a source pixel that
/// lands in it, or its nearest source pixel, is hidden.
Array resample_mask(const Array& bitmap, int64_t H, int64_t W);

}  // namespace pluralfill
