#pragma once

#include <string>

#include "stereoinr/tensor.hpp"

namespace stereoinr {

// Images are Tensors of shape [h, w, 3], RGB, values in [0, 1].
using Image = Tensor;

Image load_png_rgb(const std::string& path);
void save_png_rgb(const Image& img, const std::string& path);

// 16-bit grayscale PNG holding a scaled scalar field: stored value =
// round(clamp(field * scale + offset, 0, 65535)).
Tensor load_png_u16(const std::string& path, double scale, double offset);
void save_png_u16(const Tensor& field, const std::string& path, double scale, double offset);

void save_png_mask(const Tensor& mask01, const std::string& path);

// Rec.601 luminance, [h, w].
Tensor luminance(const Image& img);

// Bilinear sample with continuous pixel coordinates (y, x), clamped to
// the image bounds. Works for any channel count.
void sample_bilinear(const Tensor& img, double y, double x, double* out);

}  // namespace stereoinr
