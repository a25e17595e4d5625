#pragma once

#include <string>

#include "avstyle/tensor.hpp"

namespace avstyle {

// 8-bit RGB PNG, row-major. Input values are clamped to [0,1] and quantized
// with round-to-nearest.
void write_png(const std::string& path, const Tensor& img);

// Reads an 8-bit non-interlaced grayscale/RGB/RGBA PNG into a [3,h,w] float
// tensor in [0,1] (gray replicated, alpha dropped).
Tensor read_png(const std::string& path);

} // namespace avstyle
