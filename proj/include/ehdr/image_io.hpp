#pragma once

#include "ehdr/tensor.hpp"

#include <string>

namespace ehdr {

// 8-bit RGB PNG. Values are clamped to [0,1] and quantized on write.
void write_png(const std::string& path, const Tensor<double>& img);
Tensor<double> read_png(const std::string& path);

// Portable float map, "PF" RGB variant, little-endian (negative scale),
// rows bottom-to-top. Stores float32; round-trips bit-exactly.
void write_pfm(const std::string& path, const Tensor<float>& img);
Tensor<float> read_pfm(const std::string& path);

inline void write_pfm(const std::string& path, const Tensor<double>& img) {
    write_pfm(path, img.cast<float>());
}

} // namespace ehdr
