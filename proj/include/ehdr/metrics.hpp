#pragma once

#include "ehdr/tensor.hpp"

#include <string>

namespace ehdr {

struct ToneMapConfig {
    double mu = 5000.0;
    enum class Normalize { fixed_1, per_image_max } normalize = Normalize::per_image_max;
};

// T(x) = log(1 + mu*x) / log(1 + mu) after normalizing the input to [0,1]
// per the configured mode. Monotone, T(0)=0, T(1)=1.
Tensor<double> mu_tonemap(const Tensor<double>& hdr, const ToneMapConfig& cfg);

// PSNR on tone-mapped images, peak 1.0. Identical inputs cap at 99 dB.
double psnr_mu(const Tensor<double>& pred, const Tensor<double>& ref, const ToneMapConfig& cfg);

// Structural similarity on tone-mapped Rec.601 luminance, 11x11 Gaussian
// window (sigma 1.5), C1=0.01^2, C2=0.03^2, dynamic range 1.
double ssim_mu(const Tensor<double>& pred, const Tensor<double>& ref, const ToneMapConfig& cfg);

// Mean over interior pixels of sqrt((dx^2 + dy^2)/2), forward differences on
// Rec.601 luminance.
double average_gradient(const Tensor<double>& img);

// sqrt(RF^2 + CF^2) where RF/CF are the RMS of row/column forward differences
// on Rec.601 luminance.
double spatial_frequency(const Tensor<double>& img);

// Global Reinhard x/(1+x) preview operator with per-image luminance scaling.
// Presentation only; quantitative paths stay on the mu-law domain.
Tensor<double> reinhard_preview(const Tensor<double>& hdr);

} // namespace ehdr
