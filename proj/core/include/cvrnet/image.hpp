#pragma once

#include <cstdint>
#include <string>

#include "cvrnet/tensor.hpp"

namespace cvrnet {

/// Geometric augmentation: rotation, height/width shift, horizontal and
/// vertical flips. Out-of-frame pixels are filled with 0; resampling is
/// nearest-neighbor. All draws come from the per-sample seed, so the stream
/// is reproducible regardless of loader scheduling.
struct AugmentConfig {
  double rotation_deg_max = 15.0;
  double shift_frac_max = 0.10;
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (rotation_deg_max < 0 || shift_frac_max < 0)
      throw ValueError("augmentation magnitudes must be >= 0");
    if (hflip_prob < 0 || hflip_prob > 1 || vflip_prob < 0 || vflip_prob > 1)
      throw ValueError("flip probabilities must lie in [0, 1]");
  }

  bool is_identity() const {
    return rotation_deg_max == 0 && shift_frac_max == 0 && hflip_prob == 0 && vflip_prob == 0;
  }
};

/// Decodes an 8-bit binary PGM (P5) or PPM (P6) file, or a raw float tensor
/// sidecar (magic "CVRT"), to 1×H×W×3 in [0, 1]. Grayscale is replicated
/// across the three channels.
Tensor decode_image_file(const std::string& path);

/// Nearest-neighbor resize with source index floor((dst + 0.5) * src / dst).
Tensor resize_nearest(const Tensor& img, std::int64_t out_h, std::int64_t out_w);

Tensor load_and_resize(const std::string& path, std::int64_t out_h = 224, std::int64_t out_w = 224);

Tensor augment(const Tensor& img, const AugmentConfig& config, std::uint64_t per_sample_seed);

/// Raw-tensor sidecar for pre-converted datasets; the record layout matches
/// checkpoint records. Values are float32 in [0, 1], shape H×W×C with C of
/// 1 or 3.
void write_image_sidecar(const std::string& path, const Tensor& hwc);

/// Writes an 8-bit binary PGM/PPM (C = 1 -> P5, C = 3 -> P6) from 1×H×W×C
/// or H×W×C values in [0, 1]; used by tooling and test fixtures.
void write_netpbm(const std::string& path, const Tensor& img);

}  // namespace cvrnet
