#pragma once

#include <cstdint>
#include <vector>

// Serial reference implementations, written independently of the production
// kernels. Tests compare the two routes; the benchmark times them against
// each other. Nothing in the production library may call these.
namespace xphase::reference {

// Direct zero-padded 3x3x3 convolution, plain nested loops.
std::vector<double> conv3d_serial(const std::vector<double>& in,
                                  const std::vector<double>& ker,
                                  const std::vector<double>& bias,
                                  std::int64_t cin, std::int64_t h,
                                  std::int64_t w, std::int64_t d,
                                  std::int64_t cout, int stride);

std::vector<double> matmul_serial(const std::vector<double>& a,
                                  const std::vector<double>& b, std::int64_t m,
                                  std::int64_t k, std::int64_t p);

// Per-channel two-pass mean/variance normalization of a [C,H,W,D] volume.
std::vector<double> instance_norm_serial(const std::vector<double>& in,
                                         const std::vector<double>& gamma,
                                         const std::vector<double>& beta,
                                         double eps, std::int64_t c,
                                         std::int64_t spatial);

// Explicit voxel loop over a channels-last [H,W,D,C] feature map.
std::vector<double> masked_average_pool_serial(const std::vector<double>& feature,
                                               const std::vector<double>& mask,
                                               std::int64_t spatial,
                                               std::int64_t channels);

// Blockwise OR over 2x2x2 blocks of a binary [H,W,D] mask.
std::vector<double> downsample_mask_serial(const std::vector<double>& mask,
                                           std::int64_t h, std::int64_t w,
                                           std::int64_t d);

}  // namespace xphase::reference
