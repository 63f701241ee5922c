#pragma once

#include <cstdint>

// Raw compute kernels behind the tensor ops. Heavy loops are OpenMP-parallel
// over independent output elements: every output element is produced by
// exactly one thread with a serial inner reduction, so results are
// bit-identical for any thread count. Backward kernels accumulate (+=) into
// the gradient buffers.
namespace xphase::kernels {

void conv3d_forward(const double* in, const double* ker, const double* bias,
                    double* out, std::int64_t cin, std::int64_t h,
                    std::int64_t w, std::int64_t d, std::int64_t cout,
                    int stride);
void conv3d_backward_input(const double* gout, const double* ker, double* gin,
                           std::int64_t cin, std::int64_t h, std::int64_t w,
                           std::int64_t d, std::int64_t cout, int stride);
void conv3d_backward_kernel(const double* gout, const double* in, double* gker,
                            std::int64_t cin, std::int64_t h, std::int64_t w,
                            std::int64_t d, std::int64_t cout, int stride);
void conv3d_backward_bias(const double* gout, double* gbias, std::int64_t cout,
                          std::int64_t spatial);

void matmul_forward(const double* a, const double* b, double* c,
                    std::int64_t m, std::int64_t k, std::int64_t p);
// ga += gc * b^T
void matmul_backward_a(const double* gc, const double* b, double* ga,
                       std::int64_t m, std::int64_t k, std::int64_t p);
// gb += a^T * gc
void matmul_backward_b(const double* gc, const double* a, double* gb,
                       std::int64_t m, std::int64_t k, std::int64_t p);

// Per-channel mean/inv_std over `spatial` positions, then
// out = xhat * gamma[c] + beta[c]. xhat and inv_std are cached for backward.
void instance_norm_forward(const double* in, const double* gamma,
                           const double* beta, double eps, double* out,
                           double* xhat, double* inv_std, std::int64_t c,
                           std::int64_t spatial);
void instance_norm_backward(const double* gout, const double* gamma,
                            const double* xhat, const double* inv_std,
                            double* gin, double* ggamma, double* gbeta,
                            std::int64_t c, std::int64_t spatial);

}  // namespace xphase::kernels
