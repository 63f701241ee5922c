#include "xphase/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace xphase::kernels {

namespace {

inline std::int64_t out_extent(std::int64_t e, int stride) {
  return stride == 1 ? e : e / 2;
}

// Valid output range along one axis for kernel tap t: positions c with
// 0 <= c*stride + t - 1 < extent.
inline std::int64_t tap_lo(int t, int stride) {
  return t == 0 ? (stride == 1 ? 1 : 1) : 0;
}
inline std::int64_t tap_hi(std::int64_t extent, std::int64_t out, int t, int stride) {
  return std::min(out - 1, (extent - t) / stride);
}

}  // namespace

void conv3d_forward(const double* in, const double* ker, const double* bias,
                    double* out, std::int64_t cin, std::int64_t h,
                    std::int64_t w, std::int64_t d, std::int64_t cout,
                    int stride) {
  const std::int64_t oh = out_extent(h, stride);
  const std::int64_t ow = out_extent(w, stride);
  const std::int64_t od = out_extent(d, stride);
#pragma omp parallel for collapse(2) schedule(static)
  for (std::int64_t co = 0; co < cout; ++co) {
    for (std::int64_t a = 0; a < oh; ++a) {
      const std::int64_t ia0 = a * stride - 1;
      const int ulo = ia0 < 0 ? 1 : 0;
      const int uhi = ia0 + 2 >= h ? static_cast<int>(h - 1 - ia0) : 2;
      for (std::int64_t b = 0; b < ow; ++b) {
        const std::int64_t ib0 = b * stride - 1;
        const int vlo = ib0 < 0 ? 1 : 0;
        const int vhi = ib0 + 2 >= w ? static_cast<int>(w - 1 - ib0) : 2;
        for (std::int64_t c = 0; c < od; ++c) {
          const std::int64_t ic0 = c * stride - 1;
          const int tlo = ic0 < 0 ? 1 : 0;
          const int thi = ic0 + 2 >= d ? static_cast<int>(d - 1 - ic0) : 2;
          double acc = bias[co];
          for (std::int64_t ci = 0; ci < cin; ++ci) {
            const double* inc = in + ci * h * w * d;
            const double* kc = ker + (co * cin + ci) * 27;
            for (int u = ulo; u <= uhi; ++u) {
              const double* plane = inc + (ia0 + u) * w * d;
              for (int v = vlo; v <= vhi; ++v) {
                const double* row = plane + (ib0 + v) * d + ic0;
                const double* krow = kc + (u * 3 + v) * 3;
                for (int t = tlo; t <= thi; ++t) acc += row[t] * krow[t];
              }
            }
          }
          out[((co * oh + a) * ow + b) * od + c] = acc;
        }
      }
    }
  }
}

void conv3d_backward_input(const double* gout, const double* ker, double* gin,
                           std::int64_t cin, std::int64_t h, std::int64_t w,
                           std::int64_t d, std::int64_t cout, int stride) {
  const std::int64_t oh = out_extent(h, stride);
  const std::int64_t ow = out_extent(w, stride);
  const std::int64_t od = out_extent(d, stride);
  // Scatter form parallelized over input channels: a thread owns every row
  // it writes, so accumulation stays deterministic.
#pragma omp parallel for schedule(static)
  for (std::int64_t ci = 0; ci < cin; ++ci) {
    double* ginc = gin + ci * h * w * d;
    for (std::int64_t co = 0; co < cout; ++co) {
      const double* kc = ker + (co * cin + ci) * 27;
      for (std::int64_t a = 0; a < oh; ++a) {
        for (std::int64_t b = 0; b < ow; ++b) {
          const double* grow = gout + ((co * oh + a) * ow + b) * od;
          for (int u = 0; u < 3; ++u) {
            const std::int64_t ia = a * stride + u - 1;
            if (ia < 0 || ia >= h) continue;
            for (int v = 0; v < 3; ++v) {
              const std::int64_t ib = b * stride + v - 1;
              if (ib < 0 || ib >= w) continue;
              double* target = ginc + (ia * w + ib) * d;
              const double* krow = kc + (u * 3 + v) * 3;
              for (int t = 0; t < 3; ++t) {
                const double k = krow[t];
                const std::int64_t lo = tap_lo(t, stride);
                const std::int64_t hi = tap_hi(d, od, t, stride);
                double* shifted = target + t - 1;
                for (std::int64_t c = lo; c <= hi; ++c) {
                  shifted[c * stride] += k * grow[c];
                }
              }
            }
          }
        }
      }
    }
  }
}

void conv3d_backward_kernel(const double* gout, const double* in, double* gker,
                            std::int64_t cin, std::int64_t h, std::int64_t w,
                            std::int64_t d, std::int64_t cout, int stride) {
  const std::int64_t oh = out_extent(h, stride);
  const std::int64_t ow = out_extent(w, stride);
  const std::int64_t od = out_extent(d, stride);
#pragma omp parallel for collapse(2) schedule(static)
  for (std::int64_t co = 0; co < cout; ++co) {
    for (std::int64_t ci = 0; ci < cin; ++ci) {
      double* gk = gker + (co * cin + ci) * 27;
      const double* inc = in + ci * h * w * d;
      for (std::int64_t a = 0; a < oh; ++a) {
        for (std::int64_t b = 0; b < ow; ++b) {
          const double* grow = gout + ((co * oh + a) * ow + b) * od;
          for (int u = 0; u < 3; ++u) {
            const std::int64_t ia = a * stride + u - 1;
            if (ia < 0 || ia >= h) continue;
            for (int v = 0; v < 3; ++v) {
              const std::int64_t ib = b * stride + v - 1;
              if (ib < 0 || ib >= w) continue;
              const double* irow = inc + (ia * w + ib) * d;
              for (int t = 0; t < 3; ++t) {
                const std::int64_t lo = tap_lo(t, stride);
                const std::int64_t hi = tap_hi(d, od, t, stride);
                const double* shifted = irow + t - 1;
                double acc = 0.0;
                for (std::int64_t c = lo; c <= hi; ++c) {
                  acc += grow[c] * shifted[c * stride];
                }
                gk[(u * 3 + v) * 3 + t] += acc;
              }
            }
          }
        }
      }
    }
  }
}

void conv3d_backward_bias(const double* gout, double* gbias, std::int64_t cout,
                          std::int64_t spatial) {
#pragma omp parallel for schedule(static)
  for (std::int64_t co = 0; co < cout; ++co) {
    double acc = 0.0;
    const double* g = gout + co * spatial;
    for (std::int64_t i = 0; i < spatial; ++i) acc += g[i];
    gbias[co] += acc;
  }
}

void matmul_forward(const double* a, const double* b, double* c,
                    std::int64_t m, std::int64_t k, std::int64_t p) {
#pragma omp parallel for schedule(static) if (m * k * p > 16384)
  for (std::int64_t i = 0; i < m; ++i) {
    double* ci = c + i * p;
    for (std::int64_t j = 0; j < p; ++j) ci[j] = 0.0;
    const double* ai = a + i * k;
    for (std::int64_t t = 0; t < k; ++t) {
      const double av = ai[t];
      const double* bt = b + t * p;
      for (std::int64_t j = 0; j < p; ++j) ci[j] += av * bt[j];
    }
  }
}

void matmul_backward_a(const double* gc, const double* b, double* ga,
                       std::int64_t m, std::int64_t k, std::int64_t p) {
#pragma omp parallel for schedule(static) if (m * k * p > 16384)
  for (std::int64_t i = 0; i < m; ++i) {
    const double* gi = gc + i * p;
    double* gai = ga + i * k;
    for (std::int64_t t = 0; t < k; ++t) {
      double acc = 0.0;
      const double* bt = b + t * p;
      for (std::int64_t j = 0; j < p; ++j) acc += gi[j] * bt[j];
      gai[t] += acc;
    }
  }
}

void matmul_backward_b(const double* gc, const double* a, double* gb,
                       std::int64_t m, std::int64_t k, std::int64_t p) {
#pragma omp parallel for schedule(static) if (m * k * p > 16384)
  for (std::int64_t t = 0; t < k; ++t) {
    double* gbt = gb + t * p;
    for (std::int64_t i = 0; i < m; ++i) {
      const double av = a[i * k + t];
      const double* gi = gc + i * p;
      for (std::int64_t j = 0; j < p; ++j) gbt[j] += av * gi[j];
    }
  }
}

void instance_norm_forward(const double* in, const double* gamma,
                           const double* beta, double eps, double* out,
                           double* xhat, double* inv_std, std::int64_t c,
                           std::int64_t spatial) {
#pragma omp parallel for schedule(static)
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const double* x = in + ch * spatial;
    double sum = 0.0;
    for (std::int64_t i = 0; i < spatial; ++i) sum += x[i];
    const double mu = sum / static_cast<double>(spatial);
    double var = 0.0;
    for (std::int64_t i = 0; i < spatial; ++i) {
      const double dxi = x[i] - mu;
      var += dxi * dxi;
    }
    var /= static_cast<double>(spatial);
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std[ch] = istd;
    double* xh = xhat + ch * spatial;
    double* y = out + ch * spatial;
    for (std::int64_t i = 0; i < spatial; ++i) {
      xh[i] = (x[i] - mu) * istd;
      y[i] = xh[i] * gamma[ch] + beta[ch];
    }
  }
}

void instance_norm_backward(const double* gout, const double* gamma,
                            const double* xhat, const double* inv_std,
                            double* gin, double* ggamma, double* gbeta,
                            std::int64_t c, std::int64_t spatial) {
  const double n = static_cast<double>(spatial);
#pragma omp parallel for schedule(static)
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const double* g = gout + ch * spatial;
    const double* xh = xhat + ch * spatial;
    double gsum = 0.0, gxsum = 0.0;
    for (std::int64_t i = 0; i < spatial; ++i) {
      gsum += g[i];
      gxsum += g[i] * xh[i];
    }
    ggamma[ch] += gxsum;
    gbeta[ch] += gsum;
    const double scale = gamma[ch] * inv_std[ch];
    double* gi = gin + ch * spatial;
    for (std::int64_t i = 0; i < spatial; ++i) {
      gi[i] += scale * (g[i] - gsum / n - xh[i] * gxsum / n);
    }
  }
}

}  // namespace xphase::kernels
