#include "xphase/reference.hpp"

#include <cmath>

namespace xphase::reference {

std::vector<double> conv3d_serial(const std::vector<double>& in,
                                  const std::vector<double>& ker,
                                  const std::vector<double>& bias,
                                  std::int64_t cin, std::int64_t h,
                                  std::int64_t w, std::int64_t d,
                                  std::int64_t cout, int stride) {
  const std::int64_t oh = stride == 1 ? h : h / 2;
  const std::int64_t ow = stride == 1 ? w : w / 2;
  const std::int64_t od = stride == 1 ? d : d / 2;
  std::vector<double> out(static_cast<std::size_t>(cout * oh * ow * od), 0.0);
  for (std::int64_t co = 0; co < cout; ++co)
    for (std::int64_t a = 0; a < oh; ++a)
      for (std::int64_t b = 0; b < ow; ++b)
        for (std::int64_t c = 0; c < od; ++c) {
          double s = bias[co];
          for (std::int64_t ci = 0; ci < cin; ++ci)
            for (std::int64_t u = 0; u < 3; ++u)
              for (std::int64_t v = 0; v < 3; ++v)
                for (std::int64_t t = 0; t < 3; ++t) {
                  const std::int64_t ia = a * stride + u - 1;
                  const std::int64_t ib = b * stride + v - 1;
                  const std::int64_t ic = c * stride + t - 1;
                  if (ia < 0 || ia >= h || ib < 0 || ib >= w || ic < 0 || ic >= d)
                    continue;
                  s += in[((ci * h + ia) * w + ib) * d + ic] *
                       ker[(((co * cin + ci) * 3 + u) * 3 + v) * 3 + t];
                }
          out[((co * oh + a) * ow + b) * od + c] = s;
        }
  return out;
}

std::vector<double> matmul_serial(const std::vector<double>& a,
                                  const std::vector<double>& b, std::int64_t m,
                                  std::int64_t k, std::int64_t p) {
  std::vector<double> c(static_cast<std::size_t>(m * p), 0.0);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < p; ++j) {
      double s = 0.0;
      for (std::int64_t t = 0; t < k; ++t) s += a[i * k + t] * b[t * p + j];
      c[i * p + j] = s;
    }
  return c;
}

std::vector<double> instance_norm_serial(const std::vector<double>& in,
                                         const std::vector<double>& gamma,
                                         const std::vector<double>& beta,
                                         double eps, std::int64_t c,
                                         std::int64_t spatial) {
  std::vector<double> out(in.size());
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double mu = 0.0;
    for (std::int64_t i = 0; i < spatial; ++i) mu += in[ch * spatial + i];
    mu /= static_cast<double>(spatial);
    double var = 0.0;
    for (std::int64_t i = 0; i < spatial; ++i) {
      const double dx = in[ch * spatial + i] - mu;
      var += dx * dx;
    }
    var /= static_cast<double>(spatial);
    for (std::int64_t i = 0; i < spatial; ++i) {
      out[ch * spatial + i] =
          (in[ch * spatial + i] - mu) / std::sqrt(var + eps) * gamma[ch] + beta[ch];
    }
  }
  return out;
}

std::vector<double> masked_average_pool_serial(const std::vector<double>& feature,
                                               const std::vector<double>& mask,
                                               std::int64_t spatial,
                                               std::int64_t channels) {
  std::vector<double> pooled(static_cast<std::size_t>(channels), 0.0);
  double msum = 0.0;
  for (std::int64_t x = 0; x < spatial; ++x) msum += mask[x];
  for (std::int64_t c = 0; c < channels; ++c) {
    double s = 0.0;
    for (std::int64_t x = 0; x < spatial; ++x) s += feature[x * channels + c] * mask[x];
    pooled[c] = s / msum;
  }
  return pooled;
}

std::vector<double> downsample_mask_serial(const std::vector<double>& mask,
                                           std::int64_t h, std::int64_t w,
                                           std::int64_t d) {
  std::vector<double> out(static_cast<std::size_t>(h / 2 * (w / 2) * (d / 2)), 0.0);
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j)
      for (std::int64_t k = 0; k < d; ++k) {
        if (mask[(i * w + j) * d + k] != 0.0) {
          out[((i / 2) * (w / 2) + j / 2) * (d / 2) + k / 2] = 1.0;
        }
      }
  return out;
}

}  // namespace xphase::reference
