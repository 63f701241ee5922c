// Times the OpenMP kernels against the serial reference implementations and
// reports the max elementwise divergence between the two routes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "xphase/kernels.hpp"
#include "xphase/model.hpp"
#include "xphase/reference.hpp"
#include "xphase/tensor.hpp"

using namespace xphase;
using clock_type = std::chrono::steady_clock;

namespace {

std::vector<double> randvec(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = unit(rng);
  return v;
}

template <typename F>
double time_ms(int reps, F&& f) {
  f();  // warm up
  const auto t0 = clock_type::now();
  for (int i = 0; i < reps; ++i) f();
  const auto t1 = clock_type::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void report(const char* name, double serial_ms, double parallel_ms, double diff) {
  std::printf("%-16s serial %8.3f ms   parallel %8.3f ms   speedup %5.2fx   max|diff| %.3e\n",
              name, serial_ms, parallel_ms, serial_ms / parallel_ms, diff);
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("OpenMP threads: %d\n", omp_get_max_threads());
#else
  std::printf("built without OpenMP\n");
#endif
  std::mt19937_64 rng(7);

  {
    const std::int64_t cin = 8, cout = 16, h = 24, w = 24, d = 16;
    auto in = randvec(rng, cin * h * w * d);
    auto ker = randvec(rng, cout * cin * 27);
    auto bias = randvec(rng, cout);
    std::vector<double> out(cout * h * w * d);
    std::vector<double> ref;
    const double ts = time_ms(3, [&] { ref = reference::conv3d_serial(in, ker, bias, cin, h, w, d, cout, 1); });
    const double tp = time_ms(3, [&] {
      kernels::conv3d_forward(in.data(), ker.data(), bias.data(), out.data(), cin, h, w, d, cout, 1);
    });
    report("conv3d", ts, tp, max_diff(out, ref));
  }

  {
    const std::int64_t m = 256, k = 256, p = 256;
    auto a = randvec(rng, m * k);
    auto b = randvec(rng, k * p);
    std::vector<double> c(m * p);
    std::vector<double> ref;
    const double ts = time_ms(3, [&] { ref = reference::matmul_serial(a, b, m, k, p); });
    const double tp = time_ms(3, [&] { kernels::matmul_forward(a.data(), b.data(), c.data(), m, k, p); });
    report("matmul", ts, tp, max_diff(c, ref));
  }

  {
    const std::int64_t c = 32, spatial = 24 * 24 * 16;
    auto in = randvec(rng, c * spatial);
    auto gamma = randvec(rng, c);
    auto beta = randvec(rng, c);
    std::vector<double> out(c * spatial), xhat(c * spatial), istd(c);
    std::vector<double> ref;
    const double ts =
        time_ms(5, [&] { ref = reference::instance_norm_serial(in, gamma, beta, 1e-5, c, spatial); });
    const double tp = time_ms(5, [&] {
      kernels::instance_norm_forward(in.data(), gamma.data(), beta.data(), 1e-5, out.data(),
                                     xhat.data(), istd.data(), c, spatial);
    });
    report("instance_norm", ts, tp, max_diff(out, ref));
  }

  {
    const std::int64_t h = 24, w = 24, d = 16, c = 32;
    auto feature = randvec(rng, h * w * d * c);
    std::vector<double> mask(h * w * d, 0.0);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (auto& v : mask) v = uni(rng) < 0.1 ? 1.0 : 0.0;
    mask[0] = 1.0;
    std::vector<double> ref, out;
    const double ts = time_ms(10, [&] {
      ref = reference::masked_average_pool_serial(feature, mask, h * w * d, c);
    });
    auto feature_t = tensor({h, w, d, c}, feature, false);
    auto mask_t = tensor({h, w, d}, mask, false);
    const double tp = time_ms(10, [&] { out = masked_average_pool(feature_t, mask_t)->data; });
    report("map", ts, tp, max_diff(out, ref));
  }

  return 0;
}
