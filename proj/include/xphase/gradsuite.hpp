#pragma once

#include <vector>

#include "xphase/tensor.hpp"

namespace xphase {

// Finite-difference checks for every differentiable op (five random
// instances each, aggregated per op) plus an end-to-end check of the
// composite loss on a small 8x8x4, N=4, C=4 model with one row per
// parameter group. All rows use h=1e-4, rel_tol=1e-4, abs_tol=1e-6.
std::vector<GradCheckReport> run_gradient_suite();

}  // namespace xphase
