#include "xphase/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "xphase/kernels.hpp"

namespace xphase {

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const std::vector<std::int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {

void check_positive_extents(const std::vector<std::int64_t>& shape) {
  for (auto e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor: extents must be positive, got " + shape_str(shape));
  }
}

TensorPtr make_node(std::string op, std::vector<std::int64_t> shape,
                    std::vector<double> data, std::vector<TensorPtr> parents) {
  auto t = std::make_shared<Tensor>();
  t->op = std::move(op);
  t->shape = std::move(shape);
  t->data = std::move(data);
  t->parents = std::move(parents);
  for (const auto& p : t->parents) {
    if (p->requires_grad) {
      t->requires_grad = true;
      break;
    }
  }
  return t;
}

void check_same_shape(const char* op, const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a->shape) + " vs " + shape_str(b->shape));
  }
}

}  // namespace

TensorPtr tensor(std::vector<std::int64_t> shape, std::vector<double> data,
                 bool requires_grad) {
  check_positive_extents(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " wants " +
                                std::to_string(shape_numel(shape)) + " values, got " +
                                std::to_string(data.size()));
  }
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->data = std::move(data);
  t->requires_grad = requires_grad;
  return t;
}

TensorPtr zeros(std::vector<std::int64_t> shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

TensorPtr full(std::vector<std::int64_t> shape, double value, bool requires_grad) {
  check_positive_extents(shape);
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)), value);
  return tensor(std::move(shape), std::move(data), requires_grad);
}

TensorPtr scalar(double value, bool requires_grad) {
  return tensor({1}, {value}, requires_grad);
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape("add", a, b);
  std::vector<double> out(a->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] + b->data[i];
  auto t = make_node("add", a->shape, std::move(out), {a, b});
  if (t->requires_grad) {
    Tensor* pa = a.get();
    Tensor* pb = b.get();
    t->backward_fn = [pa, pb](Tensor& self) {
      if (pa->requires_grad) pa->accumulate_grad(self.grad.data());
      if (pb->requires_grad) pb->accumulate_grad(self.grad.data());
    };
  }
  return t;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape("sub", a, b);
  std::vector<double> out(a->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] - b->data[i];
  auto t = make_node("sub", a->shape, std::move(out), {a, b});
  if (t->requires_grad) {
    Tensor* pa = a.get();
    Tensor* pb = b.get();
    t->backward_fn = [pa, pb](Tensor& self) {
      if (pa->requires_grad) pa->accumulate_grad(self.grad.data());
      if (pb->requires_grad) {
        if (pb->grad.size() != pb->data.size()) pb->grad.assign(pb->data.size(), 0.0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
      }
    };
  }
  return t;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape("mul", a, b);
  std::vector<double> out(a->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] * b->data[i];
  auto t = make_node("mul", a->shape, std::move(out), {a, b});
  if (t->requires_grad) {
    Tensor* pa = a.get();
    Tensor* pb = b.get();
    t->backward_fn = [pa, pb](Tensor& self) {
      if (pa->requires_grad) {
        if (pa->grad.size() != pa->data.size()) pa->grad.assign(pa->data.size(), 0.0);
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i] * pb->data[i];
      }
      if (pb->requires_grad) {
        if (pb->grad.size() != pb->data.size()) pb->grad.assign(pb->data.size(), 0.0);
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pb->grad[i] += self.grad[i] * pa->data[i];
      }
    };
  }
  return t;
}

TensorPtr scalar_mul(const TensorPtr& a, double s) {
  std::vector<double> out(a->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] * s;
  auto t = make_node("scalar_mul", a->shape, std::move(out), {a});
  if (t->requires_grad) {
    Tensor* pa = a.get();
    t->backward_fn = [pa, s](Tensor& self) {
      if (pa->grad.size() != pa->data.size()) pa->grad.assign(pa->data.size(), 0.0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += s * self.grad[i];
    };
  }
  return t;
}

TensorPtr sum(const TensorPtr& a) {
  double acc = 0.0;
  for (double v : a->data) acc += v;
  auto t = make_node("sum", {1}, {acc}, {a});
  if (t->requires_grad) {
    Tensor* pa = a.get();
    t->backward_fn = [pa](Tensor& self) {
      const double g = self.grad[0];
      if (pa->grad.size() != pa->data.size()) pa->grad.assign(pa->data.size(), 0.0);
      for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += g;
    };
  }
  return t;
}

TensorPtr mean(const TensorPtr& a) {
  double acc = 0.0;
  for (double v : a->data) acc += v;
  const double n = static_cast<double>(a->data.size());
  auto t = make_node("mean", {1}, {acc / n}, {a});
  if (t->requires_grad) {
    Tensor* pa = a.get();
    t->backward_fn = [pa, n](Tensor& self) {
      const double g = self.grad[0] / n;
      if (pa->grad.size() != pa->data.size()) pa->grad.assign(pa->data.size(), 0.0);
      for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += g;
    };
  }
  return t;
}

TensorPtr reshape(const TensorPtr& a, std::vector<std::int64_t> shape) {
  check_positive_extents(shape);
  if (shape_numel(shape) != a->numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(a->shape) +
                                " as " + shape_str(shape));
  }
  auto t = make_node("reshape", std::move(shape), a->data, {a});
  if (t->requires_grad) {
    Tensor* pa = a.get();
    t->backward_fn = [pa](Tensor& self) { pa->accumulate_grad(self.grad.data()); };
  }
  return t;
}

TensorPtr concat_rows(const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  for (const auto& p : parts) {
    if (p->shape.size() != parts[0]->shape.size() ||
        !std::equal(p->shape.begin() + 1, p->shape.end(), parts[0]->shape.begin() + 1)) {
      throw std::invalid_argument("concat_rows: trailing extents differ");
    }
  }
  std::vector<std::int64_t> shape = parts[0]->shape;
  std::int64_t rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    rows += p->shape[0];
    out.insert(out.end(), p->data.begin(), p->data.end());
  }
  shape[0] = rows;
  auto t = make_node("concat_rows", std::move(shape), std::move(out), parts);
  if (t->requires_grad) {
    t->backward_fn = [](Tensor& self) {
      std::size_t off = 0;
      for (const auto& p : self.parents) {
        if (p->requires_grad) {
          if (p->grad.size() != p->data.size()) p->grad.assign(p->data.size(), 0.0);
          for (std::size_t i = 0; i < p->data.size(); ++i) p->grad[i] += self.grad[off + i];
        }
        off += p->data.size();
      }
    };
  }
  return t;
}

TensorPtr select_row(const TensorPtr& m, std::int64_t row) {
  if (m->shape.size() != 2) throw std::invalid_argument("select_row: want a matrix");
  if (row < 0 || row >= m->shape[0]) throw std::invalid_argument("select_row: row out of range");
  const std::int64_t cols = m->shape[1];
  std::vector<double> out(m->data.begin() + row * cols, m->data.begin() + (row + 1) * cols);
  auto t = make_node("select_row", {cols}, std::move(out), {m});
  if (t->requires_grad) {
    Tensor* pm = m.get();
    t->backward_fn = [pm, row, cols](Tensor& self) {
      if (pm->grad.size() != pm->data.size()) pm->grad.assign(pm->data.size(), 0.0);
      for (std::int64_t j = 0; j < cols; ++j) pm->grad[row * cols + j] += self.grad[j];
    };
  }
  return t;
}

TensorPtr transpose2d(const TensorPtr& a) {
  if (a->shape.size() != 2) throw std::invalid_argument("transpose2d: want a matrix");
  const std::int64_t r = a->shape[0], c = a->shape[1];
  std::vector<double> out(a->data.size());
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out[j * r + i] = a->data[i * c + j];
  auto t = make_node("transpose2d", {c, r}, std::move(out), {a});
  if (t->requires_grad) {
    Tensor* pa = a.get();
    t->backward_fn = [pa, r, c](Tensor& self) {
      if (pa->grad.size() != pa->data.size()) pa->grad.assign(pa->data.size(), 0.0);
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) pa->grad[i * c + j] += self.grad[j * r + i];
    };
  }
  return t;
}

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0]) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a->shape) +
                                " x " + shape_str(b->shape));
  }
  const std::int64_t m = a->shape[0], k = a->shape[1], p = b->shape[1];
  std::vector<double> out(static_cast<std::size_t>(m * p));
  kernels::matmul_forward(a->data.data(), b->data.data(), out.data(), m, k, p);
  auto t = make_node("matmul", {m, p}, std::move(out), {a, b});
  if (t->requires_grad) {
    Tensor* pa = a.get();
    Tensor* pb = b.get();
    t->backward_fn = [pa, pb, m, k, p](Tensor& self) {
      if (pa->requires_grad) {
        if (pa->grad.size() != pa->data.size()) pa->grad.assign(pa->data.size(), 0.0);
        kernels::matmul_backward_a(self.grad.data(), pb->data.data(), pa->grad.data(), m, k, p);
      }
      if (pb->requires_grad) {
        if (pb->grad.size() != pb->data.size()) pb->grad.assign(pb->data.size(), 0.0);
        kernels::matmul_backward_b(self.grad.data(), pa->data.data(), pb->grad.data(), m, k, p);
      }
    };
  }
  return t;
}

TensorPtr fully_connected(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
  if (x->shape.size() != 1 || w->shape.size() != 2 || b->shape.size() != 1 ||
      w->shape[1] != x->shape[0] || w->shape[0] != b->shape[0]) {
    throw std::invalid_argument("fully_connected: incompatible shapes x" +
                                shape_str(x->shape) + " W" + shape_str(w->shape) +
                                " b" + shape_str(b->shape));
  }
  const std::int64_t out_n = w->shape[0], in_n = w->shape[1];
  std::vector<double> out(static_cast<std::size_t>(out_n));
  for (std::int64_t i = 0; i < out_n; ++i) {
    double acc = b->data[i];
    const double* wi = w->data.data() + i * in_n;
    for (std::int64_t j = 0; j < in_n; ++j) acc += wi[j] * x->data[j];
    out[i] = acc;
  }
  auto t = make_node("fully_connected", {out_n}, std::move(out), {x, w, b});
  if (t->requires_grad) {
    Tensor* px = x.get();
    Tensor* pw = w.get();
    Tensor* pb = b.get();
    t->backward_fn = [px, pw, pb, out_n, in_n](Tensor& self) {
      if (px->requires_grad) {
        if (px->grad.size() != px->data.size()) px->grad.assign(px->data.size(), 0.0);
        for (std::int64_t i = 0; i < out_n; ++i) {
          const double g = self.grad[i];
          const double* wi = pw->data.data() + i * in_n;
          for (std::int64_t j = 0; j < in_n; ++j) px->grad[j] += g * wi[j];
        }
      }
      if (pw->requires_grad) {
        if (pw->grad.size() != pw->data.size()) pw->grad.assign(pw->data.size(), 0.0);
        for (std::int64_t i = 0; i < out_n; ++i) {
          const double g = self.grad[i];
          double* gw = pw->grad.data() + i * in_n;
          for (std::int64_t j = 0; j < in_n; ++j) gw[j] += g * px->data[j];
        }
      }
      if (pb->requires_grad) pb->accumulate_grad(self.grad.data());
    };
  }
  return t;
}

TensorPtr leaky_relu(const TensorPtr& a, double slope) {
  std::vector<double> out(a->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = a->data[i];
    out[i] = v > 0.0 ? v : slope * v;
  }
  auto t = make_node("leaky_relu", a->shape, std::move(out), {a});
  if (t->requires_grad) {
    Tensor* pa = a.get();
    // subgradient at exactly 0 is the slope
    t->backward_fn = [pa, slope](Tensor& self) {
      if (pa->grad.size() != pa->data.size()) pa->grad.assign(pa->data.size(), 0.0);
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        pa->grad[i] += self.grad[i] * (pa->data[i] > 0.0 ? 1.0 : slope);
    };
  }
  return t;
}

TensorPtr softmax_rows(const TensorPtr& a) {
  if (a->shape.size() != 2) throw std::invalid_argument("softmax_rows: want a matrix");
  const std::int64_t r = a->shape[0], c = a->shape[1];
  std::vector<double> out(a->data.size());
  for (std::int64_t i = 0; i < r; ++i) {
    const double* x = a->data.data() + i * c;
    double* y = out.data() + i * c;
    double mx = x[0];
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (std::int64_t j = 0; j < c; ++j) y[j] /= z;
  }
  auto t = make_node("softmax_rows", a->shape, std::move(out), {a});
  if (t->requires_grad) {
    Tensor* pa = a.get();
    t->backward_fn = [pa, r, c](Tensor& self) {
      if (pa->grad.size() != pa->data.size()) pa->grad.assign(pa->data.size(), 0.0);
      for (std::int64_t i = 0; i < r; ++i) {
        const double* y = self.data.data() + i * c;
        const double* g = self.grad.data() + i * c;
        double dot = 0.0;
        for (std::int64_t j = 0; j < c; ++j) dot += g[j] * y[j];
        double* ga = pa->grad.data() + i * c;
        for (std::int64_t j = 0; j < c; ++j) ga[j] += y[j] * (g[j] - dot);
      }
    };
  }
  return t;
}

TensorPtr cross_entropy(const TensorPtr& logits, std::int64_t label) {
  if (logits->shape.size() != 1) throw std::invalid_argument("cross_entropy: want a vector of logits");
  const std::int64_t k = logits->shape[0];
  if (label < 0 || label >= k) {
    throw std::invalid_argument("cross_entropy: label " + std::to_string(label) +
                                " out of range [0," + std::to_string(k) + ")");
  }
  const double* x = logits->data.data();
  double mx = x[0];
  for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, x[j]);
  double z = 0.0;
  std::vector<double> probs(static_cast<std::size_t>(k));
  for (std::int64_t j = 0; j < k; ++j) {
    probs[j] = std::exp(x[j] - mx);
    z += probs[j];
  }
  for (std::int64_t j = 0; j < k; ++j) probs[j] /= z;
  const double loss = (std::log(z) + mx) - x[label];
  auto t = make_node("cross_entropy", {1}, {loss}, {logits});
  if (t->requires_grad) {
    Tensor* pl = logits.get();
    t->backward_fn = [pl, probs, label](Tensor& self) {
      const double g = self.grad[0];
      if (pl->grad.size() != pl->data.size()) pl->grad.assign(pl->data.size(), 0.0);
      for (std::size_t j = 0; j < probs.size(); ++j) {
        pl->grad[j] += g * (probs[j] - (static_cast<std::int64_t>(j) == label ? 1.0 : 0.0));
      }
    };
  }
  return t;
}

TensorPtr conv3d(const TensorPtr& input, const TensorPtr& kernel,
                 const TensorPtr& bias, int stride) {
  if (input->shape.size() != 4) throw std::invalid_argument("conv3d: input must be [Cin,H,W,D]");
  if (kernel->shape.size() != 5 || kernel->shape[2] != 3 || kernel->shape[3] != 3 ||
      kernel->shape[4] != 3) {
    throw std::invalid_argument("conv3d: kernel must be [Cout,Cin,3,3,3], got " +
                                shape_str(kernel->shape));
  }
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv3d: stride must be 1 or 2");
  const std::int64_t cin = input->shape[0], h = input->shape[1], w = input->shape[2],
                     d = input->shape[3];
  const std::int64_t cout = kernel->shape[0];
  if (kernel->shape[1] != cin) {
    throw std::invalid_argument("conv3d: input has " + std::to_string(cin) +
                                " channels but kernel expects " + std::to_string(kernel->shape[1]));
  }
  if (bias->shape.size() != 1 || bias->shape[0] != cout) {
    throw std::invalid_argument("conv3d: bias must be [Cout]");
  }
  if (stride == 2 && (h % 2 || w % 2 || d % 2)) {
    throw std::invalid_argument("conv3d: stride 2 requires even spatial extents, got " +
                                shape_str(input->shape));
  }
  const std::int64_t oh = stride == 1 ? h : h / 2;
  const std::int64_t ow = stride == 1 ? w : w / 2;
  const std::int64_t od = stride == 1 ? d : d / 2;
  std::vector<double> out(static_cast<std::size_t>(cout * oh * ow * od));
  kernels::conv3d_forward(input->data.data(), kernel->data.data(), bias->data.data(),
                          out.data(), cin, h, w, d, cout, stride);
  auto t = make_node("conv3d", {cout, oh, ow, od}, std::move(out), {input, kernel, bias});
  if (t->requires_grad) {
    Tensor* pi = input.get();
    Tensor* pk = kernel.get();
    Tensor* pb = bias.get();
    t->backward_fn = [pi, pk, pb, cin, h, w, d, cout, stride, oh, ow, od](Tensor& self) {
      if (pi->requires_grad) {
        if (pi->grad.size() != pi->data.size()) pi->grad.assign(pi->data.size(), 0.0);
        kernels::conv3d_backward_input(self.grad.data(), pk->data.data(), pi->grad.data(),
                                       cin, h, w, d, cout, stride);
      }
      if (pk->requires_grad) {
        if (pk->grad.size() != pk->data.size()) pk->grad.assign(pk->data.size(), 0.0);
        kernels::conv3d_backward_kernel(self.grad.data(), pi->data.data(), pk->grad.data(),
                                        cin, h, w, d, cout, stride);
      }
      if (pb->requires_grad) {
        if (pb->grad.size() != pb->data.size()) pb->grad.assign(pb->data.size(), 0.0);
        kernels::conv3d_backward_bias(self.grad.data(), pb->grad.data(), cout, oh * ow * od);
      }
    };
  }
  return t;
}

TensorPtr instance_norm(const TensorPtr& input, const TensorPtr& gamma,
                        const TensorPtr& beta, double eps) {
  if (input->shape.size() != 4) throw std::invalid_argument("instance_norm: input must be [C,H,W,D]");
  const std::int64_t c = input->shape[0];
  const std::int64_t spatial = input->shape[1] * input->shape[2] * input->shape[3];
  if (spatial < 2) throw std::invalid_argument("instance_norm: needs at least 2 spatial positions");
  if (gamma->shape != std::vector<std::int64_t>{c} || beta->shape != std::vector<std::int64_t>{c}) {
    throw std::invalid_argument("instance_norm: gamma/beta must be [C]");
  }
  std::vector<double> out(input->data.size());
  auto xhat = std::make_shared<std::vector<double>>(input->data.size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));
  kernels::instance_norm_forward(input->data.data(), gamma->data.data(), beta->data.data(),
                                 eps, out.data(), xhat->data(), inv_std->data(), c, spatial);
  auto t = make_node("instance_norm", input->shape, std::move(out), {input, gamma, beta});
  if (t->requires_grad) {
    Tensor* pi = input.get();
    Tensor* pg = gamma.get();
    Tensor* pb = beta.get();
    t->backward_fn = [pi, pg, pb, xhat, inv_std, c, spatial](Tensor& self) {
      // gamma/beta grads fall out of the same pass; use scratch when a leaf
      // does not need them
      std::vector<double> scratch_gin, scratch_gg, scratch_gb;
      double* gin = nullptr;
      if (pi->requires_grad) {
        if (pi->grad.size() != pi->data.size()) pi->grad.assign(pi->data.size(), 0.0);
        gin = pi->grad.data();
      } else {
        scratch_gin.assign(pi->data.size(), 0.0);
        gin = scratch_gin.data();
      }
      double* gg = nullptr;
      if (pg->requires_grad) {
        if (pg->grad.size() != pg->data.size()) pg->grad.assign(pg->data.size(), 0.0);
        gg = pg->grad.data();
      } else {
        scratch_gg.assign(pg->data.size(), 0.0);
        gg = scratch_gg.data();
      }
      double* gb = nullptr;
      if (pb->requires_grad) {
        if (pb->grad.size() != pb->data.size()) pb->grad.assign(pb->data.size(), 0.0);
        gb = pb->grad.data();
      } else {
        scratch_gb.assign(pb->data.size(), 0.0);
        gb = scratch_gb.data();
      }
      kernels::instance_norm_backward(self.grad.data(), pg->data.data(), xhat->data(),
                                      inv_std->data(), gin, gg, gb, c, spatial);
    };
  }
  return t;
}

void backward(const TensorPtr& loss) {
  if (loss->numel() != 1) {
    throw std::invalid_argument("backward: root must be scalar, got " + shape_str(loss->shape));
  }
  // Iterative post-order DFS: a node is appended after all of its parents,
  // so walking the list in reverse visits every consumer before its inputs.
  std::vector<Tensor*> order;
  std::unordered_set<Tensor*> done;
  std::vector<std::pair<Tensor*, std::size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  done.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Tensor* p = node->parents[next++].get();
      if (!done.count(p)) {
        done.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Tensor* t : order) {
    if (t->requires_grad) t->zero_grad();
  }
  if (!loss->requires_grad) return;
  loss->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor* t = *it;
    if (t->requires_grad && t->backward_fn) t->backward_fn(*t);
  }
}

GradCheckReport grad_check(const std::string& op_name,
                           const std::function<TensorPtr(const TensorPtr&)>& f,
                           const TensorPtr& point, double h, double rel_tol,
                           double abs_tol) {
  GradCheckReport report;
  report.op_name = op_name;

  auto x = tensor(point->shape, point->data, true);
  auto y = f(x);
  if (y->numel() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
  backward(y);
  std::vector<double> analytic = x->grad;
  if (analytic.empty()) analytic.assign(x->data.size(), 0.0);

  auto probe = tensor(point->shape, point->data, false);
  for (std::size_t i = 0; i < probe->data.size(); ++i) {
    const double orig = probe->data[i];
    probe->data[i] = orig + h;
    const double fp = f(probe)->data[0];
    probe->data[i] = orig - h;
    const double fm = f(probe)->data[0];
    probe->data[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double abs_err = std::abs(analytic[i] - numeric);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-12});
    report.max_abs_err = std::max(report.max_abs_err, abs_err);
    report.max_rel_err = std::max(report.max_rel_err, abs_err / denom);
  }
  report.passed = (report.max_rel_err < rel_tol) || (report.max_abs_err < abs_tol);
  return report;
}

}  // namespace xphase
