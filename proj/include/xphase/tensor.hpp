#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace xphase {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Reverse-mode autodiff node holding 64-bit values in row-major order.
//
// Graph nodes are pure: every op allocates a fresh output and never writes
// into its inputs, so a tensor's data is fixed once a graph has consumed it.
// Leaf tensors (parameters) may be mutated between graphs, e.g. by the
// optimizer, after the graph that consumed them has been dropped.
//
// A graph is confined to one thread during construction and backward.
// Distinct graphs may share leaf tensors and run in parallel as long as
// nobody mutates the leaves meanwhile.
struct Tensor : std::enable_shared_from_this<Tensor> {
  std::vector<std::int64_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized by backward(); same length as data
  bool requires_grad = false;

  std::vector<TensorPtr> parents;
  std::function<void(Tensor&)> backward_fn;  // scatters this->grad to parents
  std::string op;  // node label, used in diagnostics

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  void zero_grad() { grad.assign(data.size(), 0.0); }
  void accumulate_grad(const double* g) {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    for (std::size_t i = 0; i < data.size(); ++i) grad[i] += g[i];
  }
};

std::int64_t shape_numel(const std::vector<std::int64_t>& shape);
std::string shape_str(const std::vector<std::int64_t>& shape);

TensorPtr tensor(std::vector<std::int64_t> shape, std::vector<double> data,
                 bool requires_grad = false);
TensorPtr zeros(std::vector<std::int64_t> shape, bool requires_grad = false);
TensorPtr full(std::vector<std::int64_t> shape, double value,
               bool requires_grad = false);
TensorPtr scalar(double value, bool requires_grad = false);

// Elementwise and shape plumbing. All ops check shapes and throw
// std::invalid_argument on mismatch.
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scalar_mul(const TensorPtr& a, double s);
TensorPtr sum(const TensorPtr& a);
TensorPtr mean(const TensorPtr& a);
TensorPtr reshape(const TensorPtr& a, std::vector<std::int64_t> shape);
TensorPtr concat_rows(const std::vector<TensorPtr>& parts);
TensorPtr select_row(const TensorPtr& m, std::int64_t row);
TensorPtr transpose2d(const TensorPtr& a);

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
// y = W x + b with x: [K], W: [P,K], b: [P]
TensorPtr fully_connected(const TensorPtr& x, const TensorPtr& w,
                          const TensorPtr& b);
TensorPtr leaky_relu(const TensorPtr& a, double slope);
// Row-wise softmax with max subtraction for stability.
TensorPtr softmax_rows(const TensorPtr& a);
// -log softmax(logits)[label] in the fused logsumexp form.
TensorPtr cross_entropy(const TensorPtr& logits, std::int64_t label);

// Zero-padded "same" 3x3x3 convolution. input: [Cin,H,W,D],
// kernel: [Cout,Cin,3,3,3], bias: [Cout], stride 1 or 2. Stride 1 preserves
// the spatial extents; stride 2 requires even extents and halves them.
TensorPtr conv3d(const TensorPtr& input, const TensorPtr& kernel,
                 const TensorPtr& bias, int stride);

// Per-channel normalization over all spatial positions of one instance.
// input: [C,H,W,D], gamma/beta: [C].
TensorPtr instance_norm(const TensorPtr& input, const TensorPtr& gamma,
                        const TensorPtr& beta, double eps);

// Reverse-topological gradient accumulation from a scalar root. Re-zeroes
// the grad of every tensor reachable from `loss`, seeds d loss/d loss = 1,
// then runs each node's backward_fn; fan-out accumulates additively.
void backward(const TensorPtr& loss);

struct GradCheckReport {
  std::string op_name;
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  bool passed = false;
};

// Compares the analytic gradient of f at `point` against central finite
// differences (f(x+h)-f(x-h))/2h componentwise. f must map a tensor to a
// scalar tensor and be smooth near `point`.
GradCheckReport grad_check(const std::string& op_name,
                           const std::function<TensorPtr(const TensorPtr&)>& f,
                           const TensorPtr& point, double h = 1e-4,
                           double rel_tol = 1e-4, double abs_tol = 1e-6);

}  // namespace xphase
