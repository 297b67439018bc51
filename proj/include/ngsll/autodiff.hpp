#pragma once

// Dense tensors with a tape-based reverse-mode differentiator.
//
// A Tensor is a cheap handle: copies share the same buffer. Tensors created
// without a Graph are constants. Any operation that touches a graph tensor
// records itself on that graph; Graph::backward() then replays the tape in
// reverse.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ngsll/errors.hpp"

namespace ngsll::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Graph;

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t dim() const noexcept { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_ ? data_->size() : 0; }
  bool empty() const noexcept { return size() == 0; }

  std::span<const double> data() const noexcept {
    return data_ ? std::span<const double>(*data_) : std::span<const double>();
  }
  // Writes through to every handle sharing this buffer. Only meaningful for
  // constants and parameter storage; never mutate a tensor recorded on a live graph.
  std::span<double> mutable_data() noexcept {
    return data_ ? std::span<double>(*data_) : std::span<double>();
  }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double item() const;

  Tensor clone() const;  // deep copy, detached from any graph

  bool is_constant() const noexcept { return graph_ == nullptr; }
  Graph* graph() const noexcept { return graph_; }
  int node() const noexcept { return node_; }

 private:
  friend class Graph;

  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  Graph* graph_ = nullptr;
  int node_ = -1;
};

/// Named trainable tensor. `grad` is filled by Graph::backward for every
/// graph the parameter was bound into.
struct Parameter {
  std::string name;
  Tensor value;
  std::vector<double> grad;

  void zero_grad() { grad.assign(value.size(), 0.0); }
};

/// Receives d(loss)/d(output) and accumulates into input gradients.
using BackwardFn = std::function<void(Graph&, std::span<const double>)>;

class Graph {
 public:
  struct Node {
    std::string_view kind;
    std::vector<int> inputs;
    Shape shape;
    std::shared_ptr<std::vector<double>> value;
    std::vector<double> grad;
    BackwardFn backward;
    Parameter* sink = nullptr;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Differentiable input without a parameter binding.
  Tensor variable(const Tensor& value);
  /// Differentiable input whose gradient is added into `p.grad` on backward.
  Tensor parameter(Parameter& p);

  /// Appends an operation. `inputs` are node ids (-1 for constants).
  Tensor record(std::string_view kind, Shape shape, std::vector<double> value,
                std::vector<int> inputs, BackwardFn backward);
  /// As above, for closures that keep a reference to the output values.
  Tensor record(std::string_view kind, Shape shape, std::shared_ptr<std::vector<double>> value,
                std::vector<int> inputs, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and visits every recorded operation once, newest first.
  void backward(const Tensor& loss);

  /// Gradient buffer of a recorded tensor; same length as the tensor.
  /// Gradient of a recorded tensor; zeros when backward() never reached it.
  std::span<const double> grad(const Tensor& t);
  Tensor grad_tensor(const Tensor& t);

  /// Accumulation target used by backward closures; allocated on first use.
  std::span<double> grad_buffer(int node);

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  bool differentiated() const noexcept { return differentiated_; }

 private:
  Tensor handle(int id);

  std::vector<Node> nodes_;
  bool differentiated_ = false;
};

// ---- elementwise -----------------------------------------------------------
// Binary ops accept equal shapes, or a scalar (one element) on either side.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);  // subgradient 0 at the kink
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // DomainError on non-positive input
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);  // log(1 + exp(a)), stable for large |a|

/// Replaces entries where `mask[i] != 0` with `fill`; those entries receive no gradient.
Tensor masked_fill(const Tensor& a, std::span<const std::uint8_t> mask, double fill);

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);  // 2-D only

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Cross-correlation. `x` is [c×h×w] or batched [n×c×h×w]; kernels [o×c×kh×kw];
/// optional `bias` is [o].
Tensor conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias = {},
              Conv2dOptions options = {});

struct PoolOptions {
  std::size_t window_h = 2;
  std::size_t window_w = 2;
  std::size_t stride_h = 2;
  std::size_t stride_w = 2;
};

/// Per-window maximum over the two trailing axes. Ties route gradient to the
/// lowest linear index inside the window.
Tensor max_pool2d(const Tensor& x, PoolOptions options);
Tensor max_pool2d(const Tensor& x, std::size_t window, std::size_t stride);

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& a);  // all elements → scalar
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis);
/// Entries equal to -inf are treated as excluded and come out exactly 0.
Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);

// ---- structural ------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);
/// Rows of a 2-D `table` selected by `ids` → [ids.size() × table.cols].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);
/// Concatenates 1-D tensors.
Tensor concat(std::span<const Tensor> parts);
/// Stacks equal-shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> parts);

// ---- verification ----------------------------------------------------------

/// Central differences (f(x+eps·e_j) − f(x−eps·e_j)) / (2·eps) for every coordinate.
/// `f` receives a constant tensor and must return a scalar; it must be deterministic.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double eps = 1e-4);

/// max_i |a_i − b_i| / max(|a_i|, |b_i|, floor). The floor keeps components that
/// are zero in both vectors from dividing by zero.
double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-3);

}  // namespace ngsll::ad
