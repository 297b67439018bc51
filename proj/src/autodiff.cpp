#include "ngsll/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

namespace ngsll::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Graph* graph_of(std::initializer_list<const Tensor*> operands) {
  Graph* g = nullptr;
  for (const Tensor* t : operands) {
    if (t->graph() == nullptr) continue;
    if (g != nullptr && g != t->graph()) {
      throw ContractError("operands are recorded on different graphs");
    }
    g = t->graph();
  }
  return g;
}

void require_nonempty(const Tensor& t, std::string_view op) {
  if (t.empty()) throw DimensionError(std::string(op) + ": empty tensor operand");
}

// outer × n × inner decomposition of `shape` around `axis`.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, std::string_view op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " is invalid for shape " + to_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// ---- elementwise helpers ----------------------------------------------------

enum class Broadcast { kEqual, kScalarA, kScalarB };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, std::string_view op) {
  require_nonempty(a, op);
  require_nonempty(b, op);
  if (a.shape() == b.shape()) return Broadcast::kEqual;
  if (a.size() == 1 && b.size() == 1) {
    return a.dim() >= b.dim() ? Broadcast::kScalarB : Broadcast::kScalarA;
  }
  if (a.size() == 1) return Broadcast::kScalarA;
  if (b.size() == 1) return Broadcast::kScalarB;
  throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) +
                       " and " + to_string(b.shape()));
}

template <typename Fwd>
std::vector<double> binary_values(const Tensor& a, const Tensor& b, Broadcast kind, Fwd f,
                                  std::size_t n) {
  std::vector<double> out(n);
  auto da = a.data();
  auto db = b.data();
  switch (kind) {
    case Broadcast::kEqual:
      for (std::size_t i = 0; i < n; ++i) out[i] = f(da[i], db[i]);
      break;
    case Broadcast::kScalarA:
      for (std::size_t i = 0; i < n; ++i) out[i] = f(da[0], db[i]);
      break;
    case Broadcast::kScalarB:
      for (std::size_t i = 0; i < n; ++i) out[i] = f(da[i], db[0]);
      break;
  }
  return out;
}

// Accumulates `contribution(i)` into the gradient of `t`, reducing to one
// element when `t` was broadcast as a scalar.
template <typename Contribution>
void accumulate(Graph& g, const Tensor& t, bool broadcast_scalar, std::size_t n,
                Contribution contribution) {
  if (t.node() < 0) return;
  auto gt = g.grad_buffer(t.node());
  if (broadcast_scalar) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += contribution(i);
    gt[0] += total;
  } else {
    for (std::size_t i = 0; i < n; ++i) gt[i] += contribution(i);
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, std::string_view kind, Fwd f, Deriv df) {
  require_nonempty(a, kind);
  Graph* g = graph_of({&a});
  const std::size_t n = a.size();
  std::vector<double> out(n);
  auto da = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(da[i]);
  if (g == nullptr) return Tensor(a.shape(), std::move(out));
  auto y = std::make_shared<std::vector<double>>(std::move(out));
  return g->record(kind, a.shape(), y, {a.node()},
                   [a, y, df](Graph& graph, std::span<const double> gout) {
                     if (a.node() < 0) return;
                     auto ga = graph.grad_buffer(a.node());
                     auto x = a.data();
                     for (std::size_t i = 0; i < gout.size(); ++i) {
                       ga[i] += gout[i] * df(x[i], (*y)[i]);
                     }
                   });
}

// ---- GEMM wrappers ----------------------------------------------------------

// C[m×n] (+)= op(A) · op(B), row-major.
void gemm(const double* a, bool trans_a, const double* b, bool trans_b, double* c, std::size_t m,
          std::size_t n, std::size_t k, bool accumulate_into) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  MutMap C(c, M, N);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate_into) {
      C.noalias() += lhs * rhs;
    } else {
      C.noalias() = lhs * rhs;
    }
  };
  if (!trans_a && !trans_b) {
    run(ConstMap(a, M, K), ConstMap(b, K, N));
  } else if (!trans_a && trans_b) {
    run(ConstMap(a, M, K), ConstMap(b, N, K).transpose());
  } else if (trans_a && !trans_b) {
    run(ConstMap(a, K, M).transpose(), ConstMap(b, K, N));
  } else {
    run(ConstMap(a, K, M).transpose(), ConstMap(b, N, K).transpose());
  }
}

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kh, kw;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kh * kw; }
  std::size_t out_plane() const { return out_h * out_w; }
};

void im2col(const double* x, const ConvGeometry& geo, double* cols) {
  const std::size_t plane = geo.out_plane();
  for (std::size_t c = 0; c < geo.channels; ++c) {
    const double* xc = x + c * geo.height * geo.width;
    for (std::size_t ky = 0; ky < geo.kh; ++ky) {
      for (std::size_t kx = 0; kx < geo.kw; ++kx) {
        double* row = cols + ((c * geo.kh + ky) * geo.kw + kx) * plane;
        for (std::size_t oy = 0; oy < geo.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * geo.stride + ky) -
                                    static_cast<std::ptrdiff_t>(geo.padding);
          double* dst = row + oy * geo.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(geo.height)) {
            std::fill(dst, dst + geo.out_w, 0.0);
            continue;
          }
          const double* src = xc + static_cast<std::size_t>(iy) * geo.width;
          for (std::size_t ox = 0; ox < geo.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * geo.stride + kx) -
                                      static_cast<std::ptrdiff_t>(geo.padding);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(geo.width))
                          ? 0.0
                          : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeometry& geo, double* x) {
  const std::size_t plane = geo.out_plane();
  for (std::size_t c = 0; c < geo.channels; ++c) {
    double* xc = x + c * geo.height * geo.width;
    for (std::size_t ky = 0; ky < geo.kh; ++ky) {
      for (std::size_t kx = 0; kx < geo.kw; ++kx) {
        const double* row = cols + ((c * geo.kh + ky) * geo.kw + kx) * plane;
        for (std::size_t oy = 0; oy < geo.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * geo.stride + ky) -
                                    static_cast<std::ptrdiff_t>(geo.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(geo.height)) continue;
          double* dst = xc + static_cast<std::size_t>(iy) * geo.width;
          const double* src = row + oy * geo.out_w;
          for (std::size_t ox = 0; ox < geo.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * geo.stride + kx) -
                                      static_cast<std::ptrdiff_t>(geo.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(geo.width)) continue;
            dst[static_cast<std::size_t>(ix)] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ---- Shape / Tensor ---------------------------------------------------------

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::make_shared<std::vector<double>>(std::move(data))) {
  if (numel(shape_) != data_->size()) {
    throw DimensionError("tensor shape " + to_string(shape_) + " holds " +
                         std::to_string(numel(shape_)) + " elements but " +
                         std::to_string(data_->size()) + " values were given");
  }
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape_));
  return (*data_)[0];
}

Tensor Tensor::clone() const {
  return Tensor(shape_, data_ ? *data_ : std::vector<double>{});
}

// ---- Graph ------------------------------------------------------------------

Tensor Graph::handle(int id) {
  Tensor t;
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  t.shape_ = n.shape;
  t.data_ = n.value;
  t.graph_ = this;
  t.node_ = id;
  return t;
}

Tensor Graph::variable(const Tensor& value) {
  if (value.graph() != nullptr) throw ContractError("variable(): tensor is already on a graph");
  Node n;
  n.kind = "leaf";
  n.shape = value.shape();
  n.value = std::make_shared<std::vector<double>>(value.data().begin(), value.data().end());
  nodes_.push_back(std::move(n));
  return handle(static_cast<int>(nodes_.size() - 1));
}

Tensor Graph::parameter(Parameter& p) {
  Node n;
  n.kind = "parameter";
  n.shape = p.value.shape();
  n.value = p.value.data_;  // shared: parameters are not copied per graph
  n.sink = &p;
  nodes_.push_back(std::move(n));
  return handle(static_cast<int>(nodes_.size() - 1));
}

Tensor Graph::record(std::string_view kind, Shape shape, std::vector<double> value,
                     std::vector<int> inputs, BackwardFn backward) {
  return record(kind, std::move(shape), std::make_shared<std::vector<double>>(std::move(value)),
                std::move(inputs), std::move(backward));
}

Tensor Graph::record(std::string_view kind, Shape shape, std::shared_ptr<std::vector<double>> value,
                     std::vector<int> inputs, BackwardFn backward) {
  if (numel(shape) != value->size()) {
    throw DimensionError(std::string(kind) + ": recorded value does not match shape " +
                         to_string(shape));
  }
  const int id = static_cast<int>(nodes_.size());
  for (int in : inputs) {
    if (in >= id) throw ContractError("graph operation consumes a later node");
  }
  Node n;
  n.kind = kind;
  n.inputs = std::move(inputs);
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return handle(id);
}

std::span<double> Graph::grad_buffer(int node) {
  Node& n = nodes_.at(static_cast<std::size_t>(node));
  if (n.grad.empty()) n.grad.assign(n.value->size(), 0.0);
  return n.grad;
}

void Graph::backward(const Tensor& loss) {
  if (loss.graph() != this) throw ContractError("backward(): loss is not recorded on this graph");
  if (loss.size() != 1) {
    throw ContractError("backward(): loss must be a scalar, got shape " +
                        to_string(loss.shape()));
  }
  if (differentiated_) throw ContractError("backward(): graph was already differentiated");
  differentiated_ = true;
  grad_buffer(loss.node())[0] = 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty()) continue;
    if (n.backward) n.backward(*this, n.grad);
  }
  for (Node& n : nodes_) {
    if (n.sink == nullptr || n.grad.empty()) continue;
    auto& sink = n.sink->grad;
    if (sink.size() != n.grad.size()) sink.assign(n.grad.size(), 0.0);
    for (std::size_t j = 0; j < sink.size(); ++j) sink[j] += n.grad[j];
  }
}

std::span<const double> Graph::grad(const Tensor& t) {
  if (t.graph() != this) throw ContractError("grad(): tensor is not recorded on this graph");
  return grad_buffer(t.node());
}

Tensor Graph::grad_tensor(const Tensor& t) {
  auto gspan = grad(t);
  return Tensor(t.shape(), std::vector<double>(gspan.begin(), gspan.end()));
}

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  const Broadcast kind = broadcast_kind(a, b, "add");
  const Shape shape = kind == Broadcast::kScalarA ? b.shape() : a.shape();
  const std::size_t n = numel(shape);
  auto out = binary_values(a, b, kind, [](double x, double y) { return x + y; }, n);
  Graph* g = graph_of({&a, &b});
  if (g == nullptr) return Tensor(shape, std::move(out));
  return g->record("add", shape, std::move(out), {a.node(), b.node()},
                   [a, b, kind](Graph& graph, std::span<const double> gout) {
                     const std::size_t n = gout.size();
                     accumulate(graph, a, kind == Broadcast::kScalarA, n,
                                [&](std::size_t i) { return gout[i]; });
                     accumulate(graph, b, kind == Broadcast::kScalarB, n,
                                [&](std::size_t i) { return gout[i]; });
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const Broadcast kind = broadcast_kind(a, b, "sub");
  const Shape shape = kind == Broadcast::kScalarA ? b.shape() : a.shape();
  const std::size_t n = numel(shape);
  auto out = binary_values(a, b, kind, [](double x, double y) { return x - y; }, n);
  Graph* g = graph_of({&a, &b});
  if (g == nullptr) return Tensor(shape, std::move(out));
  return g->record("sub", shape, std::move(out), {a.node(), b.node()},
                   [a, b, kind](Graph& graph, std::span<const double> gout) {
                     const std::size_t n = gout.size();
                     accumulate(graph, a, kind == Broadcast::kScalarA, n,
                                [&](std::size_t i) { return gout[i]; });
                     accumulate(graph, b, kind == Broadcast::kScalarB, n,
                                [&](std::size_t i) { return -gout[i]; });
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const Broadcast kind = broadcast_kind(a, b, "mul");
  const Shape shape = kind == Broadcast::kScalarA ? b.shape() : a.shape();
  const std::size_t n = numel(shape);
  auto out = binary_values(a, b, kind, [](double x, double y) { return x * y; }, n);
  Graph* g = graph_of({&a, &b});
  if (g == nullptr) return Tensor(shape, std::move(out));
  return g->record(
      "mul", shape, std::move(out), {a.node(), b.node()},
      [a, b, kind](Graph& graph, std::span<const double> gout) {
        const std::size_t n = gout.size();
        auto da = a.data();
        auto db = b.data();
        const bool a_scalar = kind == Broadcast::kScalarA;
        const bool b_scalar = kind == Broadcast::kScalarB;
        accumulate(graph, a, a_scalar, n,
                   [&](std::size_t i) { return gout[i] * db[b_scalar ? 0 : i]; });
        accumulate(graph, b, b_scalar, n,
                   [&](std::size_t i) { return gout[i] * da[a_scalar ? 0 : i]; });
      });
}

Tensor scale(const Tensor& a, double factor) { return mul(a, Tensor::scalar(factor)); }

Tensor square(const Tensor& a) {
  return unary(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary(
      a, "softplus",
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      });
}

Tensor masked_fill(const Tensor& a, std::span<const std::uint8_t> mask, double fill) {
  if (mask.size() != a.size()) {
    throw DimensionError("masked_fill: mask length " + std::to_string(mask.size()) +
                         " does not match tensor shape " + to_string(a.shape()));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask[i]) out[i] = fill;
  }
  Graph* g = graph_of({&a});
  if (g == nullptr) return Tensor(a.shape(), std::move(out));
  std::vector<std::uint8_t> keep(mask.begin(), mask.end());
  return g->record("masked_fill", a.shape(), std::move(out), {a.node()},
                   [a, keep = std::move(keep)](Graph& graph, std::span<const double> gout) {
                     if (a.node() < 0) return;
                     auto ga = graph.grad_buffer(a.node());
                     for (std::size_t i = 0; i < gout.size(); ++i) {
                       if (!keep[i]) ga[i] += gout[i];
                     }
                   });
}

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul: cannot multiply " + to_string(a.shape()) + " by " +
                         to_string(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  std::vector<double> out(m * n);
  gemm(a.data().data(), false, b.data().data(), false, out.data(), m, n, k, false);
  Graph* g = graph_of({&a, &b});
  if (g == nullptr) return Tensor({m, n}, std::move(out));
  return g->record("matmul", {m, n}, std::move(out), {a.node(), b.node()},
                   [a, b, m, k, n](Graph& graph, std::span<const double> gout) {
                     if (a.node() >= 0) {
                       gemm(gout.data(), false, b.data().data(), true,
                            graph.grad_buffer(a.node()).data(), m, k, n, true);
                     }
                     if (b.node() >= 0) {
                       gemm(a.data().data(), true, gout.data(), false,
                            graph.grad_buffer(b.node()).data(), k, n, m, true);
                     }
                   });
}

Tensor transpose(const Tensor& a) {
  if (a.dim() != 2) throw DimensionError("transpose: expected 2-D, got " + to_string(a.shape()));
  const std::size_t r = a.extent(0), c = a.extent(1);
  std::vector<double> out(r * c);
  auto da = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = da[i * c + j];
  }
  Graph* g = graph_of({&a});
  if (g == nullptr) return Tensor({c, r}, std::move(out));
  return g->record("transpose", {c, r}, std::move(out), {a.node()},
                   [a, r, c](Graph& graph, std::span<const double> gout) {
                     if (a.node() < 0) return;
                     auto ga = graph.grad_buffer(a.node());
                     for (std::size_t i = 0; i < r; ++i) {
                       for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += gout[j * r + i];
                     }
                   });
}

Tensor conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias, Conv2dOptions options) {
  const bool batched = x.dim() == 4;
  if (x.dim() != 3 && x.dim() != 4) {
    throw DimensionError("conv2d: input must be [c×h×w] or [n×c×h×w], got " +
                         to_string(x.shape()));
  }
  if (kernels.dim() != 4) {
    throw DimensionError("conv2d: kernels must be [o×c×kh×kw], got " +
                         to_string(kernels.shape()));
  }
  if (options.stride == 0) throw ContractError("conv2d: stride must be positive");
  ConvGeometry geo{};
  geo.batch = batched ? x.extent(0) : 1;
  const std::size_t off = batched ? 1 : 0;
  geo.channels = x.extent(off);
  geo.height = x.extent(off + 1);
  geo.width = x.extent(off + 2);
  geo.out_channels = kernels.extent(0);
  geo.kh = kernels.extent(2);
  geo.kw = kernels.extent(3);
  geo.stride = options.stride;
  geo.padding = options.padding;
  if (kernels.extent(1) != geo.channels) {
    throw DimensionError("conv2d: kernels " + to_string(kernels.shape()) +
                         " do not match input channels of " + to_string(x.shape()));
  }
  if (geo.kh > geo.height + 2 * geo.padding || geo.kw > geo.width + 2 * geo.padding) {
    throw DimensionError("conv2d: kernel " + to_string(kernels.shape()) +
                         " is larger than padded input " + to_string(x.shape()));
  }
  if (!bias.empty() && (bias.dim() != 1 || bias.extent(0) != geo.out_channels)) {
    throw DimensionError("conv2d: bias " + to_string(bias.shape()) + " does not match kernels " +
                         to_string(kernels.shape()));
  }
  geo.out_h = (geo.height + 2 * geo.padding - geo.kh) / geo.stride + 1;
  geo.out_w = (geo.width + 2 * geo.padding - geo.kw) / geo.stride + 1;

  const std::size_t in_size = geo.channels * geo.height * geo.width;
  const std::size_t out_size = geo.out_channels * geo.out_plane();
  const std::size_t cols_size = geo.patch() * geo.out_plane();
  auto cols = std::make_shared<std::vector<double>>(geo.batch * cols_size);
  std::vector<double> out(geo.batch * out_size);
  for (std::size_t s = 0; s < geo.batch; ++s) {
    double* c = cols->data() + s * cols_size;
    im2col(x.data().data() + s * in_size, geo, c);
    double* o = out.data() + s * out_size;
    gemm(kernels.data().data(), false, c, false, o, geo.out_channels, geo.out_plane(),
         geo.patch(), false);
    if (!bias.empty()) {
      for (std::size_t oc = 0; oc < geo.out_channels; ++oc) {
        double* row = o + oc * geo.out_plane();
        for (std::size_t p = 0; p < geo.out_plane(); ++p) row[p] += bias[oc];
      }
    }
  }
  Shape shape = batched ? Shape{geo.batch, geo.out_channels, geo.out_h, geo.out_w}
                        : Shape{geo.out_channels, geo.out_h, geo.out_w};
  Graph* g = graph_of({&x, &kernels, &bias});
  if (g == nullptr) return Tensor(std::move(shape), std::move(out));
  return g->record(
      "conv2d", std::move(shape), std::move(out), {x.node(), kernels.node(), bias.node()},
      [x, kernels, bias, geo, cols, in_size, out_size, cols_size](Graph& graph,
                                                                  std::span<const double> gout) {
        std::vector<double> dcols(x.node() >= 0 ? cols_size : 0);
        for (std::size_t s = 0; s < geo.batch; ++s) {
          const double* go = gout.data() + s * out_size;
          if (kernels.node() >= 0) {
            gemm(go, false, cols->data() + s * cols_size, true,
                 graph.grad_buffer(kernels.node()).data(), geo.out_channels, geo.patch(),
                 geo.out_plane(), true);
          }
          if (!bias.empty() && bias.node() >= 0) {
            auto gb = graph.grad_buffer(bias.node());
            for (std::size_t oc = 0; oc < geo.out_channels; ++oc) {
              const double* row = go + oc * geo.out_plane();
              double acc = 0.0;
              for (std::size_t p = 0; p < geo.out_plane(); ++p) acc += row[p];
              gb[oc] += acc;
            }
          }
          if (x.node() >= 0) {
            gemm(kernels.data().data(), true, go, false, dcols.data(), geo.patch(),
                 geo.out_plane(), geo.out_channels, false);
            col2im(dcols.data(), geo, graph.grad_buffer(x.node()).data() + s * in_size);
          }
        }
      });
}

Tensor max_pool2d(const Tensor& x, PoolOptions options) {
  if (x.dim() < 2) throw DimensionError("max_pool2d: need at least 2 axes, got " +
                                        to_string(x.shape()));
  if (options.stride_h == 0 || options.stride_w == 0 || options.window_h == 0 ||
      options.window_w == 0) {
    throw ContractError("max_pool2d: window and stride must be positive");
  }
  const std::size_t h = x.extent(x.dim() - 2);
  const std::size_t w = x.extent(x.dim() - 1);
  if (options.window_h > h || options.window_w > w) {
    throw DimensionError("max_pool2d: window " + std::to_string(options.window_h) + "x" +
                         std::to_string(options.window_w) + " exceeds input " +
                         to_string(x.shape()));
  }
  const std::size_t oh = (h - options.window_h) / options.stride_h + 1;
  const std::size_t ow = (w - options.window_w) / options.stride_w + 1;
  const std::size_t planes = x.size() / (h * w);
  std::vector<double> out(planes * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  auto dx = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t base = p * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = base + (oy * options.stride_h) * w + ox * options.stride_w;
        for (std::size_t ky = 0; ky < options.window_h; ++ky) {
          for (std::size_t kx = 0; kx < options.window_w; ++kx) {
            const std::size_t idx =
                base + (oy * options.stride_h + ky) * w + ox * options.stride_w + kx;
            if (dx[idx] > dx[best]) best = idx;
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = dx[best];
        (*argmax)[o] = best;
      }
    }
  }
  Shape shape = x.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  Graph* g = graph_of({&x});
  if (g == nullptr) return Tensor(std::move(shape), std::move(out));
  return g->record("max_pool2d", std::move(shape), std::move(out), {x.node()},
                   [x, argmax](Graph& graph, std::span<const double> gout) {
                     if (x.node() < 0) return;
                     auto gx = graph.grad_buffer(x.node());
                     for (std::size_t o = 0; o < gout.size(); ++o) gx[(*argmax)[o]] += gout[o];
                   });
}

Tensor max_pool2d(const Tensor& x, std::size_t window, std::size_t stride) {
  return max_pool2d(x, PoolOptions{window, window, stride, stride});
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& a) {
  require_nonempty(a, "sum");
  double total = 0.0;
  for (double v : a.data()) total += v;
  Graph* g = graph_of({&a});
  if (g == nullptr) return Tensor::scalar(total);
  return g->record("sum", {}, {total}, {a.node()},
                   [a](Graph& graph, std::span<const double> gout) {
                     if (a.node() < 0) return;
                     auto ga = graph.grad_buffer(a.node());
                     for (double& v : ga) v += gout[0];
                   });
}

Tensor sum(const Tensor& a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis, "sum");
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(s.outer * s.inner, 0.0);
  auto da = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.n; ++j) {
      const double* src = da.data() + (o * s.n + j) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  Graph* g = graph_of({&a});
  if (g == nullptr) return Tensor(std::move(shape), std::move(out));
  return g->record("sum_axis", std::move(shape), std::move(out), {a.node()},
                   [a, s](Graph& graph, std::span<const double> gout) {
                     if (a.node() < 0) return;
                     auto ga = graph.grad_buffer(a.node());
                     for (std::size_t o = 0; o < s.outer; ++o) {
                       for (std::size_t j = 0; j < s.n; ++j) {
                         for (std::size_t i = 0; i < s.inner; ++i) {
                           ga[(o * s.n + j) * s.inner + i] += gout[o * s.inner + i];
                         }
                       }
                     }
                   });
}

Tensor mean(const Tensor& a) {
  require_nonempty(a, "mean");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor mean(const Tensor& a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis, "mean");
  return scale(sum(a, axis), 1.0 / static_cast<double>(s.n));
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis, "softmax");
  std::vector<double> out(a.size());
  auto da = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t j) { return (o * s.n + j) * s.inner + i; };
      double mx = kNegInf;
      for (std::size_t j = 0; j < s.n; ++j) mx = std::max(mx, da[at(j)]);
      if (mx == kNegInf) throw DomainError("softmax: every entry along the axis is -inf");
      double total = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) {
        const double v = da[at(j)] == kNegInf ? 0.0 : std::exp(da[at(j)] - mx);
        out[at(j)] = v;
        total += v;
      }
      for (std::size_t j = 0; j < s.n; ++j) out[at(j)] /= total;
    }
  }
  Graph* g = graph_of({&a});
  if (g == nullptr) return Tensor(a.shape(), std::move(out));
  auto y = std::make_shared<std::vector<double>>(std::move(out));
  return g->record("softmax", a.shape(), y, {a.node()},
                   [a, s, y](Graph& graph, std::span<const double> gout) {
                     if (a.node() < 0) return;
                     auto ga = graph.grad_buffer(a.node());
                     for (std::size_t o = 0; o < s.outer; ++o) {
                       for (std::size_t i = 0; i < s.inner; ++i) {
                         auto at = [&](std::size_t j) { return (o * s.n + j) * s.inner + i; };
                         double dot = 0.0;
                         for (std::size_t j = 0; j < s.n; ++j) dot += (*y)[at(j)] * gout[at(j)];
                         for (std::size_t j = 0; j < s.n; ++j) {
                           const double yj = (*y)[at(j)];
                           if (yj != 0.0) ga[at(j)] += yj * (gout[at(j)] - dot);
                         }
                       }
                     }
                   });
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis, "log_softmax");
  std::vector<double> out(a.size());
  auto da = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t j) { return (o * s.n + j) * s.inner + i; };
      double mx = kNegInf;
      for (std::size_t j = 0; j < s.n; ++j) mx = std::max(mx, da[at(j)]);
      if (mx == kNegInf) throw DomainError("log_softmax: every entry along the axis is -inf");
      double total = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) {
        if (da[at(j)] != kNegInf) total += std::exp(da[at(j)] - mx);
      }
      const double lse = mx + std::log(total);
      for (std::size_t j = 0; j < s.n; ++j) out[at(j)] = da[at(j)] - lse;
    }
  }
  Graph* g = graph_of({&a});
  if (g == nullptr) return Tensor(a.shape(), std::move(out));
  auto y = std::make_shared<std::vector<double>>(std::move(out));
  return g->record("log_softmax", a.shape(), y, {a.node()},
                   [a, s, y](Graph& graph, std::span<const double> gout) {
                     if (a.node() < 0) return;
                     auto ga = graph.grad_buffer(a.node());
                     for (std::size_t o = 0; o < s.outer; ++o) {
                       for (std::size_t i = 0; i < s.inner; ++i) {
                         auto at = [&](std::size_t j) { return (o * s.n + j) * s.inner + i; };
                         double total = 0.0;
                         for (std::size_t j = 0; j < s.n; ++j) total += gout[at(j)];
                         for (std::size_t j = 0; j < s.n; ++j) {
                           ga[at(j)] += gout[at(j)] - std::exp((*y)[at(j)]) * total;
                         }
                       }
                     }
                   });
}

// ---- structural -------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " +
                         to_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  Graph* g = graph_of({&a});
  if (g == nullptr) return Tensor(std::move(shape), std::move(out));
  return g->record("reshape", std::move(shape), std::move(out), {a.node()},
                   [a](Graph& graph, std::span<const double> gout) {
                     if (a.node() < 0) return;
                     auto ga = graph.grad_buffer(a.node());
                     for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i];
                   });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  if (table.dim() != 2) {
    throw DimensionError("gather_rows: table must be 2-D, got " + to_string(table.shape()));
  }
  const std::size_t rows = table.extent(0), cols = table.extent(1);
  std::vector<double> out(ids.size() * cols);
  auto dt = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= rows) {
      throw DimensionError("gather_rows: row " + std::to_string(ids[r]) + " outside table " +
                           to_string(table.shape()));
    }
    std::copy_n(dt.begin() + static_cast<std::ptrdiff_t>(ids[r] * cols), cols,
                out.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  Graph* g = graph_of({&table});
  if (g == nullptr) return Tensor({ids.size(), cols}, std::move(out));
  std::vector<std::size_t> rows_used(ids.begin(), ids.end());
  return g->record("gather_rows", {ids.size(), cols}, std::move(out), {table.node()},
                   [table, cols, rows_used = std::move(rows_used)](Graph& graph,
                                                                   std::span<const double> gout) {
                     if (table.node() < 0) return;
                     auto gt = graph.grad_buffer(table.node());
                     for (std::size_t r = 0; r < rows_used.size(); ++r) {
                       for (std::size_t c = 0; c < cols; ++c) {
                         gt[rows_used[r] * cols + c] += gout[r * cols + c];
                       }
                     }
                   });
}

Tensor concat(std::span<const Tensor> parts) {
  std::vector<double> out;
  std::vector<int> inputs;
  Graph* g = nullptr;
  for (const Tensor& p : parts) {
    if (p.dim() != 1) throw DimensionError("concat: expected 1-D parts, got " +
                                           to_string(p.shape()));
    Graph* pg = graph_of({&p});
    if (pg != nullptr) {
      if (g != nullptr && g != pg) throw ContractError("operands are recorded on different graphs");
      g = pg;
    }
    out.insert(out.end(), p.data().begin(), p.data().end());
    inputs.push_back(p.node());
  }
  const std::size_t n = out.size();
  if (g == nullptr) return Tensor({n}, std::move(out));
  std::vector<Tensor> saved(parts.begin(), parts.end());
  return g->record("concat", {n}, std::move(out), std::move(inputs),
                   [saved = std::move(saved)](Graph& graph, std::span<const double> gout) {
                     std::size_t offset = 0;
                     for (const Tensor& p : saved) {
                       if (p.node() >= 0) {
                         auto gp = graph.grad_buffer(p.node());
                         for (std::size_t i = 0; i < p.size(); ++i) gp[i] += gout[offset + i];
                       }
                       offset += p.size();
                     }
                   });
}

Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("stack: no parts");
  const Shape& inner = parts.front().shape();
  std::vector<double> out;
  out.reserve(parts.size() * parts.front().size());
  std::vector<int> inputs;
  Graph* g = nullptr;
  for (const Tensor& p : parts) {
    if (p.shape() != inner) {
      throw DimensionError("stack: shape " + to_string(p.shape()) + " differs from " +
                           to_string(inner));
    }
    if (p.graph() != nullptr) {
      if (g != nullptr && g != p.graph()) {
        throw ContractError("operands are recorded on different graphs");
      }
      g = p.graph();
    }
    out.insert(out.end(), p.data().begin(), p.data().end());
    inputs.push_back(p.node());
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  if (g == nullptr) return Tensor(std::move(shape), std::move(out));
  std::vector<Tensor> saved(parts.begin(), parts.end());
  return g->record("stack", std::move(shape), std::move(out), std::move(inputs),
                   [saved = std::move(saved)](Graph& graph, std::span<const double> gout) {
                     std::size_t offset = 0;
                     for (const Tensor& p : saved) {
                       if (p.node() >= 0) {
                         auto gp = graph.grad_buffer(p.node());
                         for (std::size_t i = 0; i < p.size(); ++i) gp[i] += gout[offset + i];
                       }
                       offset += p.size();
                     }
                   });
}

// ---- verification -----------------------------------------------------------

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_difference_grad: eps must be positive");
  Tensor probe = x.clone();
  std::vector<double> grad(x.size());
  auto pd = probe.mutable_data();
  for (std::size_t j = 0; j < grad.size(); ++j) {
    const double saved = pd[j];
    pd[j] = saved + eps;
    const double up = f(probe);
    pd[j] = saved - eps;
    const double down = f(probe);
    pd[j] = saved;
    grad[j] = (up - down) / (2.0 * eps);
  }
  return Tensor(x.shape(), std::move(grad));
}

double relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw DimensionError("relative_error: length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace ngsll::ad
