#include "spiketim/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <string>

#include "spiketim/errors.hpp"

namespace spiketim {

namespace {

double g_conv2d_kernel_grad_scale = 1.0;

template <typename Real>
using NodeT = detail::Node<Real>;

template <typename Real>
NodeT<Real>& parent(NodeT<Real>& node, std::size_t i) {
  return *node.parents[i];
}

// Index map from an output element to the (possibly broadcast) operands.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> a_strides;
  std::vector<std::size_t> b_strides;
  bool same = false;
};

std::vector<std::size_t> aligned_strides(const Shape& shape, std::size_t out_rank,
                                         const Shape& out) {
  std::vector<std::size_t> strides(out_rank, 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    const std::size_t src = shape.size() - 1 - i;
    const std::size_t dst = out_rank - 1 - i;
    strides[dst] = (shape[src] == 1 && out[dst] != 1) ? 0 : stride;
    stride *= shape[src];
  }
  return strides;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  plan.out.assign(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t eb = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_to_string(a) + " and " +
                           shape_to_string(b) + " do not broadcast");
    }
    plan.out[rank - 1 - i] = std::max(ea, eb);
  }
  plan.a_strides = aligned_strides(a, rank, plan.out);
  plan.b_strides = aligned_strides(b, rank, plan.out);
  return plan;
}

// Calls f(out_index, a_index, b_index) for every output element in order.
template <typename F>
void for_each_broadcast(const BroadcastPlan& plan, F&& f) {
  const std::size_t n = shape_numel(plan.out);
  if (plan.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t rank = plan.out.size();
  std::vector<std::size_t> counter(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      ia += plan.a_strides[d];
      ib += plan.b_strides[d];
      if (counter[d] < plan.out[d]) break;
      ia -= plan.a_strides[d] * counter[d];
      ib -= plan.b_strides[d] * counter[d];
      counter[d] = 0;
    }
  }
}

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t d = shape.size(); d-- > 1;) strides[d - 1] = strides[d] * shape[d];
  return strides;
}

enum class BinaryKind { kAdd, kSub, kMul };

template <typename Real>
Tensor<Real> binary(const Tensor<Real>& a, const Tensor<Real>& b, BinaryKind kind,
                    const char* name) {
  auto plan = plan_broadcast(a.shape(), b.shape(), name);
  std::vector<Real> out(shape_numel(plan.out));
  const auto ad = a.data();
  const auto bd = b.data();
  switch (kind) {
    case BinaryKind::kAdd:
      for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        out[i] = ad[ia] + bd[ib];
      });
      break;
    case BinaryKind::kSub:
      for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        out[i] = ad[ia] - bd[ib];
      });
      break;
    case BinaryKind::kMul:
      for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        out[i] = ad[ia] * bd[ib];
      });
      break;
  }
  Shape out_shape = plan.out;
  return make_result<Real>(
      std::move(out_shape), std::move(out), {a, b}, [plan, kind](NodeT<Real>& node) {
        auto& pa = parent(node, 0);
        auto& pb = parent(node, 1);
        const auto& g = node.grad;
        Real* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
        Real* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
        const Real* av = pa.data.data();
        const Real* bv = pb.data.data();
        for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
          switch (kind) {
            case BinaryKind::kAdd:
              if (ga) ga[ia] += g[i];
              if (gb) gb[ib] += g[i];
              break;
            case BinaryKind::kSub:
              if (ga) ga[ia] += g[i];
              if (gb) gb[ib] -= g[i];
              break;
            case BinaryKind::kMul:
              if (ga) ga[ia] += g[i] * bv[ib];
              if (gb) gb[ib] += g[i] * av[ia];
              break;
          }
        });
      });
}

}  // namespace

namespace fault_injection {
void set_conv2d_kernel_grad_scale(double factor) { g_conv2d_kernel_grad_scale = factor; }
double conv2d_kernel_grad_scale() { return g_conv2d_kernel_grad_scale; }
}  // namespace fault_injection

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  return binary(a, b, BinaryKind::kAdd, "add");
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  return binary(a, b, BinaryKind::kSub, "sub");
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  return binary(a, b, BinaryKind::kMul, "mul");
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real factor) {
  std::vector<Real> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_result<Real>(a.shape(), std::move(out), {a}, [factor](NodeT<Real>& node) {
    auto& pa = parent(node, 0);
    if (!pa.requires_grad) return;
    auto& ga = pa.ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += node.grad[i] * factor;
  });
}

template <typename Real>
Tensor<Real> add_scalar(const Tensor<Real>& a, Real value) {
  std::vector<Real> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += value;
  return make_result<Real>(a.shape(), std::move(out), {a}, [](NodeT<Real>& node) {
    auto& pa = parent(node, 0);
    if (!pa.requires_grad) return;
    auto& ga = pa.ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += node.grad[i];
  });
}

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_to_string(a.shape()) +
                         " and " + shape_to_string(b.shape()));
  }
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape()[a.rank() - 1];
  const std::size_t k2 = b.shape()[b.rank() - 2];
  const std::size_t n = b.shape()[b.rank() - 1];
  if (k != k2) {
    throw DimensionError("matmul inner extents differ: " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  BroadcastPlan plan;
  try {
    plan = plan_broadcast(batch_a, batch_b, "matmul");
  } catch (const DimensionError&) {
    throw DimensionError("matmul batch extents do not broadcast: " + shape_to_string(a.shape()) +
                         " x " + shape_to_string(b.shape()));
  }
  Shape out_shape = plan.out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<Real> out(shape_numel(out_shape), Real(0));
  const Real* ad = a.data().data();
  const Real* bd = b.data().data();
  for_each_broadcast(plan, [&](std::size_t bi, std::size_t ba, std::size_t bb) {
    const Real* am = ad + ba * m * k;
    const Real* bm = bd + bb * k * n;
    Real* cm = out.data() + bi * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const Real av = am[i * k + p];
        if (av == Real(0)) continue;
        const Real* brow = bm + p * n;
        Real* crow = cm + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
  return make_result<Real>(
      std::move(out_shape), std::move(out), {a, b}, [plan, m, k, n](NodeT<Real>& node) {
        auto& pa = parent(node, 0);
        auto& pb = parent(node, 1);
        Real* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
        Real* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
        const Real* ad = pa.data.data();
        const Real* bd = pb.data.data();
        for_each_broadcast(plan, [&](std::size_t bi, std::size_t ba, std::size_t bb) {
          const Real* g = node.grad.data() + bi * m * n;
          const Real* am = ad + ba * m * k;
          const Real* bm = bd + bb * k * n;
          if (ga) {
            Real* gam = ga + ba * m * k;
            for (std::size_t i = 0; i < m; ++i) {
              for (std::size_t p = 0; p < k; ++p) {
                Real acc = 0;
                for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bm[p * n + j];
                gam[i * k + p] += acc;
              }
            }
          }
          if (gb) {
            Real* gbm = gb + bb * k * n;
            for (std::size_t i = 0; i < m; ++i) {
              for (std::size_t p = 0; p < k; ++p) {
                const Real av = am[i * k + p];
                if (av == Real(0)) continue;
                for (std::size_t j = 0; j < n; ++j) gbm[p * n + j] += av * g[i * n + j];
              }
            }
          }
        });
      });
}

namespace {

template <typename Real>
std::vector<Real> transposed(const Real* m, std::size_t rows, std::size_t cols) {
  std::vector<Real> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = m[r * cols + c];
  return t;
}

}  // namespace

template <typename Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& weight, const Tensor<Real>& bias) {
  if (weight.rank() != 2 || x.rank() < 1 || x.shape().back() != weight.shape()[1]) {
    throw DimensionError("linear: input " + shape_to_string(x.shape()) +
                         " incompatible with weight " + shape_to_string(weight.shape()));
  }
  const std::size_t in = weight.shape()[1];
  const std::size_t out_features = weight.shape()[0];
  if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != out_features)) {
    throw DimensionError("linear: bias " + shape_to_string(bias.shape()) + " for weight " +
                         shape_to_string(weight.shape()));
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_features;
  std::vector<Real> out(rows * out_features);
  const Real* xd = x.data().data();
  // Row-times-W^T as AXPYs over the output features; spike inputs are mostly
  // zero and get skipped.
  const std::vector<Real> wt = transposed(weight.data().data(), out_features, in);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = xd + r * in;
    Real* orow = out.data() + r * out_features;
    if (bias.defined()) std::copy(bias.data().begin(), bias.data().end(), orow);
    for (std::size_t p = 0; p < in; ++p) {
      const Real xv = xr[p];
      if (xv == Real(0)) continue;
      const Real* wrow = wt.data() + p * out_features;
      for (std::size_t o = 0; o < out_features; ++o) orow[o] += xv * wrow[o];
    }
  }
  std::vector<Tensor<Real>> inputs{x, weight};
  const bool has_bias = bias.defined();
  if (has_bias) inputs.push_back(bias);
  return make_result<Real>(
      std::move(out_shape), std::move(out), inputs,
      [rows, in, out_features, has_bias](NodeT<Real>& node) {
        auto& px = parent(node, 0);
        auto& pw = parent(node, 1);
        const Real* g = node.grad.data();
        if (px.requires_grad) {
          Real* gx = px.ensure_grad().data();
          const Real* wd = pw.data.data();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t o = 0; o < out_features; ++o) {
              const Real go = g[r * out_features + o];
              if (go == Real(0)) continue;
              const Real* wr = wd + o * in;
              Real* gxr = gx + r * in;
              for (std::size_t p = 0; p < in; ++p) gxr[p] += go * wr[p];
            }
          }
        }
        if (pw.requires_grad) {
          // Accumulate dW^T row by row, skipping zero inputs, then add it in.
          std::vector<Real> gwt(in * out_features, Real(0));
          const Real* xd = px.data.data();
          for (std::size_t r = 0; r < rows; ++r) {
            const Real* xr = xd + r * in;
            const Real* gr = g + r * out_features;
            for (std::size_t p = 0; p < in; ++p) {
              const Real xv = xr[p];
              if (xv == Real(0)) continue;
              Real* dst = gwt.data() + p * out_features;
              for (std::size_t o = 0; o < out_features; ++o) dst[o] += xv * gr[o];
            }
          }
          Real* gw = pw.ensure_grad().data();
          for (std::size_t o = 0; o < out_features; ++o)
            for (std::size_t p = 0; p < in; ++p) gw[o * in + p] += gwt[p * out_features + o];
        }
        if (has_bias) {
          auto& pb = parent(node, 2);
          if (pb.requires_grad) {
            auto& gb = pb.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t o = 0; o < out_features; ++o) gb[o] += g[r * out_features + o];
          }
        }
      });
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_to_string(a.shape()) + " -> " +
                         shape_to_string(shape));
  }
  std::vector<Real> out(a.data().begin(), a.data().end());
  return make_result<Real>(std::move(shape), std::move(out), {a}, [](NodeT<Real>& node) {
    auto& pa = parent(node, 0);
    if (!pa.requires_grad) return;
    auto& ga = pa.ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += node.grad[i];
  });
}

template <typename Real>
Tensor<Real> permute(const Tensor<Real>& a, const std::vector<std::size_t>& axes) {
  const std::size_t rank = a.rank();
  std::vector<bool> seen(rank, false);
  if (axes.size() != rank) {
    throw DimensionError("permute: " + std::to_string(axes.size()) + " axes for shape " +
                         shape_to_string(a.shape()));
  }
  for (auto ax : axes) {
    if (ax >= rank || seen[ax]) throw DimensionError("permute: invalid axis list");
    seen[ax] = true;
  }
  Shape out_shape(rank);
  for (std::size_t d = 0; d < rank; ++d) out_shape[d] = a.shape()[axes[d]];
  const auto in_strides = contiguous_strides(a.shape());
  // Source offset of each output element.
  std::vector<std::size_t> gather(a.numel());
  {
    std::vector<std::size_t> counter(rank, 0);
    std::size_t src = 0;
    for (std::size_t i = 0; i < gather.size(); ++i) {
      gather[i] = src;
      for (std::size_t d = rank; d-- > 0;) {
        ++counter[d];
        src += in_strides[axes[d]];
        if (counter[d] < out_shape[d]) break;
        src -= in_strides[axes[d]] * counter[d];
        counter[d] = 0;
      }
    }
  }
  std::vector<Real> out(a.numel());
  const auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[gather[i]];
  return make_result<Real>(std::move(out_shape), std::move(out), {a},
                           [gather = std::move(gather)](NodeT<Real>& node) {
                             auto& pa = parent(node, 0);
                             if (!pa.requires_grad) return;
                             auto& ga = pa.ensure_grad();
                             for (std::size_t i = 0; i < gather.size(); ++i)
                               ga[gather[i]] += node.grad[i];
                           });
}

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& a, std::size_t axis0, std::size_t axis1) {
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  if (axis0 >= a.rank() || axis1 >= a.rank()) {
    throw DimensionError("transpose: axis out of range for " + shape_to_string(a.shape()));
  }
  std::swap(axes[axis0], axes[axis1]);
  return permute(a, axes);
}

template <typename Real>
Tensor<Real> select(const Tensor<Real>& a, std::size_t index) {
  if (a.rank() < 1 || index >= a.shape()[0]) {
    throw DimensionError("select index " + std::to_string(index) + " out of range for " +
                         shape_to_string(a.shape()));
  }
  Shape out_shape(a.shape().begin() + 1, a.shape().end());
  const std::size_t block = shape_numel(out_shape);
  const std::size_t offset = index * block;
  std::vector<Real> out(a.data().begin() + offset, a.data().begin() + offset + block);
  return make_result<Real>(std::move(out_shape), std::move(out), {a},
                           [offset, block](NodeT<Real>& node) {
                             auto& pa = parent(node, 0);
                             if (!pa.requires_grad) return;
                             auto& ga = pa.ensure_grad();
                             for (std::size_t i = 0; i < block; ++i)
                               ga[offset + i] += node.grad[i];
                           });
}

template <typename Real>
Tensor<Real> stack(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw ContractError("stack of zero tensors");
  const Shape& inner = parts.front().shape();
  for (const auto& p : parts) {
    if (p.shape() != inner) {
      throw DimensionError("stack: " + shape_to_string(p.shape()) + " vs " +
                           shape_to_string(inner));
    }
  }
  const std::size_t block = shape_numel(inner);
  Shape out_shape{parts.size()};
  out_shape.insert(out_shape.end(), inner.begin(), inner.end());
  std::vector<Real> out(block * parts.size());
  for (std::size_t i = 0; i < parts.size(); ++i) {
    std::copy(parts[i].data().begin(), parts[i].data().end(), out.begin() + i * block);
  }
  return make_result<Real>(std::move(out_shape), std::move(out), parts,
                           [block, n = parts.size()](NodeT<Real>& node) {
                             for (std::size_t i = 0; i < n; ++i) {
                               auto& p = parent(node, i);
                               if (!p.requires_grad) continue;
                               auto& g = p.ensure_grad();
                               for (std::size_t j = 0; j < block; ++j)
                                 g[j] += node.grad[i * block + j];
                             }
                           });
}

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& a) {
  Real acc = 0;
  for (auto v : a.data()) acc += v;
  return make_result<Real>(Shape{}, {acc}, {a}, [](NodeT<Real>& node) {
    auto& pa = parent(node, 0);
    if (!pa.requires_grad) return;
    auto& ga = pa.ensure_grad();
    for (auto& v : ga) v += node.grad[0];
  });
}

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& a) {
  if (a.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), Real(1) / static_cast<Real>(a.numel()));
}

template <typename Real>
Tensor<Real> mean_axis(const Tensor<Real>& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw DimensionError("mean_axis: axis " + std::to_string(axis) + " out of range for " +
                         shape_to_string(a.shape()));
  }
  const std::size_t outer = shape_numel(Shape(a.shape().begin(), a.shape().begin() + axis));
  const std::size_t extent = a.shape()[axis];
  const std::size_t inner = shape_numel(Shape(a.shape().begin() + axis + 1, a.shape().end()));
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + axis);
  std::vector<Real> out(outer * inner, Real(0));
  const Real inv = Real(1) / static_cast<Real>(extent);
  const auto ad = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < extent; ++e)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += ad[(o * extent + e) * inner + i];
  for (auto& v : out) v *= inv;
  return make_result<Real>(std::move(out_shape), std::move(out), {a},
                           [outer, extent, inner, inv](NodeT<Real>& node) {
                             auto& pa = parent(node, 0);
                             if (!pa.requires_grad) return;
                             auto& ga = pa.ensure_grad();
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t e = 0; e < extent; ++e)
                                 for (std::size_t i = 0; i < inner; ++i)
                                   ga[(o * extent + e) * inner + i] +=
                                       node.grad[o * inner + i] * inv;
                           });
}

template <typename Real>
Tensor<Real> conv1d_depthwise(const Tensor<Real>& x, const Tensor<Real>& kernel) {
  if (kernel.rank() != 2) {
    throw DimensionError("conv1d_depthwise: kernel must be [channels, k], got " +
                         shape_to_string(kernel.shape()));
  }
  const std::size_t channels = kernel.shape()[0];
  const std::size_t k = kernel.shape()[1];
  if (k % 2 == 0) {
    throw ConfigError("conv1d_depthwise: kernel size must be odd, got " + std::to_string(k));
  }
  if (x.rank() < 2 || x.shape()[x.rank() - 2] != channels) {
    throw DimensionError("conv1d_depthwise: input " + shape_to_string(x.shape()) +
                         " does not match kernel " + shape_to_string(kernel.shape()));
  }
  const std::size_t length = x.shape().back();
  const std::size_t batch = x.numel() / (channels * length);
  const auto pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
  const auto len = static_cast<std::ptrdiff_t>(length);
  std::vector<Real> out(x.numel(), Real(0));
  const Real* xd = x.data().data();
  const Real* kd = kernel.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const Real* xr = xd + (b * channels + c) * length;
      Real* yr = out.data() + (b * channels + c) * length;
      const Real* kr = kd + c * k;
      for (std::ptrdiff_t l = 0; l < len; ++l) {
        Real acc = 0;
        for (std::size_t j = 0; j < k; ++j) {
          const std::ptrdiff_t src = l + static_cast<std::ptrdiff_t>(j) - pad;
          if (src >= 0 && src < len) acc += kr[j] * xr[src];
        }
        yr[l] = acc;
      }
    }
  }
  return make_result<Real>(
      x.shape(), std::move(out), {x, kernel},
      [batch, channels, length, k, pad](NodeT<Real>& node) {
        auto& px = parent(node, 0);
        auto& pk = parent(node, 1);
        Real* gx = px.requires_grad ? px.ensure_grad().data() : nullptr;
        Real* gk = pk.requires_grad ? pk.ensure_grad().data() : nullptr;
        const Real* xd = px.data.data();
        const Real* kd = pk.data.data();
        const auto len = static_cast<std::ptrdiff_t>(length);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (b * channels + c) * length;
            const Real* g = node.grad.data() + base;
            for (std::ptrdiff_t l = 0; l < len; ++l) {
              for (std::size_t j = 0; j < k; ++j) {
                const std::ptrdiff_t src = l + static_cast<std::ptrdiff_t>(j) - pad;
                if (src < 0 || src >= len) continue;
                if (gx) gx[base + src] += kd[c * k + j] * g[l];
                if (gk) gk[c * k + j] += g[l] * xd[base + src];
              }
            }
          }
        }
      });
}

namespace {

// Column block width for the conv inner loops; keeps a block of the column
// matrix resident in cache across output channels.
constexpr std::size_t kConvTile = 256;

struct Conv2dGeometry {
  std::size_t batch, c_in, h, w, c_out, kh, kw, stride, pad, h_out, w_out;
  std::size_t col_rows() const { return c_in * kh * kw; }
  std::size_t col_cols() const { return h_out * w_out; }
};

// Column matrix [c_in*kh*kw, ld]; this image fills `col_cols()` columns.
template <typename Real>
void im2col(const Real* image, const Conv2dGeometry& geo, Real* col, std::size_t ld) {
  for (std::size_t c = 0; c < geo.c_in; ++c)
    for (std::size_t i = 0; i < geo.kh; ++i)
      for (std::size_t j = 0; j < geo.kw; ++j) {
        const std::size_t row = (c * geo.kh + i) * geo.kw + j;
        Real* dst = col + row * ld;
        for (std::size_t oy = 0; oy < geo.h_out; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * geo.stride + i) -
                          static_cast<std::ptrdiff_t>(geo.pad);
          for (std::size_t ox = 0; ox < geo.w_out; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * geo.stride + j) -
                            static_cast<std::ptrdiff_t>(geo.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(geo.h) &&
                                ix < static_cast<std::ptrdiff_t>(geo.w);
            dst[oy * geo.w_out + ox] = inside ? image[(c * geo.h + iy) * geo.w + ix] : Real(0);
          }
        }
      }
}

template <typename Real>
void col2im_add(const Real* col, const Conv2dGeometry& geo, Real* image, std::size_t ld) {
  for (std::size_t c = 0; c < geo.c_in; ++c)
    for (std::size_t i = 0; i < geo.kh; ++i)
      for (std::size_t j = 0; j < geo.kw; ++j) {
        const std::size_t row = (c * geo.kh + i) * geo.kw + j;
        const Real* src = col + row * ld;
        for (std::size_t oy = 0; oy < geo.h_out; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * geo.stride + i) -
                          static_cast<std::ptrdiff_t>(geo.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(geo.h)) continue;
          for (std::size_t ox = 0; ox < geo.w_out; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * geo.stride + j) -
                            static_cast<std::ptrdiff_t>(geo.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(geo.w)) continue;
            image[(c * geo.h + iy) * geo.w + ix] += src[oy * geo.w_out + ox];
          }
        }
      }
}

}  // namespace

template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& kernel, std::size_t stride,
                    std::size_t padding) {
  if (kernel.rank() != 4) {
    throw DimensionError("conv2d: kernel must be [C_out, C_in, kh, kw], got " +
                         shape_to_string(kernel.shape()));
  }
  if (x.rank() != 3 && x.rank() != 4) {
    throw DimensionError("conv2d: input must be [C, H, W] or [B, C, H, W], got " +
                         shape_to_string(x.shape()));
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  const bool batched = x.rank() == 4;
  Conv2dGeometry geo{};
  geo.batch = batched ? x.shape()[0] : 1;
  geo.c_in = x.shape()[batched ? 1 : 0];
  geo.h = x.shape()[batched ? 2 : 1];
  geo.w = x.shape()[batched ? 3 : 2];
  geo.c_out = kernel.shape()[0];
  geo.kh = kernel.shape()[2];
  geo.kw = kernel.shape()[3];
  geo.stride = stride;
  geo.pad = padding;
  if (kernel.shape()[1] != geo.c_in) {
    throw DimensionError("conv2d: input " + shape_to_string(x.shape()) +
                         " channel count does not match kernel " +
                         shape_to_string(kernel.shape()));
  }
  const std::size_t span_h = geo.h + 2 * padding;
  const std::size_t span_w = geo.w + 2 * padding;
  if (span_h < geo.kh || span_w < geo.kw || (span_h - geo.kh) % stride != 0 ||
      (span_w - geo.kw) % stride != 0) {
    throw ConfigError("conv2d: output extent is not integral for input " +
                      shape_to_string(x.shape()) + ", kernel " + shape_to_string(kernel.shape()) +
                      ", stride " + std::to_string(stride) + ", padding " +
                      std::to_string(padding));
  }
  geo.h_out = (span_h - geo.kh) / stride + 1;
  geo.w_out = (span_w - geo.kw) / stride + 1;

  // One column matrix for the whole batch keeps the inner loops long.
  const std::size_t rows = geo.col_rows();
  const std::size_t cols = geo.col_cols();
  const std::size_t ld = geo.batch * cols;
  const std::size_t image = geo.c_in * geo.h * geo.w;
  auto col = std::make_shared<std::vector<Real>>(rows * ld);
  for (std::size_t b = 0; b < geo.batch; ++b) {
    im2col(x.data().data() + b * image, geo, col->data() + b * cols, ld);
  }
  std::vector<Real> wide(geo.c_out * ld, Real(0));
  const Real* wd = kernel.data().data();
  for (std::size_t p0 = 0; p0 < ld; p0 += kConvTile) {
    const std::size_t p1 = std::min(ld, p0 + kConvTile);
    for (std::size_t o = 0; o < geo.c_out; ++o) {
      Real* orow = wide.data() + o * ld;
      for (std::size_t r = 0; r < rows; ++r) {
        const Real wv = wd[o * rows + r];
        if (wv == Real(0)) continue;
        const Real* crow = col->data() + r * ld;
        for (std::size_t p = p0; p < p1; ++p) orow[p] += wv * crow[p];
      }
    }
  }
  std::vector<Real> out(geo.batch * geo.c_out * cols);
  for (std::size_t b = 0; b < geo.batch; ++b)
    for (std::size_t o = 0; o < geo.c_out; ++o)
      std::copy_n(wide.data() + o * ld + b * cols, cols, out.data() + (b * geo.c_out + o) * cols);

  Shape out_shape = batched ? Shape{geo.batch, geo.c_out, geo.h_out, geo.w_out}
                            : Shape{geo.c_out, geo.h_out, geo.w_out};
  return make_result<Real>(
      std::move(out_shape), std::move(out), {x, kernel}, [geo, col](NodeT<Real>& node) {
        auto& px = parent(node, 0);
        auto& pk = parent(node, 1);
        const std::size_t rows = geo.col_rows();
        const std::size_t cols = geo.col_cols();
        const std::size_t ld = geo.batch * cols;
        // Upstream gradient regrouped as [c_out, batch * cols].
        std::vector<Real> g(geo.c_out * ld);
        for (std::size_t b = 0; b < geo.batch; ++b)
          for (std::size_t o = 0; o < geo.c_out; ++o)
            std::copy_n(node.grad.data() + (b * geo.c_out + o) * cols, cols,
                        g.data() + o * ld + b * cols);
        if (pk.requires_grad) {
          Real* gk = pk.ensure_grad().data();
          const Real grad_scale = static_cast<Real>(g_conv2d_kernel_grad_scale);
          constexpr std::size_t kLanes = 8;
          std::vector<Real> acc(geo.c_out * rows, Real(0));
          for (std::size_t p0 = 0; p0 < ld; p0 += kConvTile) {
            const std::size_t p1 = std::min(ld, p0 + kConvTile);
            for (std::size_t o = 0; o < geo.c_out; ++o) {
              const Real* grow = g.data() + o * ld;
              for (std::size_t r = 0; r < rows; ++r) {
                const Real* crow = col->data() + r * ld;
                Real lanes[kLanes] = {};
                std::size_t p = p0;
                for (; p + kLanes <= p1; p += kLanes)
                  for (std::size_t j = 0; j < kLanes; ++j) lanes[j] += grow[p + j] * crow[p + j];
                Real sum = 0;
                for (; p < p1; ++p) sum += grow[p] * crow[p];
                for (std::size_t j = 0; j < kLanes; ++j) sum += lanes[j];
                acc[o * rows + r] += sum;
              }
            }
          }
          for (std::size_t i = 0; i < acc.size(); ++i) gk[i] += grad_scale * acc[i];
        }
        if (px.requires_grad) {
          Real* gx = px.ensure_grad().data();
          const Real* wd = pk.data.data();
          std::vector<Real> dcol(rows * ld, Real(0));
          for (std::size_t p0 = 0; p0 < ld; p0 += kConvTile) {
            const std::size_t p1 = std::min(ld, p0 + kConvTile);
            for (std::size_t o = 0; o < geo.c_out; ++o) {
              const Real* grow = g.data() + o * ld;
              for (std::size_t r = 0; r < rows; ++r) {
                const Real wv = wd[o * rows + r];
                if (wv == Real(0)) continue;
                Real* drow = dcol.data() + r * ld;
                for (std::size_t p = p0; p < p1; ++p) drow[p] += wv * grow[p];
              }
            }
          }
          const std::size_t image = geo.c_in * geo.h * geo.w;
          for (std::size_t b = 0; b < geo.batch; ++b) {
            col2im_add(dcol.data() + b * cols, geo, gx + b * image, ld);
          }
        }
      });
}

template <typename Real>
Tensor<Real> max_pool2d(const Tensor<Real>& x) {
  if (x.rank() < 2) throw DimensionError("max_pool2d needs rank >= 2");
  const std::size_t h = x.shape()[x.rank() - 2];
  const std::size_t w = x.shape().back();
  if (h % 2 != 0 || w % 2 != 0) {
    throw ConfigError("max_pool2d: spatial extents must be even, got " +
                      shape_to_string(x.shape()));
  }
  const std::size_t planes = x.numel() / (h * w);
  const std::size_t ho = h / 2, wo = w / 2;
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = ho;
  out_shape.back() = wo;
  std::vector<Real> out(planes * ho * wo);
  std::vector<std::size_t> argmax(out.size());
  const auto xd = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < ho; ++i) {
      for (std::size_t j = 0; j < wo; ++j) {
        std::size_t best = p * h * w + (2 * i) * w + 2 * j;
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = p * h * w + (2 * i + di) * w + 2 * j + dj;
            if (xd[idx] > xd[best]) best = idx;
          }
        const std::size_t o = (p * ho + i) * wo + j;
        out[o] = xd[best];
        argmax[o] = best;
      }
    }
  }
  return make_result<Real>(std::move(out_shape), std::move(out), {x},
                           [argmax = std::move(argmax)](NodeT<Real>& node) {
                             auto& px = parent(node, 0);
                             if (!px.requires_grad) return;
                             auto& gx = px.ensure_grad();
                             for (std::size_t o = 0; o < argmax.size(); ++o)
                               gx[argmax[o]] += node.grad[o];
                           });
}

template <typename Real>
Tensor<Real> batchnorm(const Tensor<Real>& x, const Tensor<Real>& gamma, const Tensor<Real>& beta,
                       Tensor<Real>& running_mean, Tensor<Real>& running_var,
                       const BatchNormOptions& options) {
  if (options.channel_axis >= x.rank()) {
    throw DimensionError("batchnorm: channel axis " + std::to_string(options.channel_axis) +
                         " out of range for " + shape_to_string(x.shape()));
  }
  const std::size_t channels = x.shape()[options.channel_axis];
  for (const Tensor<Real>* t :
       std::initializer_list<const Tensor<Real>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->numel() != channels) {
      throw DimensionError("batchnorm: per-channel tensor " + shape_to_string(t->shape()) +
                           " for " + std::to_string(channels) + " channels");
    }
  }
  const std::size_t outer = shape_numel(
      Shape(x.shape().begin(), x.shape().begin() + options.channel_axis));
  const std::size_t inner = shape_numel(
      Shape(x.shape().begin() + options.channel_axis + 1, x.shape().end()));
  const std::size_t count = outer * inner;
  const auto xd = x.data();
  const Real eps = static_cast<Real>(options.eps);

  std::vector<Real> mean(channels), inv_std(channels);
  if (options.training) {
    if (count < 1) throw DimensionError("batchnorm: empty batch");
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    const Real momentum = static_cast<Real>(options.momentum);
    for (std::size_t c = 0; c < channels; ++c) {
      // Accumulate in double so 32-bit runs get stable moments.
      double s = 0;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) s += xd[(o * channels + c) * inner + i];
      const double mu = s / static_cast<double>(count);
      double ss = 0;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          const double d = xd[(o * channels + c) * inner + i] - mu;
          ss += d * d;
        }
      const double var = ss / static_cast<double>(count);
      mean[c] = static_cast<Real>(mu);
      inv_std[c] = static_cast<Real>(1.0 / std::sqrt(var + options.eps));
      const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
      rm[c] = (Real(1) - momentum) * rm[c] + momentum * static_cast<Real>(mu);
      rv[c] = (Real(1) - momentum) * rv[c] + momentum * static_cast<Real>(unbiased);
    }
  } else {
    const auto rm = running_mean.data();
    const auto rv = running_var.data();
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = rm[c];
      inv_std[c] = Real(1) / std::sqrt(rv[c] + eps);
    }
  }

  std::vector<Real> out(x.numel());
  std::vector<Real> xhat(x.numel());
  const auto gd = gamma.data();
  const auto bd = beta.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (o * channels + c) * inner + i;
        xhat[idx] = (xd[idx] - mean[c]) * inv_std[c];
        out[idx] = gd[c] * xhat[idx] + bd[c];
      }
  const bool training = options.training;
  return make_result<Real>(
      x.shape(), std::move(out), {x, gamma, beta},
      [outer, channels, inner, count, training, inv_std = std::move(inv_std),
       xhat = std::move(xhat)](NodeT<Real>& node) {
        auto& px = parent(node, 0);
        auto& pg = parent(node, 1);
        auto& pb = parent(node, 2);
        const auto& g = node.grad;
        std::vector<Real> sum_g(channels, Real(0)), sum_gx(channels, Real(0));
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (o * channels + c) * inner + i;
              sum_g[c] += g[idx];
              sum_gx[c] += g[idx] * xhat[idx];
            }
        if (pg.requires_grad) {
          auto& gg = pg.ensure_grad();
          for (std::size_t c = 0; c < channels; ++c) gg[c] += sum_gx[c];
        }
        if (pb.requires_grad) {
          auto& gb = pb.ensure_grad();
          for (std::size_t c = 0; c < channels; ++c) gb[c] += sum_g[c];
        }
        if (!px.requires_grad) return;
        auto& gx = px.ensure_grad();
        const auto& gamma = pg.data;
        const Real n = static_cast<Real>(count);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t c = 0; c < channels; ++c) {
            const Real k = gamma[c] * inv_std[c];
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (o * channels + c) * inner + i;
              if (training) {
                gx[idx] += k * (g[idx] - sum_g[c] / n - xhat[idx] * sum_gx[c] / n);
              } else {
                gx[idx] += k * g[idx];
              }
            }
          }
      });
}

template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.shape()[0] != labels.size() || labels.empty()) {
    throw DimensionError("cross_entropy: logits " + shape_to_string(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = logits.shape()[0];
  const std::size_t classes = logits.shape()[1];
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw DimensionError("cross_entropy: label " + std::to_string(label) + " out of range");
    }
  }
  const auto ld = logits.data();
  std::vector<Real> probs(batch * classes);
  Real loss = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < classes; ++c)
      if (ld[b * classes + c] > ld[b * classes + arg]) arg = c;
    const Real mx = ld[b * classes + arg];
    // z = 1 + rest; log1p keeps tiny losses of confident rows.
    Real rest = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      probs[b * classes + c] = std::exp(ld[b * classes + c] - mx);
      if (c != arg) rest += probs[b * classes + c];
    }
    const Real z = 1 + rest;
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] /= z;
    loss += -(ld[b * classes + labels[b]] - mx - std::log1p(rest));
  }
  loss /= static_cast<Real>(batch);
  return make_result<Real>(Shape{}, {loss}, {logits},
                           [batch, classes, labels, probs = std::move(probs)](NodeT<Real>& node) {
                             auto& pl = parent(node, 0);
                             if (!pl.requires_grad) return;
                             auto& gl = pl.ensure_grad();
                             const Real s = node.grad[0] / static_cast<Real>(batch);
                             for (std::size_t b = 0; b < batch; ++b)
                               for (std::size_t c = 0; c < classes; ++c) {
                                 const Real target =
                                     static_cast<int>(c) == labels[b] ? Real(1) : Real(0);
                                 gl[b * classes + c] += s * (probs[b * classes + c] - target);
                               }
                           });
}

template <typename Real>
DifferentiableOp<Real> custom_grad(CustomGradFns<Real> fns) {
  if (!fns.forward || !fns.backward) throw ContractError("custom_grad needs forward and backward");
  return [fns = std::move(fns)](const std::vector<Tensor<Real>>& inputs) {
    Tensor<Real> value;
    {
      NoGradGuard guard;
      std::vector<Tensor<Real>> detached;
      detached.reserve(inputs.size());
      for (const auto& input : inputs) detached.push_back(input.detach());
      value = fns.forward(detached);
    }
    auto backward = fns.backward;
    const Shape out_shape = value.shape();
    std::vector<Real> out_data(value.data().begin(), value.data().end());
    return make_result<Real>(
        out_shape, std::move(out_data), inputs,
        [backward, out_shape](NodeT<Real>& node) {
          std::vector<Tensor<Real>> saved;
          saved.reserve(node.parents.size());
          for (const auto& p : node.parents) saved.push_back(Tensor<Real>(p->shape, p->data));
          const Tensor<Real> output(out_shape, node.data);
          auto grads = backward(saved, output, node.grad);
          if (grads.size() != node.parents.size()) {
            throw ContractError("custom_grad backward returned " + std::to_string(grads.size()) +
                                " gradients for " + std::to_string(node.parents.size()) +
                                " inputs");
          }
          for (std::size_t i = 0; i < grads.size(); ++i) {
            auto& p = *node.parents[i];
            if (grads[i].size() != p.data.size()) {
              throw ContractError("custom_grad backward gradient " + std::to_string(i) + " has " +
                                  std::to_string(grads[i].size()) + " values for input shape " +
                                  shape_to_string(p.shape));
            }
            if (!p.requires_grad) continue;
            auto& gp = p.ensure_grad();
            for (std::size_t j = 0; j < gp.size(); ++j) gp[j] += grads[i][j];
          }
        });
  };
}

#define SPIKETIM_INSTANTIATE_OPS(Real)                                                          \
  template Tensor<Real> add(const Tensor<Real>&, const Tensor<Real>&);                          \
  template Tensor<Real> sub(const Tensor<Real>&, const Tensor<Real>&);                          \
  template Tensor<Real> mul(const Tensor<Real>&, const Tensor<Real>&);                          \
  template Tensor<Real> scale(const Tensor<Real>&, Real);                                       \
  template Tensor<Real> add_scalar(const Tensor<Real>&, Real);                                  \
  template Tensor<Real> matmul(const Tensor<Real>&, const Tensor<Real>&);                       \
  template Tensor<Real> linear(const Tensor<Real>&, const Tensor<Real>&, const Tensor<Real>&);  \
  template Tensor<Real> reshape(const Tensor<Real>&, Shape);                                    \
  template Tensor<Real> permute(const Tensor<Real>&, const std::vector<std::size_t>&);          \
  template Tensor<Real> transpose(const Tensor<Real>&, std::size_t, std::size_t);               \
  template Tensor<Real> select(const Tensor<Real>&, std::size_t);                               \
  template Tensor<Real> stack(const std::vector<Tensor<Real>>&);                                \
  template Tensor<Real> sum(const Tensor<Real>&);                                               \
  template Tensor<Real> mean(const Tensor<Real>&);                                              \
  template Tensor<Real> mean_axis(const Tensor<Real>&, std::size_t);                            \
  template Tensor<Real> conv1d_depthwise(const Tensor<Real>&, const Tensor<Real>&);             \
  template Tensor<Real> conv2d(const Tensor<Real>&, const Tensor<Real>&, std::size_t,           \
                               std::size_t);                                                    \
  template Tensor<Real> max_pool2d(const Tensor<Real>&);                                        \
  template Tensor<Real> batchnorm(const Tensor<Real>&, const Tensor<Real>&, const Tensor<Real>&, \
                                  Tensor<Real>&, Tensor<Real>&, const BatchNormOptions&);       \
  template Tensor<Real> cross_entropy(const Tensor<Real>&, const std::vector<int>&);            \
  template DifferentiableOp<Real> custom_grad(CustomGradFns<Real>);

SPIKETIM_INSTANTIATE_OPS(float)
SPIKETIM_INSTANTIATE_OPS(double)

}  // namespace spiketim
