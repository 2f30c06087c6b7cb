#include "bloodnet/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

namespace bloodnet {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

}  // namespace bloodnet

namespace bloodnet::ad {

namespace {
thread_local bool grad_mode = true;
}  // namespace

bool grad_enabled() noexcept { return grad_mode; }

NoGradGuard::NoGradGuard() noexcept : previous_(grad_mode) { grad_mode = false; }
NoGradGuard::~NoGradGuard() { grad_mode = previous_; }

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<NodePtr<T>> parents, std::function<void(Node<T>&)> fn) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad =
        grad_mode && std::any_of(parents.begin(), parents.end(), [](const NodePtr<T>& p) { return p->requires_grad; });
    if (node->requires_grad) {
        node->parents = std::move(parents);
        node->backward_fn = std::move(fn);
    }
    return Var<T>(std::move(node));
}

template <typename T>
void accumulate(Node<T>& node, const Tensor<T>& g) {
    if (!node.requires_grad) return;
    if (node.grad.empty()) {
        node.grad = g;
        return;
    }
    auto dst = node.grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

void require_rank4(const Shape& s, const char* op) {
    if (s.size() != 4) {
        throw ShapeError(std::string(op) + ": expected [N,C,H,W], got " + shape_str(s));
    }
}

struct ConvGeometry {
    std::size_t n, c, h, w;
    std::size_t o, kh, kw;
    std::size_t stride, pad_h, pad_w;
    std::size_t oh, ow;
    std::size_t patch() const { return c * kh * kw; }
    std::size_t pixels() const { return oh * ow; }
};

// Output columns [lo, hi) whose input column ox*stride + k - pad lies inside [0, extent).
std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t extent, std::size_t k, std::size_t pad,
                                                std::size_t stride) {
    std::size_t lo = 0;
    if (pad > k) lo = (pad - k + stride - 1) / stride;
    if (extent + pad <= k) return {0, 0};
    const std::size_t hi = std::min(out, (extent + pad - k - 1) / stride + 1);
    return {std::min(lo, hi), hi};
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
    for (std::size_t ci = 0; ci < g.c; ++ci) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                T* row = col + ((ci * g.kh + ky) * g.kw + kx) * g.pixels();
                const auto [lo, hi] = valid_range(g.ow, g.w, kx, g.pad_w, g.stride);
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    T* out = row + oy * g.ow;
                    const std::size_t iy_shifted = oy * g.stride + ky;
                    if (iy_shifted < g.pad_h || iy_shifted - g.pad_h >= g.h) {
                        std::fill(out, out + g.ow, T(0));
                        continue;
                    }
                    const T* src = x + (ci * g.h + iy_shifted - g.pad_h) * g.w;
                    std::fill(out, out + lo, T(0));
                    if (g.stride == 1) {
                        std::copy(src + lo + kx - g.pad_w, src + hi + kx - g.pad_w, out + lo);
                    } else {
                        for (std::size_t ox = lo; ox < hi; ++ox) out[ox] = src[ox * g.stride + kx - g.pad_w];
                    }
                    std::fill(out + hi, out + g.ow, T(0));
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
    for (std::size_t ci = 0; ci < g.c; ++ci) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const T* row = col + ((ci * g.kh + ky) * g.kw + kx) * g.pixels();
                const auto [lo, hi] = valid_range(g.ow, g.w, kx, g.pad_w, g.stride);
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const std::size_t iy_shifted = oy * g.stride + ky;
                    if (iy_shifted < g.pad_h || iy_shifted - g.pad_h >= g.h) continue;
                    T* dst = dx + (ci * g.h + iy_shifted - g.pad_h) * g.w;
                    const T* src = row + oy * g.ow;
                    for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride + kx - g.pad_w] += src[ox];
                }
            }
        }
    }
}

template <typename T>
Var<T> conv2d_nchw(const Var<T>& x, const Var<T>& kernel, std::size_t stride, Padding padding) {
    const Shape& xs = x.shape();
    const Shape& ks = kernel.shape();
    if (ks.size() != 4 || ks[1] != xs[1]) {
        throw ShapeError("conv2d: input " + shape_str(xs) + " incompatible with kernel " + shape_str(ks));
    }
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], ks[3], stride, 0, 0, 0, 0};
    if (padding == Padding::same) {
        if (g.kh % 2 == 0 || g.kw % 2 == 0) {
            throw ShapeError("conv2d: same padding needs odd kernel extents, got " + shape_str(ks));
        }
        g.pad_h = g.kh / 2;
        g.pad_w = g.kw / 2;
    }
    if (g.kh > g.h + 2 * g.pad_h || g.kw > g.w + 2 * g.pad_w) {
        throw ShapeError("conv2d: kernel " + shape_str(ks) + " larger than padded input " + shape_str(xs));
    }
    g.oh = (g.h + 2 * g.pad_h - g.kh) / stride + 1;
    g.ow = (g.w + 2 * g.pad_w - g.kw) / stride + 1;

    Tensor<T> out({g.n, g.o, g.oh, g.ow});
    const bool pointwise = g.kh == 1 && g.kw == 1 && stride == 1;
    std::vector<T> col(pointwise ? 0 : g.patch() * g.pixels());
    CMapMat<T> k(kernel.value().raw(), g.o, g.patch());
    const std::size_t in_stride = g.c * g.h * g.w;
    const std::size_t out_stride = g.o * g.pixels();
    for (std::size_t n = 0; n < g.n; ++n) {
        const T* xn = x.value().raw() + n * in_stride;
        if (!pointwise) im2col(xn, g, col.data());
        CMapMat<T> cm(pointwise ? xn : col.data(), g.patch(), g.pixels());
        MapMat<T> on(out.raw() + n * out_stride, g.o, g.pixels());
        on.noalias() = k * cm;
    }

    auto xn_ptr = x.shared();
    auto kn_ptr = kernel.shared();
    return make_result<T>(std::move(out), {xn_ptr, kn_ptr}, [g, pointwise, in_stride, out_stride](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        Node<T>& kn = *self.parents[1];
        std::vector<T> col(pointwise ? 0 : g.patch() * g.pixels());
        std::vector<T> dcol(g.patch() * g.pixels());
        CMapMat<T> k(kn.value.raw(), g.o, g.patch());
        Tensor<T> dk;
        if (kn.requires_grad) dk = Tensor<T>(kn.value.shape(), T(0));
        Tensor<T> dx;
        if (xn.requires_grad) dx = Tensor<T>(xn.value.shape(), T(0));
        for (std::size_t n = 0; n < g.n; ++n) {
            CMapMat<T> dout(self.grad.raw() + n * out_stride, g.o, g.pixels());
            if (kn.requires_grad) {
                const T* xs = xn.value.raw() + n * in_stride;
                if (!pointwise) im2col(xs, g, col.data());
                CMapMat<T> cm(pointwise ? xs : col.data(), g.patch(), g.pixels());
                MapMat<T> dkm(dk.raw(), g.o, g.patch());
                dkm.noalias() += dout * cm.transpose();
            }
            if (xn.requires_grad) {
                if (pointwise) {
                    MapMat<T> dxm(dx.raw() + n * in_stride, g.patch(), g.pixels());
                    dxm.noalias() = k.transpose() * dout;
                } else {
                    MapMat<T> dcm(dcol.data(), g.patch(), g.pixels());
                    dcm.noalias() = k.transpose() * dout;
                    col2im_add(dcol.data(), g, dx.raw() + n * in_stride);
                }
            }
        }
        if (kn.requires_grad) accumulate(kn, dk);
        if (xn.requires_grad) accumulate(xn, dx);
    });
}

}  // namespace

template <typename T>
void backward(const Var<T>& root) {
    if (!root.defined() || root.value().size() != 1) {
        throw ShapeError("backward: root must be a scalar, got shape " +
                         (root.defined() ? shape_str(root.shape()) : std::string("<undefined>")));
    }
    if (!root.requires_grad()) return;

    // Iterative post-order DFS to get a topological order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node<T>* node : order) node->grad = Tensor<T>();
    root.node()->grad = Tensor<T>(root.shape(), T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
    return make_result<T>(std::move(out), {a.shared(), b.shared()}, [](Node<T>& self) {
        accumulate(*self.parents[0], self.grad);
        accumulate(*self.parents[1], self.grad);
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "mul");
    Tensor<T> out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
    return make_result<T>(std::move(out), {a.shared(), b.shared()}, [](Node<T>& self) {
        Node<T>& an = *self.parents[0];
        Node<T>& bn = *self.parents[1];
        const std::size_t n = self.grad.size();
        if (an.requires_grad) {
            Tensor<T> g(an.value.shape());
            for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[i] * bn.value[i];
            accumulate(an, g);
        }
        if (bn.requires_grad) {
            Tensor<T> g(bn.value.shape());
            for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[i] * an.value[i];
            accumulate(bn, g);
        }
    });
}

template <typename T>
Var<T> affine(const Var<T>& x, T scale, T shift) {
    Tensor<T> out = x.value();
    for (T& v : out.data()) v = scale * v + shift;
    return make_result<T>(std::move(out), {x.shared()}, [scale](Node<T>& self) {
        Tensor<T> g = self.grad;
        for (T& v : g.data()) v *= scale;
        accumulate(*self.parents[0], g);
    });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out = x.value();
    for (T& v : out.data()) v = v > T(0) ? v : T(0);
    return make_result<T>(std::move(out), {x.shared()}, [](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        Tensor<T> g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!(xn.value[i] > T(0))) g[i] = T(0);
        }
        accumulate(xn, g);
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    constexpr T lo = std::numeric_limits<T>::min();
    const T hi = std::nextafter(T(1), T(0));
    Tensor<T> out = x.value();
    for (T& v : out.data()) {
        T s;
        if (v >= T(0)) {
            s = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            s = e / (T(1) + e);
        }
        v = std::clamp(s, lo, hi);
    }
    return make_result<T>(std::move(out), {x.shared()}, [](Node<T>& self) {
        Tensor<T> g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T s = self.value[i];
            g[i] *= s * (T(1) - s);
        }
        accumulate(*self.parents[0], g);
    });
}

template <typename T>
Var<T> log_clamped(const Var<T>& x, T floor) {
    Tensor<T> out = x.value();
    for (T& v : out.data()) v = std::log(std::max(v, floor));
    return make_result<T>(std::move(out), {x.shared()}, [floor](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        Tensor<T> g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T v = xn.value[i];
            g[i] = v > floor ? g[i] / v : T(0);
        }
        accumulate(xn, g);
    });
}

template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& bias) {
    const Shape& xs = x.shape();
    if (xs.size() < 2 || bias.value().size() != xs[1]) {
        throw ShapeError("add_channel_bias: input " + shape_str(xs) + " incompatible with bias " +
                         shape_str(bias.shape()));
    }
    const std::size_t n = xs[0], c = xs[1];
    const std::size_t inner = x.value().size() / (n * c);
    Tensor<T> out = x.value();
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            T* p = out.raw() + (b * c + ch) * inner;
            const T bv = bias.value()[ch];
            for (std::size_t i = 0; i < inner; ++i) p[i] += bv;
        }
    }
    return make_result<T>(std::move(out), {x.shared(), bias.shared()}, [n, c, inner](Node<T>& self) {
        accumulate(*self.parents[0], self.grad);
        Node<T>& bn = *self.parents[1];
        if (!bn.requires_grad) return;
        Tensor<T> g(bn.value.shape(), T(0));
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                const T* p = self.grad.raw() + (b * c + ch) * inner;
                T acc = T(0);
                for (std::size_t i = 0; i < inner; ++i) acc += p[i];
                g[ch] += acc;
            }
        }
        accumulate(bn, g);
    });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, std::size_t stride, Padding padding) {
    const Shape& xs = x.shape();
    if (xs.size() == 3) {
        Var<T> batched = reshape(x, Shape{1, xs[0], xs[1], xs[2]});
        Var<T> out = conv2d_nchw(batched, kernel, stride, padding);
        const Shape& os = out.shape();
        return reshape(out, Shape{os[1], os[2], os[3]});
    }
    if (xs.size() != 4) {
        throw ShapeError("conv2d: input " + shape_str(xs) + " incompatible with kernel " +
                         shape_str(kernel.shape()));
    }
    return conv2d_nchw(x, kernel, stride, padding);
}

template <typename T>
Var<T> max_pool2d(const Var<T>& x, std::size_t window) {
    const Shape& xs = x.shape();
    require_rank4(xs, "max_pool2d");
    if (window < 1 || xs[2] % window != 0 || xs[3] % window != 0) {
        throw ShapeError("max_pool2d: extents " + shape_str(xs) + " not divisible by window " +
                         std::to_string(window));
    }
    const std::size_t planes = xs[0] * xs[1], h = xs[2], w = xs[3];
    const std::size_t oh = h / window, ow = w / window;
    Tensor<T> out({xs[0], xs[1], oh, ow});
    std::vector<std::uint32_t> argmax(out.size());
    const T* in = x.value().raw();
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t best = p * h * w + (oy * window) * w + ox * window;
                for (std::size_t dy = 0; dy < window; ++dy) {
                    for (std::size_t dx = 0; dx < window; ++dx) {
                        const std::size_t idx = p * h * w + (oy * window + dy) * w + ox * window + dx;
                        if (in[idx] > in[best]) best = idx;
                    }
                }
                const std::size_t o = (p * oh + oy) * ow + ox;
                out[o] = in[best];
                argmax[o] = static_cast<std::uint32_t>(best);
            }
        }
    }
    return make_result<T>(std::move(out), {x.shared()}, [argmax = std::move(argmax)](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        Tensor<T> g(xn.value.shape(), T(0));
        for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
        accumulate(xn, g);
    });
}

template <typename T>
Var<T> nearest_upsample2d(const Var<T>& x, std::size_t factor) {
    const Shape& xs = x.shape();
    require_rank4(xs, "nearest_upsample2d");
    if (factor < 1) throw ShapeError("nearest_upsample2d: factor must be >= 1");
    const std::size_t planes = xs[0] * xs[1], h = xs[2], w = xs[3];
    const std::size_t oh = h * factor, ow = w * factor;
    Tensor<T> out({xs[0], xs[1], oh, ow});
    const T* in = x.value().raw();
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            const T* src = in + (p * h + oy / factor) * w;
            T* dst = out.raw() + (p * oh + oy) * ow;
            for (std::size_t ox = 0; ox < ow; ++ox) dst[ox] = src[ox / factor];
        }
    }
    return make_result<T>(std::move(out), {x.shared()}, [planes, h, w, factor](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        Tensor<T> g(xn.value.shape(), T(0));
        const std::size_t oh = h * factor, ow = w * factor;
        for (std::size_t p = 0; p < planes; ++p) {
            for (std::size_t oy = 0; oy < oh; ++oy) {
                const T* src = self.grad.raw() + (p * oh + oy) * ow;
                T* dst = g.raw() + (p * h + oy / factor) * w;
                for (std::size_t ox = 0; ox < ow; ++ox) dst[ox / factor] += src[ox];
            }
        }
        accumulate(xn, g);
    });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    const Shape& xs = x.shape();
    require_rank4(xs, "global_avg_pool");
    const std::size_t planes = xs[0] * xs[1], inner = xs[2] * xs[3];
    Tensor<T> out({xs[0], xs[1]});
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = x.value().raw() + p * inner;
        T acc = T(0);
        for (std::size_t i = 0; i < inner; ++i) acc += src[i];
        out[p] = acc / static_cast<T>(inner);
    }
    return make_result<T>(std::move(out), {x.shared()}, [planes, inner](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        Tensor<T> g(xn.value.shape());
        for (std::size_t p = 0; p < planes; ++p) {
            const T v = self.grad[p] / static_cast<T>(inner);
            std::fill(g.raw() + p * inner, g.raw() + (p + 1) * inner, v);
        }
        accumulate(xn, g);
    });
}

template <typename T>
Var<T> dense(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    const Shape& xs = x.shape();
    const Shape& ws = weight.shape();
    if (xs.size() != 2 || ws.size() != 2 || ws[1] != xs[1] || bias.value().size() != ws[0]) {
        throw ShapeError("dense: input " + shape_str(xs) + " incompatible with weight " + shape_str(ws) +
                         " and bias " + shape_str(bias.shape()));
    }
    const std::size_t n = xs[0], f = xs[1], o = ws[0];
    Tensor<T> out({n, o});
    {
        // Row by row so a sample's output does not depend on the batch it is in.
        CMapMat<T> wm(weight.value().raw(), o, f);
        for (std::size_t r = 0; r < n; ++r) {
            Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> orow(out.raw() + r * o, o);
            orow.noalias() = wm * Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(x.value().raw() + r * f, f);
            for (std::size_t c = 0; c < o; ++c) orow(c) += bias.value()[c];
        }
    }
    return make_result<T>(std::move(out), {x.shared(), weight.shared(), bias.shared()},
                          [n, f, o](Node<T>& self) {
                              Node<T>& xn = *self.parents[0];
                              Node<T>& wn = *self.parents[1];
                              Node<T>& bn = *self.parents[2];
                              CMapMat<T> dy(self.grad.raw(), n, o);
                              if (xn.requires_grad) {
                                  Tensor<T> g(xn.value.shape());
                                  MapMat<T>(g.raw(), n, f).noalias() =
                                      dy * CMapMat<T>(wn.value.raw(), o, f);
                                  accumulate(xn, g);
                              }
                              if (wn.requires_grad) {
                                  Tensor<T> g(wn.value.shape());
                                  MapMat<T>(g.raw(), o, f).noalias() =
                                      dy.transpose() * CMapMat<T>(xn.value.raw(), n, f);
                                  accumulate(wn, g);
                              }
                              if (bn.requires_grad) {
                                  Tensor<T> g(bn.value.shape(), T(0));
                                  for (std::size_t r = 0; r < n; ++r)
                                      for (std::size_t c = 0; c < o; ++c) g[c] += dy(r, c);
                                  accumulate(bn, g);
                              }
                          });
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) {
        throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(first));
    }
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const Var<T>& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
        if (!ok) throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
        out_shape[axis] += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
    for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
    const std::size_t out_row = out_shape[axis] * inner;

    Tensor<T> out(out_shape);
    std::vector<std::size_t> offsets;
    std::vector<NodePtr<T>> parents;
    std::size_t offset = 0;
    for (const Var<T>& p : parts) {
        const std::size_t row = p.shape()[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(p.value().raw() + o * row, row, out.raw() + o * out_row + offset);
        }
        offsets.push_back(offset);
        parents.push_back(p.shared());
        offset += row;
    }
    return make_result<T>(std::move(out), std::move(parents),
                          [offsets, outer, inner, out_row, axis](Node<T>& self) {
                              for (std::size_t i = 0; i < self.parents.size(); ++i) {
                                  Node<T>& pn = *self.parents[i];
                                  if (!pn.requires_grad) continue;
                                  const std::size_t row = pn.value.shape()[axis] * inner;
                                  Tensor<T> g(pn.value.shape());
                                  for (std::size_t o = 0; o < outer; ++o) {
                                      std::copy_n(self.grad.raw() + o * out_row + offsets[i], row,
                                                  g.raw() + o * row);
                                  }
                                  accumulate(pn, g);
                              }
                          });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    Tensor<T> out = x.value().reshaped(std::move(shape));
    return make_result<T>(std::move(out), {x.shared()}, [](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        accumulate(xn, self.grad.reshaped(xn.value.shape()));
    });
}

template <typename T>
Var<T> reduce_sum(const Var<T>& x) {
    T acc = T(0);
    for (T v : x.value().data()) acc += v;
    return make_result<T>(Tensor<T>::scalar(acc), {x.shared()}, [](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        accumulate(xn, Tensor<T>(xn.value.shape(), self.grad[0]));
    });
}

template <typename T>
Var<T> reduce_mean(const Var<T>& x) {
    const auto count = static_cast<T>(x.value().size());
    T acc = T(0);
    for (T v : x.value().data()) acc += v;
    return make_result<T>(Tensor<T>::scalar(acc / count), {x.shared()}, [count](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        accumulate(xn, Tensor<T>(xn.value.shape(), self.grad[0] / count));
    });
}

template <typename T>
Var<T> sum_per_sample(const Var<T>& x) {
    const Shape& xs = x.shape();
    if (xs.empty()) throw ShapeError("sum_per_sample: needs a leading batch axis");
    const std::size_t n = xs[0];
    const std::size_t inner = x.value().size() / n;
    Tensor<T> out({n, 1});
    for (std::size_t b = 0; b < n; ++b) {
        const T* src = x.value().raw() + b * inner;
        T acc = T(0);
        for (std::size_t i = 0; i < inner; ++i) acc += src[i];
        out[b] = acc;
    }
    return make_result<T>(std::move(out), {x.shared()}, [n, inner](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        Tensor<T> g(xn.value.shape());
        for (std::size_t b = 0; b < n; ++b) {
            std::fill(g.raw() + b * inner, g.raw() + (b + 1) * inner, self.grad[b]);
        }
        accumulate(xn, g);
    });
}

#define BLOODNET_INSTANTIATE_AD(T)                                                              \
    template void backward<T>(const Var<T>&);                                                   \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                       \
    template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                       \
    template Var<T> affine<T>(const Var<T>&, T, T);                                             \
    template Var<T> relu<T>(const Var<T>&);                                                     \
    template Var<T> sigmoid<T>(const Var<T>&);                                                  \
    template Var<T> log_clamped<T>(const Var<T>&, T);                                           \
    template Var<T> add_channel_bias<T>(const Var<T>&, const Var<T>&);                          \
    template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, std::size_t, Padding);              \
    template Var<T> max_pool2d<T>(const Var<T>&, std::size_t);                                  \
    template Var<T> nearest_upsample2d<T>(const Var<T>&, std::size_t);                          \
    template Var<T> global_avg_pool<T>(const Var<T>&);                                          \
    template Var<T> dense<T>(const Var<T>&, const Var<T>&, const Var<T>&);                      \
    template Var<T> concat<T>(std::span<const Var<T>>, std::size_t);                            \
    template Var<T> reshape<T>(const Var<T>&, Shape);                                           \
    template Var<T> reduce_sum<T>(const Var<T>&);                                               \
    template Var<T> reduce_mean<T>(const Var<T>&);                                              \
    template Var<T> sum_per_sample<T>(const Var<T>&);

BLOODNET_INSTANTIATE_AD(float)
BLOODNET_INSTANTIATE_AD(double)

#undef BLOODNET_INSTANTIATE_AD

}  // namespace bloodnet::ad
