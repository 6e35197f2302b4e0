#pragma once

// Forward evaluations and vector-Jacobian products for the op set. These are
// plain tensor->tensor functions; the tape in autodiff.hpp wraps them, and
// the ODE adjoint calls the VJPs directly. Convolution runs as im2col + GEMM
// with batch images split across threads; every output element is produced
// by exactly one thread, so forwards are bitwise reproducible for any thread
// count. Weight-gradient reductions merge per-thread partials in a fixed
// order and are reproducible for a fixed thread count.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <optional>
#include <vector>

#include "vnode/kernels.hpp"
#include "vnode/tensor.hpp"

namespace vnode::ops {

struct Conv2dOpts {
    int stride_h = 1, stride_w = 1;
    int pad_h = 0, pad_w = 0;
    int groups = 1;
};

inline std::int64_t conv_out_extent(std::int64_t in, int k, int pad, int stride) {
    return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

struct ConvGeom {
    std::int64_t n, cin, h, w;
    std::int64_t cout, kh, kw;
    std::int64_t ho, wo;
    std::int64_t groups, cpg, opg; // channels and outputs per group
    std::int64_t patch;            // cpg*kh*kw
    std::int64_t spatial;          // ho*wo
};

template <typename T>
ConvGeom conv_geometry(const Shape& xs, const Shape& ws, const Conv2dOpts& o) {
    if (xs.size() != 4) throw ShapeError("conv2d: input must be [N,C,H,W], got " + shape_str(xs));
    if (ws.size() != 4) throw ShapeError("conv2d: kernel must be [Cout,Cin/groups,kh,kw], got " + shape_str(ws));
    if (o.stride_h < 1 || o.stride_w < 1) throw ConfigError("conv2d: stride must be positive");
    if (o.pad_h < 0 || o.pad_w < 0) throw ConfigError("conv2d: padding must be non-negative");
    if (o.groups < 1) throw ConfigError("conv2d: groups must be positive");
    ConvGeom g;
    g.n = xs[0];
    g.cin = xs[1];
    g.h = xs[2];
    g.w = xs[3];
    g.cout = ws[0];
    g.kh = ws[2];
    g.kw = ws[3];
    g.groups = o.groups;
    if (g.cin % g.groups != 0)
        throw ConfigError("conv2d: groups=" + std::to_string(o.groups) + " does not divide input channels " +
                          std::to_string(g.cin));
    if (g.cout % g.groups != 0)
        throw ConfigError("conv2d: groups=" + std::to_string(o.groups) + " does not divide output channels " +
                          std::to_string(g.cout));
    g.cpg = g.cin / g.groups;
    g.opg = g.cout / g.groups;
    if (ws[1] != g.cpg)
        throw ShapeError("conv2d: kernel expects " + std::to_string(ws[1]) + " channels per group, input provides " +
                         std::to_string(g.cpg));
    if (g.kh > g.h + 2 * o.pad_h || g.kw > g.w + 2 * o.pad_w)
        throw ShapeError("conv2d: kernel does not fit within the padded input");
    g.ho = conv_out_extent(g.h, static_cast<int>(g.kh), o.pad_h, o.stride_h);
    g.wo = conv_out_extent(g.w, static_cast<int>(g.kw), o.pad_w, o.stride_w);
    g.patch = g.cpg * g.kh * g.kw;
    g.spatial = g.ho * g.wo;
    return g;
}

// col is [cin*kh*kw, ho*wo] row-major for one image
template <typename T>
void im2col(const T* x, const ConvGeom& g, const Conv2dOpts& o, T* col) {
    for (std::int64_t c = 0; c < g.cin; ++c) {
        const T* xc = x + c * g.h * g.w;
        for (std::int64_t ki = 0; ki < g.kh; ++ki) {
            for (std::int64_t kj = 0; kj < g.kw; ++kj) {
                T* row = col + ((c * g.kh + ki) * g.kw + kj) * g.spatial;
                for (std::int64_t oy = 0; oy < g.ho; ++oy) {
                    const std::int64_t iy = oy * o.stride_h - o.pad_h + ki;
                    T* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(dst, dst + g.wo, T{});
                        continue;
                    }
                    const T* src = xc + iy * g.w;
                    for (std::int64_t ox = 0; ox < g.wo; ++ox) {
                        const std::int64_t ix = ox * o.stride_w - o.pad_w + kj;
                        dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T{};
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_acc(const T* col, const ConvGeom& g, const Conv2dOpts& o, T* dx) {
    for (std::int64_t c = 0; c < g.cin; ++c) {
        T* xc = dx + c * g.h * g.w;
        for (std::int64_t ki = 0; ki < g.kh; ++ki) {
            for (std::int64_t kj = 0; kj < g.kw; ++kj) {
                const T* row = col + ((c * g.kh + ki) * g.kw + kj) * g.spatial;
                for (std::int64_t oy = 0; oy < g.ho; ++oy) {
                    const std::int64_t iy = oy * o.stride_h - o.pad_h + ki;
                    if (iy < 0 || iy >= g.h) continue;
                    const T* src = row + oy * g.wo;
                    T* dst = xc + iy * g.w;
                    for (std::int64_t ox = 0; ox < g.wo; ++ox) {
                        const std::int64_t ix = ox * o.stride_w - o.pad_w + kj;
                        if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

} // namespace detail

// ---------------------------------------------------------------- conv2d ---

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::type_identity_t<const Tensor<T>*> bias,
                 const Conv2dOpts& o) {
    const auto g = detail::conv_geometry<T>(x.shape(), w.shape(), o);
    if (bias && bias->shape() != Shape{g.cout})
        throw ShapeError("conv2d: bias must be [Cout]=" + std::to_string(g.cout) + ", got " + shape_str(bias->shape()));
    Tensor<T> out(Shape{g.n, g.cout, g.ho, g.wo});
    const auto& kt = kernels::active<T>();
    const T* bptr = bias ? bias->data() : nullptr;
    T* optr = out.data();
    const T* xptr = x.data();
    const T* wptr = w.data();
    kernels::parallel_for(static_cast<std::size_t>(g.n), [&](std::size_t nb, std::size_t ne) {
        std::vector<T> col(static_cast<std::size_t>(g.cin * g.kh * g.kw * g.spatial));
        for (std::size_t n = nb; n < ne; ++n) {
            detail::im2col(xptr + n * g.cin * g.h * g.w, g, o, col.data());
            T* on = optr + n * g.cout * g.spatial;
            if (bptr) {
                for (std::int64_t c = 0; c < g.cout; ++c)
                    std::fill(on + c * g.spatial, on + (c + 1) * g.spatial, bptr[c]);
            }
            for (std::int64_t grp = 0; grp < g.groups; ++grp) {
                kt.gemm_acc(wptr + grp * g.opg * g.patch,
                            col.data() + grp * g.patch * g.spatial,
                            on + grp * g.opg * g.spatial,
                            static_cast<std::size_t>(g.opg), static_cast<std::size_t>(g.patch),
                            static_cast<std::size_t>(g.spatial));
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> conv2d_vjp_input(const Tensor<T>& gout, const Tensor<T>& w, const Shape& x_shape, const Conv2dOpts& o) {
    const auto g = detail::conv_geometry<T>(x_shape, w.shape(), o);
    Tensor<T> dx(x_shape);
    // W^T per group, [patch, opg], so the tiled GEMM applies
    std::vector<T> wt(static_cast<std::size_t>(g.cout * g.patch));
    for (std::int64_t grp = 0; grp < g.groups; ++grp) {
        const T* wg = w.data() + grp * g.opg * g.patch;
        T* wtg = wt.data() + grp * g.patch * g.opg;
        for (std::int64_t c = 0; c < g.opg; ++c)
            for (std::int64_t p = 0; p < g.patch; ++p) wtg[p * g.opg + c] = wg[c * g.patch + p];
    }
    const auto& kt = kernels::active<T>();
    const T* gptr = gout.data();
    T* dxptr = dx.data();
    kernels::parallel_for(static_cast<std::size_t>(g.n), [&](std::size_t nb, std::size_t ne) {
        std::vector<T> dcol(static_cast<std::size_t>(g.cin * g.kh * g.kw * g.spatial));
        for (std::size_t n = nb; n < ne; ++n) {
            std::fill(dcol.begin(), dcol.end(), T{});
            const T* gn = gptr + n * g.cout * g.spatial;
            for (std::int64_t grp = 0; grp < g.groups; ++grp) {
                kt.gemm_acc(wt.data() + grp * g.patch * g.opg,
                            gn + grp * g.opg * g.spatial,
                            dcol.data() + grp * g.patch * g.spatial,
                            static_cast<std::size_t>(g.patch), static_cast<std::size_t>(g.opg),
                            static_cast<std::size_t>(g.spatial));
            }
            detail::col2im_acc(dcol.data(), g, o, dxptr + n * g.cin * g.h * g.w);
        }
    });
    return dx;
}

template <typename T>
Tensor<T> conv2d_vjp_kernel(const Tensor<T>& gout, const Tensor<T>& x, const Shape& w_shape, const Conv2dOpts& o) {
    const auto g = detail::conv_geometry<T>(x.shape(), Shape(w_shape), o);
    Tensor<T> dw(w_shape);
    const auto& kt = kernels::active<T>();
    const T* gptr = gout.data();
    const T* xptr = x.data();
    const std::size_t wsize = static_cast<std::size_t>(shape_numel(w_shape));

    // contiguous image ranges, one partial dW each, merged in range order
    const std::size_t nimg = static_cast<std::size_t>(g.n);
    const std::size_t workers = kernels::partition_count(nimg);
    std::vector<std::vector<T>> partials(workers);

    kernels::parallel_for_indexed(nimg, [&](std::size_t widx, std::size_t nb, std::size_t ne) {
        auto& local = partials[widx];
        local.assign(wsize, T{});
        std::vector<T> col(static_cast<std::size_t>(g.cin * g.kh * g.kw * g.spatial));
        for (std::size_t n = nb; n < ne; ++n) {
            detail::im2col(xptr + n * g.cin * g.h * g.w, g, o, col.data());
            const T* gn = gptr + n * g.cout * g.spatial;
            for (std::int64_t grp = 0; grp < g.groups; ++grp) {
                kt.gemm_acc_nt(gn + grp * g.opg * g.spatial,
                               col.data() + grp * g.patch * g.spatial,
                               local.data() + grp * g.opg * g.patch,
                               static_cast<std::size_t>(g.opg), static_cast<std::size_t>(g.spatial),
                               static_cast<std::size_t>(g.patch));
            }
        }
    });
    for (std::size_t wdx = 0; wdx < workers; ++wdx)
        if (!partials[wdx].empty()) kt.add(dw.data(), partials[wdx].data(), dw.data(), wsize);
    return dw;
}

template <typename T>
Tensor<T> conv2d_vjp_bias(const Tensor<T>& gout) {
    const auto& s = gout.shape();
    Tensor<T> db(Shape{s[1]});
    const std::int64_t spatial = s[2] * s[3];
    const auto& kt = kernels::active<T>();
    for (std::int64_t n = 0; n < s[0]; ++n)
        for (std::int64_t c = 0; c < s[1]; ++c)
            db.data()[c] += kt.sum(gout.data() + (n * s[1] + c) * spatial, static_cast<std::size_t>(spatial));
    return db;
}

// ----------------------------------------------------------- elementwise ---

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    kernels::active<T>().add(a.data(), b.data(), out.data(), static_cast<std::size_t>(a.size()));
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    Tensor<T> out(a.shape());
    kernels::active<T>().sub(a.data(), b.data(), out.data(), static_cast<std::size_t>(a.size()));
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    kernels::active<T>().mul(a.data(), b.data(), out.data(), static_cast<std::size_t>(a.size()));
    return out;
}

template <typename T>
Tensor<T> scalar_add(const Tensor<T>& a, T s) {
    Tensor<T> out(a.shape());
    kernels::active<T>().scalar_add(a.data(), s, out.data(), static_cast<std::size_t>(a.size()));
    return out;
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& a, T s) {
    Tensor<T> out(a.shape());
    kernels::active<T>().scale(a.data(), s, out.data(), static_cast<std::size_t>(a.size()));
    return out;
}

// y += alpha * x
template <typename T>
void axpy_into(Tensor<T>& y, T alpha, const Tensor<T>& x) {
    require_same_shape(y, x, "axpy");
    kernels::active<T>().axpy(alpha, x.data(), y.data(), static_cast<std::size_t>(y.size()));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] > T{} ? x.data()[i] : T{};
    return out;
}

template <typename T>
Tensor<T> relu_vjp(const Tensor<T>& gout, const Tensor<T>& x) {
    Tensor<T> dx(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) dx.data()[i] = x.data()[i] > T{} ? gout.data()[i] : T{};
    return dx;
}

// --------------------------------------------------------------- matmul ---

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expects rank-2 tensors, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(Shape{a.dim(0), b.dim(1)});
    kernels::active<T>().gemm_acc(a.data(), b.data(), out.data(), static_cast<std::size_t>(a.dim(0)),
                                  static_cast<std::size_t>(a.dim(1)), static_cast<std::size_t>(b.dim(1)));
    return out;
}

// x[N,F] * w[C,F]^T + b[C] -> [N,C]; the classifier head layout
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, std::type_identity_t<const Tensor<T>*> bias) {
    if (x.rank() != 2 || w.rank() != 2) throw ShapeError("linear: expects rank-2 input and weight");
    if (x.dim(1) != w.dim(1))
        throw ShapeError("linear: feature dims differ, input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
    const std::int64_t n = x.dim(0), c = w.dim(0), f = x.dim(1);
    if (bias && bias->shape() != Shape{c}) throw ShapeError("linear: bias must be [" + std::to_string(c) + "]");
    Tensor<T> out(Shape{n, c});
    if (bias)
        for (std::int64_t i = 0; i < n; ++i) std::memcpy(out.data() + i * c, bias->data(), sizeof(T) * c);
    kernels::active<T>().gemm_acc_nt(x.data(), w.data(), out.data(), static_cast<std::size_t>(n),
                                     static_cast<std::size_t>(f), static_cast<std::size_t>(c));
    return out;
}

template <typename T>
Tensor<T> linear_vjp_input(const Tensor<T>& gout, const Tensor<T>& w) {
    const std::int64_t n = gout.dim(0), c = gout.dim(1), f = w.dim(1);
    Tensor<T> dx(Shape{n, f});
    kernels::active<T>().gemm_acc(gout.data(), w.data(), dx.data(), static_cast<std::size_t>(n),
                                  static_cast<std::size_t>(c), static_cast<std::size_t>(f));
    return dx;
}

template <typename T>
Tensor<T> linear_vjp_weight(const Tensor<T>& gout, const Tensor<T>& x) {
    const std::int64_t n = gout.dim(0), c = gout.dim(1), f = x.dim(1);
    Tensor<T> dw(Shape{c, f});
    const auto& kt = kernels::active<T>();
    for (std::int64_t i = 0; i < n; ++i) {
        const T* grow = gout.data() + i * c;
        const T* xrow = x.data() + i * f;
        for (std::int64_t j = 0; j < c; ++j)
            if (grow[j] != T{}) kt.axpy(grow[j], xrow, dw.data() + j * f, static_cast<std::size_t>(f));
    }
    return dw;
}

// ------------------------------------------------------------ reductions ---

enum class ReduceTag { sum, mean, max };

template <typename T>
Tensor<T> reduce_all(const Tensor<T>& x, ReduceTag tag) {
    const auto& kt = kernels::active<T>();
    T v{};
    switch (tag) {
        case ReduceTag::sum: v = kt.sum(x.data(), static_cast<std::size_t>(x.size())); break;
        case ReduceTag::mean:
            v = kt.sum(x.data(), static_cast<std::size_t>(x.size())) / static_cast<T>(x.size());
            break;
        case ReduceTag::max: v = *std::max_element(x.data(), x.data() + x.size()); break;
    }
    return Tensor<T>::scalar(v);
}

template <typename T>
Tensor<T> reduce_all_vjp(const Tensor<T>& gout, const Tensor<T>& x, ReduceTag tag) {
    const T g = gout.item();
    Tensor<T> dx(x.shape());
    switch (tag) {
        case ReduceTag::sum: std::fill(dx.data(), dx.data() + dx.size(), g); break;
        case ReduceTag::mean: std::fill(dx.data(), dx.data() + dx.size(), g / static_cast<T>(x.size())); break;
        case ReduceTag::max: {
            // subgradient: all mass on the first maximal element
            const T* p = std::max_element(x.data(), x.data() + x.size());
            dx.data()[p - x.data()] = g;
            break;
        }
    }
    return dx;
}

struct AxisSplit {
    std::int64_t outer, len, inner;
};

inline AxisSplit axis_split(const Shape& s, int axis) {
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    AxisSplit a{1, s[static_cast<std::size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) a.outer *= s[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) a.inner *= s[i];
    return a;
}

template <typename T>
Tensor<T> reduce_axis(const Tensor<T>& x, ReduceTag tag, int axis) {
    const auto a = axis_split(x.shape(), axis);
    Shape os = x.shape();
    os.erase(os.begin() + axis);
    if (os.empty()) os = Shape{1};
    Tensor<T> out(os);
    for (std::int64_t o = 0; o < a.outer; ++o) {
        for (std::int64_t i = 0; i < a.inner; ++i) {
            const T* base = x.data() + (o * a.len) * a.inner + i;
            T acc = (tag == ReduceTag::max) ? base[0] : T{};
            for (std::int64_t j = 0; j < a.len; ++j) {
                const T v = base[j * a.inner];
                if (tag == ReduceTag::max)
                    acc = std::max(acc, v);
                else
                    acc += v;
            }
            if (tag == ReduceTag::mean) acc /= static_cast<T>(a.len);
            out.data()[o * a.inner + i] = acc;
        }
    }
    return out;
}

template <typename T>
Tensor<T> reduce_axis_vjp(const Tensor<T>& gout, const Tensor<T>& x, ReduceTag tag, int axis) {
    const auto a = axis_split(x.shape(), axis);
    Tensor<T> dx(x.shape());
    for (std::int64_t o = 0; o < a.outer; ++o) {
        for (std::int64_t i = 0; i < a.inner; ++i) {
            const T g = gout.data()[o * a.inner + i];
            T* base = dx.data() + (o * a.len) * a.inner + i;
            const T* xb = x.data() + (o * a.len) * a.inner + i;
            switch (tag) {
                case ReduceTag::sum:
                    for (std::int64_t j = 0; j < a.len; ++j) base[j * a.inner] = g;
                    break;
                case ReduceTag::mean:
                    for (std::int64_t j = 0; j < a.len; ++j) base[j * a.inner] = g / static_cast<T>(a.len);
                    break;
                case ReduceTag::max: {
                    std::int64_t arg = 0;
                    for (std::int64_t j = 1; j < a.len; ++j)
                        if (xb[j * a.inner] > xb[arg * a.inner]) arg = j;
                    base[arg * a.inner] = g;
                    break;
                }
            }
        }
    }
    return dx;
}

// --------------------------------------------------------------- pooling ---

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, int k, int stride) {
    if (x.rank() != 4) throw ShapeError("avgpool2d: input must be [N,C,H,W]");
    if (k < 1 || stride < 1) throw ConfigError("avgpool2d: kernel and stride must be positive");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t ho = (h - k) / stride + 1, wo = (w - k) / stride + 1;
    if (ho < 1 || wo < 1) throw ShapeError("avgpool2d: window does not fit input");
    Tensor<T> out(Shape{n, c, ho, wo});
    const T inv = T(1) / static_cast<T>(k * k);
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        const T* xp = x.data() + nc * h * w;
        T* op = out.data() + nc * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy)
            for (std::int64_t ox = 0; ox < wo; ++ox) {
                T acc{};
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) acc += xp[(oy * stride + ky) * w + (ox * stride + kx)];
                op[oy * wo + ox] = acc * inv;
            }
    }
    return out;
}

template <typename T>
Tensor<T> avgpool2d_vjp(const Tensor<T>& gout, const Shape& x_shape, int k, int stride) {
    Tensor<T> dx(x_shape);
    const std::int64_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3];
    const std::int64_t ho = gout.dim(2), wo = gout.dim(3);
    const T inv = T(1) / static_cast<T>(k * k);
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        T* dp = dx.data() + nc * h * w;
        const T* gp = gout.data() + nc * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy)
            for (std::int64_t ox = 0; ox < wo; ++ox) {
                const T g = gp[oy * wo + ox] * inv;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) dp[(oy * stride + ky) * w + (ox * stride + kx)] += g;
            }
    }
    return dx;
}

// [N,C,H,W] -> [N,C]
template <typename T>
Tensor<T> global_avgpool2d(const Tensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("global_avgpool2d: input must be [N,C,H,W]");
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out(Shape{n, c});
    const auto& kt = kernels::active<T>();
    for (std::int64_t i = 0; i < n * c; ++i)
        out.data()[i] = kt.sum(x.data() + i * hw, static_cast<std::size_t>(hw)) / static_cast<T>(hw);
    return out;
}

template <typename T>
Tensor<T> global_avgpool2d_vjp(const Tensor<T>& gout, const Shape& x_shape) {
    Tensor<T> dx(x_shape);
    const std::int64_t hw = x_shape[2] * x_shape[3];
    const T inv = T(1) / static_cast<T>(hw);
    for (std::int64_t i = 0; i < x_shape[0] * x_shape[1]; ++i) {
        const T g = gout.data()[i] * inv;
        std::fill(dx.data() + i * hw, dx.data() + (i + 1) * hw, g);
    }
    return dx;
}

// ---------------------------------------------------------------- concat ---

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    Shape os = parts[0].shape();
    if (axis < 0 || axis >= static_cast<int>(os.size())) throw ShapeError("concat: axis out of range");
    std::int64_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != parts[0].rank()) throw ShapeError("concat: rank mismatch");
        for (int d = 0; d < p.rank(); ++d)
            if (d != axis && p.dim(d) != parts[0].dim(d))
                throw ShapeError("concat: shapes differ outside the concat axis: " + shape_str(parts[0].shape()) +
                                 " vs " + shape_str(p.shape()));
        total += p.dim(axis);
    }
    os[static_cast<std::size_t>(axis)] = total;
    Tensor<T> out(os);
    const auto a = axis_split(os, axis);
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t len = p.dim(axis);
        for (std::int64_t o = 0; o < a.outer; ++o) {
            std::memcpy(out.data() + (o * a.len + off) * a.inner, p.data() + o * len * a.inner,
                        sizeof(T) * static_cast<std::size_t>(len * a.inner));
        }
        off += len;
    }
    return out;
}

template <typename T>
std::vector<Tensor<T>> concat_vjp(const Tensor<T>& gout, const std::vector<Shape>& part_shapes, int axis) {
    std::vector<Tensor<T>> grads;
    grads.reserve(part_shapes.size());
    const auto a = axis_split(gout.shape(), axis);
    std::int64_t off = 0;
    for (const auto& ps : part_shapes) {
        Tensor<T> g(ps);
        const std::int64_t len = ps[static_cast<std::size_t>(axis)];
        for (std::int64_t o = 0; o < a.outer; ++o)
            std::memcpy(g.data() + o * len * a.inner, gout.data() + (o * a.len + off) * a.inner,
                        sizeof(T) * static_cast<std::size_t>(len * a.inner));
        off += len;
        grads.push_back(std::move(g));
    }
    return grads;
}

// --------------------------------------------------------------- softmax ---

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    const auto a = axis_split(x.shape(), axis);
    Tensor<T> out(x.shape());
    for (std::int64_t o = 0; o < a.outer; ++o) {
        for (std::int64_t i = 0; i < a.inner; ++i) {
            const T* xb = x.data() + o * a.len * a.inner + i;
            T* ob = out.data() + o * a.len * a.inner + i;
            T mx = xb[0];
            for (std::int64_t j = 1; j < a.len; ++j) mx = std::max(mx, xb[j * a.inner]);
            T z{};
            for (std::int64_t j = 0; j < a.len; ++j) {
                const T e = std::exp(xb[j * a.inner] - mx);
                ob[j * a.inner] = e;
                z += e;
            }
            const T inv = T(1) / z;
            for (std::int64_t j = 0; j < a.len; ++j) ob[j * a.inner] *= inv;
        }
    }
    return out;
}

// dx = y .* (g - sum(g .* y)) along the axis
template <typename T>
Tensor<T> softmax_vjp(const Tensor<T>& gout, const Tensor<T>& y, int axis) {
    const auto a = axis_split(y.shape(), axis);
    Tensor<T> dx(y.shape());
    for (std::int64_t o = 0; o < a.outer; ++o) {
        for (std::int64_t i = 0; i < a.inner; ++i) {
            const std::int64_t base = o * a.len * a.inner + i;
            T dot{};
            for (std::int64_t j = 0; j < a.len; ++j) dot += gout.data()[base + j * a.inner] * y.data()[base + j * a.inner];
            for (std::int64_t j = 0; j < a.len; ++j) {
                const std::int64_t idx = base + j * a.inner;
                dx.data()[idx] = y.data()[idx] * (gout.data()[idx] - dot);
            }
        }
    }
    return dx;
}

// --------------------------------------------------------- cross entropy ---

inline constexpr double kLogClamp = 1e-12;

// probs [N,C], integer labels -> per-sample losses [N]
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& probs, const std::vector<std::int64_t>& labels) {
    if (probs.rank() != 2) throw ShapeError("cross_entropy: probs must be [N,C]");
    const std::int64_t n = probs.dim(0), c = probs.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != n)
        throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                            " rows");
    Tensor<T> out(Shape{n});
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= c)
            throw ContractError("cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(c) + ")");
        const T p = std::max(probs.data()[i * c + y], static_cast<T>(kLogClamp));
        out.data()[i] = -std::log(p);
    }
    return out;
}

template <typename T>
Tensor<T> cross_entropy_vjp(const Tensor<T>& gout, const Tensor<T>& probs, const std::vector<std::int64_t>& labels) {
    const std::int64_t n = probs.dim(0), c = probs.dim(1);
    Tensor<T> dp(probs.shape());
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t y = labels[static_cast<std::size_t>(i)];
        const T p = std::max(probs.data()[i * c + y], static_cast<T>(kLogClamp));
        dp.data()[i * c + y] = -gout.data()[i] / p;
    }
    return dp;
}

// ------------------------------------------------------------- validation ---

template <typename T>
void check_finite(const Tensor<T>& t, const std::string& what) {
    if (!t.all_finite()) throw DivergenceError("non-finite values in " + what);
}

} // namespace vnode::ops
