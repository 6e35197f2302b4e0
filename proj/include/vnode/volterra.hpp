#pragma once

// Discrete 2-D Volterra filter layers. A layer computes
//
//   y = b + conv(x, W1) + quadratic(x)
//
// where the quadratic term is either the full second-order kernel W2 over
// all pairs of patch offsets (naive mode, the oracle, kept for small shapes)
// or its separable low-rank factorization
//
//   quadratic(x) = sum_q conv(x, A_q) .* conv(x, B_q),
//
// which is the production path and is differentiable end to end through the
// tape. Higher effective order comes from cascading layers; a multi-scale
// block runs parallel layers of different kernel sizes and concatenates
// their channels.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vnode/autodiff.hpp"
#include "vnode/ops.hpp"
#include "vnode/rng.hpp"
#include "vnode/tensor.hpp"

namespace vnode {

enum class VolterraMode { low_rank, naive_full };

// W2 element budget for naive mode; full kernels grow as (C/g * kh * kw)^2.
inline constexpr std::int64_t kNaiveKernelBudget = 1 << 26;

template <typename T>
struct VolterraLayer {
    int in_ch = 1, out_ch = 1;
    int kh = 3, kw = 3;
    int stride = 1;
    int pad = 0;
    int groups = 1;
    int rank = 4; // Q; 0 disables the quadratic term
    VolterraMode mode = VolterraMode::low_rank;

    Tensor<T> w1;                   // [out, in/g, kh, kw]
    Tensor<T> bias;                 // [out]
    std::vector<Tensor<T>> factor_a; // rank tensors, each shaped like w1
    std::vector<Tensor<T>> factor_b;
    Tensor<T> w2_full;              // [out, patch, patch] in naive mode

    std::int64_t patch_len() const { return static_cast<std::int64_t>(in_ch / groups) * kh * kw; }

    ops::Conv2dOpts conv_opts() const {
        ops::Conv2dOpts o;
        o.stride_h = o.stride_w = stride;
        o.pad_h = o.pad_w = pad;
        o.groups = groups;
        return o;
    }

    Shape kernel_shape() const { return Shape{out_ch, in_ch / groups, kh, kw}; }

    void validate() const {
        if (in_ch < 1 || out_ch < 1 || kh < 1 || kw < 1) throw ConfigError("volterra: extents must be positive");
        if (in_ch % groups != 0 || out_ch % groups != 0)
            throw ConfigError("volterra: groups=" + std::to_string(groups) + " must divide channels " +
                              std::to_string(in_ch) + "->" + std::to_string(out_ch));
        if (mode == VolterraMode::low_rank && rank < 0) throw ConfigError("volterra: rank must be >= 0");
        const bool has_factors = !factor_a.empty() || !factor_b.empty();
        const bool has_full = w2_full.defined();
        if (mode == VolterraMode::low_rank && has_full)
            throw ConfigError("volterra: low-rank layer carries a full second-order kernel");
        if (mode == VolterraMode::naive_full && has_factors)
            throw ConfigError("volterra: naive layer carries low-rank factors");
    }

    // W1 is fan-in scaled uniform. The second-order factors use a tighter
    // 1/(fanin*sqrt(Q)) bound: the quadratic term must start subdominant,
    // because dh/dt with an h^2 component of comparable scale has
    // finite-time blow-up at the |h| ~ 4..5 values normalized image data
    // produces.
    void init_params(Rng& rng) {
        validate();
        const double bound = 1.0 / std::sqrt(static_cast<double>(patch_len()));
        w1 = uniform_tensor<T>(kernel_shape(), rng, -bound, bound);
        bias = Tensor<T>::zeros(Shape{out_ch});
        factor_a.clear();
        factor_b.clear();
        w2_full = Tensor<T>();
        if (mode == VolterraMode::low_rank) {
            const double fb =
                rank > 0 ? 1.0 / (static_cast<double>(patch_len()) * std::sqrt(static_cast<double>(rank))) : 0.0;
            for (int q = 0; q < rank; ++q) {
                factor_a.push_back(uniform_tensor<T>(kernel_shape(), rng, -fb, fb));
                factor_b.push_back(uniform_tensor<T>(kernel_shape(), rng, -fb, fb));
            }
        } else {
            const std::int64_t p = patch_len();
            if (static_cast<std::int64_t>(out_ch) * p * p > kNaiveKernelBudget)
                throw ConfigError("volterra: full second-order kernel would need " +
                                  std::to_string(static_cast<std::int64_t>(out_ch) * p * p) +
                                  " elements, over the naive-mode budget of " + std::to_string(kNaiveKernelBudget));
            w2_full = uniform_tensor<T>(Shape{out_ch, p, p}, rng, -bound * bound, bound * bound);
        }
    }

    void zero_quadratic() {
        for (auto& t : factor_a) t = Tensor<T>::zeros(t.shape());
        for (auto& t : factor_b) t = Tensor<T>::zeros(t.shape());
        if (w2_full.defined()) w2_full = Tensor<T>::zeros(w2_full.shape());
    }

    // named parameter slots in a fixed order (checkpoint / optimizer order)
    std::vector<std::pair<std::string, Tensor<T>*>> parameters() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        out.emplace_back("w1", &w1);
        out.emplace_back("b", &bias);
        for (int q = 0; q < static_cast<int>(factor_a.size()); ++q) {
            out.emplace_back("a" + std::to_string(q + 1), &factor_a[static_cast<std::size_t>(q)]);
            out.emplace_back("b" + std::to_string(q + 1), &factor_b[static_cast<std::size_t>(q)]);
        }
        if (w2_full.defined()) out.emplace_back("w2", &w2_full);
        return out;
    }
};

// ---------------------------------------------------------------- counts ---

// Learnable scalar count.
template <typename T>
std::int64_t volterra_count_params(const VolterraLayer<T>& l) {
    const std::int64_t kelems = static_cast<std::int64_t>(l.out_ch) * (l.in_ch / l.groups) * l.kh * l.kw;
    std::int64_t n = kelems + l.out_ch; // W1 + bias
    if (l.mode == VolterraMode::low_rank)
        n += 2 * static_cast<std::int64_t>(l.rank) * kelems;
    else
        n += static_cast<std::int64_t>(l.out_ch) * l.patch_len() * l.patch_len();
    return n;
}

// FLOPs for one forward on a [C,H,W] input: 2 per MAC for every convolution
// (bias adds not counted), plus one multiply per output element per low-rank
// term for the Hadamard products. Naive mode charges the quadratic term
// 3 FLOPs per kernel pair per output element (two multiplies, one add).
template <typename T>
std::int64_t volterra_count_flops(const VolterraLayer<T>& l, std::int64_t h, std::int64_t w) {
    const std::int64_t ho = ops::conv_out_extent(h, l.kh, l.pad, l.stride);
    const std::int64_t wo = ops::conv_out_extent(w, l.kw, l.pad, l.stride);
    const std::int64_t spatial = ho * wo;
    const std::int64_t out_elems = spatial * l.out_ch;
    const std::int64_t conv_macs = out_elems * l.patch_len();
    if (l.mode == VolterraMode::low_rank) {
        const std::int64_t convs = 1 + 2 * static_cast<std::int64_t>(l.rank);
        return 2 * conv_macs * convs + static_cast<std::int64_t>(l.rank) * out_elems;
    }
    return 2 * conv_macs + 3 * out_elems * l.patch_len() * l.patch_len();
}

// -------------------------------------------------------------- forwards ---

// Full second-order evaluation, exactly the pairwise sum over patch offsets.
// Small shapes only; this is the oracle the low-rank path is tested against.
template <typename T>
Tensor<T> volterra_forward_naive(const Tensor<T>& x, const VolterraLayer<T>& l) {
    l.validate();
    if (l.mode != VolterraMode::naive_full) throw ContractError("volterra_forward_naive: layer is not in naive mode");
    const std::int64_t p = l.patch_len();
    if (!l.w2_full.defined() || l.w2_full.shape() != Shape{l.out_ch, p, p})
        throw ShapeError("volterra_forward_naive: W2 must be [out,patch,patch]");
    const auto o = l.conv_opts();
    const auto g = ops::detail::conv_geometry<T>(x.shape(), l.kernel_shape(), o);
    Tensor<T> out = ops::conv2d(x, l.w1, &l.bias, o);

    const auto& kt = kernels::active<T>();
    T* optr = out.data();
    const T* xptr = x.data();
    kernels::parallel_for(static_cast<std::size_t>(g.n), [&](std::size_t nb, std::size_t ne) {
        std::vector<T> col(static_cast<std::size_t>(g.cin * g.kh * g.kw * g.spatial));
        std::vector<T> wpatch(static_cast<std::size_t>(g.spatial));
        for (std::size_t n = nb; n < ne; ++n) {
            ops::detail::im2col(xptr + n * g.cin * g.h * g.w, g, o, col.data());
            for (std::int64_t grp = 0; grp < g.groups; ++grp) {
                const T* colg = col.data() + grp * g.patch * g.spatial;
                for (std::int64_t c = 0; c < g.opg; ++c) {
                    const std::int64_t oc = grp * g.opg + c;
                    const T* w2 = l.w2_full.data() + oc * p * p;
                    T* orow = optr + (n * g.cout + oc) * g.spatial;
                    for (std::int64_t p1 = 0; p1 < p; ++p1) {
                        // wpatch = sum_p2 W2[p1,p2] * patchrow(p2)
                        std::fill(wpatch.begin(), wpatch.end(), T{});
                        for (std::int64_t p2 = 0; p2 < p; ++p2) {
                            const T coeff = w2[p1 * p + p2];
                            if (coeff == T{}) continue;
                            kt.axpy(coeff, colg + p2 * g.spatial, wpatch.data(),
                                    static_cast<std::size_t>(g.spatial));
                        }
                        // out += patchrow(p1) .* wpatch
                        const T* row1 = colg + p1 * g.spatial;
                        for (std::int64_t s = 0; s < g.spatial; ++s) orow[s] += row1[s] * wpatch[static_cast<std::size_t>(s)];
                    }
                }
            }
        }
    });
    return out;
}

// Low-rank evaluation, plain tensors (inference path).
template <typename T>
Tensor<T> volterra_forward_lowrank(const Tensor<T>& x, const VolterraLayer<T>& l) {
    l.validate();
    if (l.mode != VolterraMode::low_rank) throw ContractError("volterra_forward_lowrank: layer is not in low-rank mode");
    const auto o = l.conv_opts();
    Tensor<T> y = ops::conv2d(x, l.w1, &l.bias, o);
    for (int q = 0; q < l.rank; ++q) {
        Tensor<T> ca = ops::conv2d(x, l.factor_a[static_cast<std::size_t>(q)], nullptr, o);
        Tensor<T> cb = ops::conv2d(x, l.factor_b[static_cast<std::size_t>(q)], nullptr, o);
        Tensor<T> prod = ops::mul(ca, cb);
        kernels::active<T>().add(y.data(), prod.data(), y.data(), static_cast<std::size_t>(y.size()));
    }
    return y;
}

// Low-rank evaluation recorded on the tape x lives on. Parameter handles are
// supplied by the caller in the order of parameters(): w1, b, a1, b1, ...
template <typename T>
Var<T> volterra_forward_on_tape(Var<T> x, const VolterraLayer<T>& l, std::span<const Var<T>> params) {
    if (l.mode != VolterraMode::low_rank)
        throw ContractError("volterra_forward_on_tape: only low-rank layers are differentiable");
    if (params.size() != 2 + 2 * static_cast<std::size_t>(l.rank))
        throw ContractError("volterra_forward_on_tape: expected " + std::to_string(2 + 2 * l.rank) +
                            " parameter vars, got " + std::to_string(params.size()));
    const auto o = l.conv_opts();
    Var<T> y = ad::conv2d(x, params[0], std::optional<Var<T>>(params[1]), o);
    for (int q = 0; q < l.rank; ++q) {
        Var<T> ca = ad::conv2d(x, params[2 + 2 * static_cast<std::size_t>(q)], std::nullopt, o);
        Var<T> cb = ad::conv2d(x, params[3 + 2 * static_cast<std::size_t>(q)], std::nullopt, o);
        y = ad::add(y, ad::mul(ca, cb));
    }
    return y;
}

// Builds the full W2 equal to the low-rank factorization:
//   W2[c, p1, p2] = sum_q A_q[c, p1] * B_q[c, p2]
template <typename T>
Tensor<T> lowrank_to_full_w2(const VolterraLayer<T>& l) {
    const std::int64_t p = l.patch_len();
    Tensor<T> w2(Shape{l.out_ch, p, p});
    for (int q = 0; q < l.rank; ++q) {
        const T* a = l.factor_a[static_cast<std::size_t>(q)].data();
        const T* b = l.factor_b[static_cast<std::size_t>(q)].data();
        for (std::int64_t c = 0; c < l.out_ch; ++c) {
            T* dst = w2.data() + c * p * p;
            for (std::int64_t i = 0; i < p; ++i)
                for (std::int64_t j = 0; j < p; ++j) dst[i * p + j] += a[c * p + i] * b[c * p + j];
        }
    }
    return w2;
}

// --------------------------------------------------------------- cascade ---

// Sequential composition; a stack of second-order layers realizes effective
// polynomial order 2^depth.
template <typename T>
Tensor<T> volterra_cascade(const Tensor<T>& x, const std::vector<VolterraLayer<T>>& layers) {
    if (layers.empty()) throw ConfigError("volterra_cascade: empty layer list");
    Tensor<T> h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        if (h.dim(1) != l.in_ch)
            throw ConfigError("volterra_cascade: layer " + std::to_string(i + 1) + " expects " +
                              std::to_string(l.in_ch) + " channels, got " + std::to_string(h.dim(1)));
        h = l.mode == VolterraMode::low_rank ? volterra_forward_lowrank(h, l) : volterra_forward_naive(h, l);
    }
    return h;
}

// ------------------------------------------------------------ multiscale ---

// Parallel layers over a shared input, channel-concatenated. All branches
// must agree on output spatial extents (choose paddings accordingly).
template <typename T>
struct MultiScale {
    std::vector<VolterraLayer<T>> branches;

    void validate(std::int64_t h, std::int64_t w) const {
        if (branches.empty()) throw ConfigError("multiscale: no branches");
        std::int64_t ho = -1, wo = -1;
        for (const auto& b : branches) {
            b.validate();
            if (b.in_ch != branches[0].in_ch) throw ConfigError("multiscale: branches disagree on input channels");
            const std::int64_t bho = ops::conv_out_extent(h, b.kh, b.pad, b.stride);
            const std::int64_t bwo = ops::conv_out_extent(w, b.kw, b.pad, b.stride);
            if (ho < 0) {
                ho = bho;
                wo = bwo;
            } else if (bho != ho || bwo != wo) {
                throw ConfigError("multiscale: branch output extents differ (" + std::to_string(bho) + "x" +
                                  std::to_string(bwo) + " vs " + std::to_string(ho) + "x" + std::to_string(wo) + ")");
            }
        }
    }

    int out_channels() const {
        int c = 0;
        for (const auto& b : branches) c += b.out_ch;
        return c;
    }
};

template <typename T>
Tensor<T> multiscale_forward(const Tensor<T>& x, const MultiScale<T>& ms) {
    ms.validate(x.dim(2), x.dim(3));
    std::vector<Tensor<T>> outs;
    outs.reserve(ms.branches.size());
    for (const auto& b : ms.branches) outs.push_back(volterra_forward_lowrank(x, b));
    if (outs.size() == 1) return outs[0];
    return ops::concat(outs, 1);
}

template <typename T>
Var<T> multiscale_forward_on_tape(Var<T> x, const MultiScale<T>& ms, std::span<const Var<T>> params) {
    ms.validate(x.value().dim(2), x.value().dim(3));
    std::vector<Var<T>> outs;
    std::size_t off = 0;
    for (const auto& b : ms.branches) {
        const std::size_t take = 2 + 2 * static_cast<std::size_t>(b.rank);
        outs.push_back(volterra_forward_on_tape(x, b, params.subspan(off, take)));
        off += take;
    }
    if (outs.size() == 1) return outs[0];
    return ad::concat(outs, 1);
}

template <typename T>
std::int64_t multiscale_count_params(const MultiScale<T>& ms) {
    std::int64_t n = 0;
    for (const auto& b : ms.branches) n += volterra_count_params(b);
    return n;
}

template <typename T>
std::int64_t multiscale_count_flops(const MultiScale<T>& ms, std::int64_t h, std::int64_t w) {
    std::int64_t n = 0;
    for (const auto& b : ms.branches) n += volterra_count_flops(b, h, w);
    return n;
}

} // namespace vnode
