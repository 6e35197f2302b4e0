#pragma once

// The piecewise-continuous model: M stages, each one
//
//   S_m = discrete Volterra filter (X_{m-1})          [event at t_{m-1}]
//   X_m = odesolve(S_m, g_m, [t_{m-1}, t_m])          [continuous interval]
//   yhat_m = softmax(W_m * features(X_m) + b_m)       [stage head]
//
// with the dynamics g_m a channel/spatial-preserving Volterra layer applied
// to h(t) + t (elementwise time injection, so grouped dynamics stay cheap).
// The final stage's yhat is the model's decision; every stage's yhat feeds
// the multi-stage loss.

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "vnode/autodiff.hpp"
#include "vnode/config.hpp"
#include "vnode/ode.hpp"
#include "vnode/volterra.hpp"

namespace vnode {

enum class GradMode { adjoint, unrolled };

inline GradMode grad_mode_from_name(const std::string& s) {
    if (s == "adjoint") return GradMode::adjoint;
    if (s == "unrolled") return GradMode::unrolled;
    throw ConfigError("unknown gradient mode: " + s);
}

// h(t) + t, broadcast over every element
template <typename T>
Tensor<T> time_inject(const Tensor<T>& h, T t) {
    return ops::scalar_add(h, t);
}

// ---------------------------------------------------- dynamics adapter ---

// Volterra-filter dynamics with optional time injection. Holds the layer by
// value; tensor storage is shared with the owning model, so copies see the
// same parameters and stay valid for the lifetime of a tape.
template <typename T>
class VolterraDynamics final : public Dynamics<T> {
public:
    VolterraDynamics(VolterraLayer<T> layer, bool time_injection)
        : layer_(std::move(layer)), time_injection_(time_injection) {}

    std::vector<std::pair<std::string, Tensor<T>*>> parameters() override {
        return layer_.parameters();
    }

    Tensor<T> eval(const Tensor<T>& h, T t) const override {
        if (time_injection_) return volterra_forward_lowrank(time_inject(h, t), layer_);
        return volterra_forward_lowrank(h, layer_);
    }

    Var<T> trace(Var<T> h, T t, std::span<const Var<T>> params) const override {
        Var<T> x = time_injection_ ? ad::scalar_add(h, t) : h;
        return volterra_forward_on_tape(x, layer_, params);
    }

    const VolterraLayer<T>& layer() const { return layer_; }

private:
    VolterraLayer<T> layer_;
    bool time_injection_;
};

// ----------------------------------------------------------- ODE blocks ---

// Forward solve off-tape, one custom node whose backward runs the adjoint.
template <typename T>
Var<T> ode_block_adjoint(Var<T> s, std::shared_ptr<Dynamics<T>> dyn, std::span<const Var<T>> dyn_params,
                         const SolverConfig<T>& cfg, SolveStats* stats = nullptr) {
    auto [h_end, st] = odesolve(s.value(), *dyn, cfg);
    if (stats) *stats = st;
    std::vector<int> parents{s.id};
    std::vector<int> pids;
    for (const auto& v : dyn_params) {
        parents.push_back(v.id);
        pids.push_back(v.id);
    }
    Tensor<T> h_end_saved = h_end;
    auto backward = [ps = s.id, pids, dyn, cfg, h_end_saved](Tape<T>& t, const Tensor<T>& g) {
        auto res = odesolve_adjoint_backward(h_end_saved, g, *dyn, cfg);
        t.accumulate(ps, std::move(res.dh0));
        for (std::size_t i = 0; i < pids.size(); ++i) t.accumulate(pids[i], std::move(res.dparams[i]));
    };
    return s.tape->push(std::move(h_end), std::move(parents), std::move(backward));
}

// --------------------------------------------------------------- stages ---

template <typename T>
struct DiscreteBlock {
    bool is_multiscale = false;
    VolterraLayer<T> layer; // valid when !is_multiscale
    MultiScale<T> ms;       // valid when is_multiscale
    int pool = 1;           // avgpool k = stride = pool after the filter; 1 disables

    int out_channels() const { return is_multiscale ? ms.out_channels() : layer.out_ch; }

    std::vector<std::pair<std::string, Tensor<T>*>> parameters() {
        if (!is_multiscale) return layer.parameters();
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        for (std::size_t b = 0; b < ms.branches.size(); ++b) {
            for (auto& [n, t] : ms.branches[b].parameters())
                out.emplace_back("branch" + std::to_string(b + 1) + "." + n, t);
        }
        return out;
    }
};

template <typename T>
struct Stage {
    DiscreteBlock<T> discrete;
    VolterraLayer<T> dynamics;
    bool time_injection = true;
    SolverConfig<T> solver;
    Tensor<T> head_w; // [classes, feat]
    Tensor<T> head_b; // [classes]
    bool pool_head = true;

    // geometry, resolved at build time
    std::int64_t in_c = 0, in_h = 0, in_w = 0; // stage input
    std::int64_t c = 0, h = 0, w = 0;          // ODE state
    std::int64_t feat_dim = 0;
};

enum class ParamFamily { discrete_filter, dynamics, head };

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T>* tensor;
    ParamFamily family;
};

template <typename T>
struct ForwardResult {
    std::vector<Tensor<T>> stage_probs; // each [N, classes]
    std::int64_t fevals = 0;            // dynamics evaluations across stages
};

template <typename T>
struct TapeForward {
    std::vector<Var<T>> stage_probs;
    std::vector<Var<T>> param_vars; // aligned with model.parameters()
    std::int64_t fevals = 0;
};

// ----------------------------------------------------------------- model ---

template <typename T>
class VnodeModel {
public:
    // Reads every model.* key of cfg; parameters drawn from rng in stage
    // order. See build() below for the schema.
    static VnodeModel build(const Config& cfg, Rng& rng);

    int num_classes() const { return classes_; }
    const Shape& input_shape() const { return input_; } // [C,H,W]
    int num_stages() const { return static_cast<int>(stages_.size()); }
    std::vector<Stage<T>>& stages() { return stages_; }
    const std::vector<Stage<T>>& stages() const { return stages_; }
    bool relu_after_discrete() const { return relu_; }

    // canonical model.* config text; stored in checkpoints
    const std::string& arch_text() const { return arch_text_; }

    std::vector<NamedParam<T>> parameters() {
        std::vector<NamedParam<T>> out;
        for (std::size_t m = 0; m < stages_.size(); ++m) {
            auto& st = stages_[m];
            const std::string p = "stage" + std::to_string(m + 1) + ".";
            for (auto& [n, t] : st.discrete.parameters())
                out.push_back({p + "discrete." + n, t, ParamFamily::discrete_filter});
            for (auto& [n, t] : st.dynamics.parameters())
                out.push_back({p + "dynamics." + n, t, ParamFamily::dynamics});
            out.push_back({p + "head.w", &st.head_w, ParamFamily::head});
            out.push_back({p + "head.b", &st.head_b, ParamFamily::head});
        }
        return out;
    }

    std::int64_t count_params() {
        std::int64_t n = 0;
        for (auto& p : parameters()) n += p.tensor->size();
        return n;
    }

    // all second-order factors to zero: the linear ablation
    void zero_quadratic() {
        for (auto& st : stages_) {
            if (st.discrete.is_multiscale)
                for (auto& b : st.discrete.ms.branches) b.zero_quadratic();
            else
                st.discrete.layer.zero_quadratic();
            st.dynamics.zero_quadratic();
        }
    }

    // Inference forward; returns per-stage probabilities.
    ForwardResult<T> forward(const Tensor<T>& x) const {
        check_input(x);
        ForwardResult<T> out;
        Tensor<T> cur = x;
        for (const auto& st : stages_) {
            Tensor<T> s = discrete_forward(st, cur);
            auto dyn = std::make_shared<VolterraDynamics<T>>(st.dynamics, st.time_injection);
            auto [xm, stats] = odesolve(s, *dyn, st.solver);
            out.fevals += stats.nfev;
            Tensor<T> feats = st.pool_head ? ops::global_avgpool2d(xm)
                                           : xm.reshaped(Shape{xm.dim(0), xm.dim(1) * xm.dim(2) * xm.dim(3)});
            Tensor<T> logits = ops::linear(feats, st.head_w, &st.head_b);
            out.stage_probs.push_back(ops::softmax(logits, 1));
            cur = std::move(xm);
        }
        return out;
    }

    // Training forward: every parameter becomes a tape leaf, ODE blocks
    // differentiate per mode.
    TapeForward<T> forward_on_tape(Tape<T>& tape, const Tensor<T>& x, GradMode mode) {
        check_input(x);
        TapeForward<T> out;
        auto params = parameters();
        out.param_vars.reserve(params.size());
        for (auto& p : params) out.param_vars.push_back(tape.leaf(*p.tensor));

        Var<T> cur = tape.leaf(x);
        std::size_t off = 0;
        for (auto& st : stages_) {
            const std::size_t n_disc = st.discrete.parameters().size();
            const std::size_t n_dyn = st.dynamics.parameters().size();
            std::span<const Var<T>> disc_vars(out.param_vars.data() + off, n_disc);
            std::span<const Var<T>> dyn_vars(out.param_vars.data() + off + n_disc, n_dyn);
            Var<T> head_w = out.param_vars[off + n_disc + n_dyn];
            Var<T> head_b = out.param_vars[off + n_disc + n_dyn + 1];
            off += n_disc + n_dyn + 2;

            Var<T> s = discrete_forward_on_tape(st, cur, disc_vars);
            SolveStats stats;
            Var<T> xm;
            if (mode == GradMode::unrolled) {
                VolterraDynamics<T> dyn(st.dynamics, st.time_injection);
                xm = odesolve_on_tape<T>(s, dyn, dyn_vars, st.solver, &stats);
            } else {
                auto dyn = std::make_shared<VolterraDynamics<T>>(st.dynamics, st.time_injection);
                xm = ode_block_adjoint<T>(s, dyn, dyn_vars, st.solver, &stats);
            }
            out.fevals += stats.nfev;
            Var<T> feats = st.pool_head ? ad::global_avgpool2d(xm) : ad::flatten(xm);
            Var<T> logits = ad::linear(feats, head_w, std::optional<Var<T>>(head_b));
            out.stage_probs.push_back(ad::softmax(logits, 1));
            cur = xm;
        }
        return out;
    }

    // Deterministic per-sample forward cost from the documented closed
    // forms: 2 FLOPs per convolution MAC, one multiply per output element
    // per low-rank term, 2 FLOPs per head MAC; the ODE block charges its
    // dynamics once per solver evaluation (nominal_fevals). Pooling, time
    // injection, and softmax are not counted.
    std::int64_t count_flops() const {
        std::int64_t total = 0;
        for (const auto& st : stages_) total += stage_flops(st);
        return total;
    }

    std::int64_t stage_flops(const Stage<T>& st) const {
        std::int64_t f = 0;
        if (st.discrete.is_multiscale)
            f += multiscale_count_flops(st.discrete.ms, st.in_h, st.in_w);
        else
            f += volterra_count_flops(st.discrete.layer, st.in_h, st.in_w);
        f += volterra_count_flops(st.dynamics, st.h, st.w) * st.solver.nominal_fevals();
        f += 2 * static_cast<std::int64_t>(classes_) * st.feat_dim; // head
        return f;
    }

private:
    void check_input(const Tensor<T>& x) const {
        if (x.rank() != 4 || x.dim(1) != input_[0] || x.dim(2) != input_[1] || x.dim(3) != input_[2])
            throw ShapeError("model: input must be [N," + std::to_string(input_[0]) + "," +
                             std::to_string(input_[1]) + "," + std::to_string(input_[2]) + "], got " +
                             shape_str(x.shape()));
    }

    Tensor<T> discrete_forward(const Stage<T>& st, const Tensor<T>& x) const {
        Tensor<T> s = st.discrete.is_multiscale ? multiscale_forward(x, st.discrete.ms)
                                                : volterra_forward_lowrank(x, st.discrete.layer);
        if (relu_) s = ops::relu(s);
        if (st.discrete.pool > 1) s = ops::avgpool2d(s, st.discrete.pool, st.discrete.pool);
        return s;
    }

    Var<T> discrete_forward_on_tape(const Stage<T>& st, Var<T> x, std::span<const Var<T>> params) {
        Var<T> s = st.discrete.is_multiscale ? multiscale_forward_on_tape(x, st.discrete.ms, params)
                                             : volterra_forward_on_tape(x, st.discrete.layer, params);
        if (relu_) s = ad::relu(s);
        if (st.discrete.pool > 1) s = ad::avgpool2d(s, st.discrete.pool, st.discrete.pool);
        return s;
    }

    std::vector<Stage<T>> stages_;
    int classes_ = 0;
    Shape input_; // [C,H,W]
    bool relu_ = false;
    std::string arch_text_;
};

// ----------------------------------------------------------- model build ---

namespace model_detail {

template <typename T>
VolterraLayer<T> read_layer(const Config& cfg, const std::string& prefix, int in_ch, bool preserve_shape) {
    VolterraLayer<T> l;
    l.in_ch = in_ch;
    l.kh = l.kw = static_cast<int>(cfg.get_int(prefix + ".kernel", 3));
    if (preserve_shape) {
        l.out_ch = static_cast<int>(cfg.get_int(prefix + ".out", in_ch));
        if (l.out_ch != in_ch)
            throw ConfigError(prefix + ": dynamics must preserve channels (" + std::to_string(in_ch) + ")");
        if (l.kh % 2 == 0) throw ConfigError(prefix + ": dynamics kernel must be odd to preserve extent");
        l.stride = 1;
        l.pad = static_cast<int>(cfg.get_int(prefix + ".pad", l.kh / 2));
        if (l.pad != l.kh / 2) throw ConfigError(prefix + ": dynamics padding must be kernel/2 to preserve extent");
    } else {
        l.out_ch = static_cast<int>(cfg.get_int(prefix + ".out"));
        l.stride = static_cast<int>(cfg.get_int(prefix + ".stride", 1));
        l.pad = static_cast<int>(cfg.get_int(prefix + ".pad", l.kh / 2));
    }
    l.groups = static_cast<int>(cfg.get_int(prefix + ".groups", 1));
    const bool quadratic = cfg.get_bool(prefix + ".quadratic", true);
    l.rank = quadratic ? static_cast<int>(cfg.get_int(prefix + ".rank", 4)) : 0;
    l.mode = VolterraMode::low_rank;
    l.validate();
    return l;
}

} // namespace model_detail

// Schema (defaults in parentheses):
//   model.classes, model.input = CxHxW, model.stages (1)
//   model.activation = none|relu (none), model.pool_head (true)
//   model.stageM.t_begin/t_end ((m-1)/M, m/M)
//   model.stageM.discrete.type = volterra|multiscale (volterra)
//   model.stageM.discrete.{out,kernel(3),stride(1),pad(kernel/2),groups(1),
//                           rank(4),quadratic(true),pool(1)}
//   model.stageM.discrete.branches=N + model.stageM.discrete.branchB.{...}
//   model.stageM.dynamics.{kernel(3),groups(1),rank(4),quadratic(true)}
//   model.stageM.time_injection (true)
//   model.stageM.solver.{method(rk4),steps(8),rtol,atol,max_steps,h_init}
template <typename T>
VnodeModel<T> VnodeModel<T>::build(const Config& cfg, Rng& rng) {
    VnodeModel<T> model;
    model.classes_ = static_cast<int>(cfg.get_int("model.classes"));
    if (model.classes_ < 2) throw ConfigError("model.classes must be >= 2");

    const std::string input = cfg.get_str("model.input");
    {
        Shape s;
        std::size_t pos = 0;
        while (pos < input.size()) {
            std::size_t next = input.find('x', pos);
            if (next == std::string::npos) next = input.size();
            s.push_back(std::stoll(input.substr(pos, next - pos)));
            pos = next + 1;
        }
        if (s.size() != 3) throw ConfigError("model.input must be CxHxW, got '" + input + "'");
        model.input_ = s;
    }

    const int M = static_cast<int>(cfg.get_int("model.stages", 1));
    if (M < 1) throw ConfigError("model.stages must be >= 1");
    const std::string act = cfg.get_str("model.activation", "none");
    if (act == "relu")
        model.relu_ = true;
    else if (act != "none")
        throw ConfigError("model.activation must be none or relu");
    const bool pool_head = cfg.get_bool("model.pool_head", true);

    std::int64_t c = model.input_[0], h = model.input_[1], w = model.input_[2];
    T t_prev = 0;
    for (int m = 1; m <= M; ++m) {
        const std::string sp = "model.stage" + std::to_string(m);
        Stage<T> st;
        st.in_c = c;
        st.in_h = h;
        st.in_w = w;

        const std::string type = cfg.get_str(sp + ".discrete.type", "volterra");
        if (type == "multiscale") {
            st.discrete.is_multiscale = true;
            const int nb = static_cast<int>(cfg.get_int(sp + ".discrete.branches"));
            if (nb < 1) throw ConfigError(sp + ".discrete.branches must be >= 1");
            for (int b = 1; b <= nb; ++b) {
                auto layer = model_detail::read_layer<T>(cfg, sp + ".discrete.branch" + std::to_string(b),
                                                         static_cast<int>(c), false);
                layer.init_params(rng);
                st.discrete.ms.branches.push_back(std::move(layer));
            }
            st.discrete.ms.validate(h, w);
        } else if (type == "volterra") {
            st.discrete.layer = model_detail::read_layer<T>(cfg, sp + ".discrete", static_cast<int>(c), false);
            st.discrete.layer.init_params(rng);
        } else {
            throw ConfigError(sp + ".discrete.type must be volterra or multiscale");
        }
        st.discrete.pool = static_cast<int>(cfg.get_int(sp + ".discrete.pool", 1));
        if (st.discrete.pool < 1) throw ConfigError(sp + ".discrete.pool must be >= 1");

        // geometry after the discrete filter
        if (st.discrete.is_multiscale) {
            const auto& b0 = st.discrete.ms.branches[0];
            h = ops::conv_out_extent(h, b0.kh, b0.pad, b0.stride);
            w = ops::conv_out_extent(w, b0.kw, b0.pad, b0.stride);
        } else {
            h = ops::conv_out_extent(h, st.discrete.layer.kh, st.discrete.layer.pad, st.discrete.layer.stride);
            w = ops::conv_out_extent(w, st.discrete.layer.kw, st.discrete.layer.pad, st.discrete.layer.stride);
        }
        c = st.discrete.out_channels();
        if (st.discrete.pool > 1) {
            h = (h - st.discrete.pool) / st.discrete.pool + 1;
            w = (w - st.discrete.pool) / st.discrete.pool + 1;
        }
        if (h < 1 || w < 1) throw ConfigError(sp + ": spatial extent collapsed to zero");
        st.c = c;
        st.h = h;
        st.w = w;

        st.dynamics = model_detail::read_layer<T>(cfg, sp + ".dynamics", static_cast<int>(c), true);
        st.dynamics.init_params(rng);
        st.time_injection = cfg.get_bool(sp + ".time_injection", true);

        st.solver.method = method_from_name(cfg.get_str(sp + ".solver.method", "rk4"));
        st.solver.steps = static_cast<int>(cfg.get_int(sp + ".solver.steps", 8));
        st.solver.t0 = static_cast<T>(cfg.get_double(sp + ".t_begin", static_cast<double>(m - 1) / M));
        st.solver.t1 = static_cast<T>(cfg.get_double(sp + ".t_end", static_cast<double>(m) / M));
        st.solver.rtol = static_cast<T>(cfg.get_double(sp + ".solver.rtol", 1e-6));
        st.solver.atol = static_cast<T>(cfg.get_double(sp + ".solver.atol", 1e-9));
        st.solver.max_steps = static_cast<int>(cfg.get_int(sp + ".solver.max_steps", 100000));
        st.solver.h_init = static_cast<T>(cfg.get_double(sp + ".solver.h_init", 0.0));
        st.solver.validate();
        if (st.solver.t0 < t_prev - static_cast<T>(1e-12))
            throw ConfigError(sp + ": event points must be non-decreasing across stages");
        t_prev = st.solver.t1;

        st.pool_head = pool_head;
        st.feat_dim = pool_head ? c : c * h * w;
        const double bound = 1.0 / std::sqrt(static_cast<double>(st.feat_dim));
        st.head_w = uniform_tensor<T>(Shape{model.classes_, st.feat_dim}, rng, -bound, bound);
        st.head_b = Tensor<T>::zeros(Shape{model.classes_});

        model.stages_.push_back(std::move(st));
    }

    if (std::abs(static_cast<double>(model.stages_.front().solver.t0)) > 1e-9)
        throw ConfigError("event points must start at t_0 = 0");
    if (std::abs(static_cast<double>(model.stages_.back().solver.t1) - 1.0) > 1e-9)
        throw ConfigError("event points must end at t_M = 1");

    // canonical arch text: the model.* subset of cfg, verbatim. Keys are not
    // marked consumed here, so typos still surface via unconsumed().
    Config arch;
    for (const auto& key : cfg.keys_with_prefix("model.")) arch.set(key, cfg.peek(key));
    model.arch_text_ = arch.to_text();
    return model;
}

} // namespace vnode
