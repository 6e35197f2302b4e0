#pragma once

// Initial-value-problem integrators over tensor-valued states, with three
// gradient paths through a solve:
//
//   * odesolve                 — forward only
//   * odesolve_adjoint_backward — integrates the augmented system
//         d/dt [h, a, G] = [g, -a^T dg/dh, -a^T dg/dtheta]
//     backward from t1 to t0 with the same method and tolerances; O(1)
//     memory in the number of solver steps
//   * odesolve_on_tape          — unrolls a fixed-step solve onto a tape so
//     plain reverse mode differentiates through it; the cross-check oracle
//     for the adjoint
//
// Dynamics are a black box: anything that can evaluate dh/dt and record one
// evaluation on a trace. Gradients w.r.t. the interval endpoints are not
// computed; endpoints are fixed hyperparameters.

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vnode/autodiff.hpp"
#include "vnode/ops.hpp"
#include "vnode/tensor.hpp"

namespace vnode {

enum class OdeMethod { euler, rk4, dopri5 };

inline const char* method_name(OdeMethod m) {
    switch (m) {
        case OdeMethod::euler: return "euler";
        case OdeMethod::rk4: return "rk4";
        case OdeMethod::dopri5: return "dopri5";
    }
    return "?";
}

inline OdeMethod method_from_name(const std::string& s) {
    if (s == "euler") return OdeMethod::euler;
    if (s == "rk4") return OdeMethod::rk4;
    if (s == "dopri5") return OdeMethod::dopri5;
    throw ConfigError("unknown ODE method: " + s);
}

template <typename T>
struct SolverConfig {
    OdeMethod method = OdeMethod::rk4;
    int steps = 8;        // fixed-step methods
    T t0 = 0, t1 = 1;
    T rtol = static_cast<T>(1e-6); // dopri5
    T atol = static_cast<T>(1e-9);
    int max_steps = 100000; // attempted adaptive steps
    T h_init = 0;           // 0: |t1-t0|/20

    void validate() const {
        if (!(t0 < t1)) throw ConfigError("solver interval requires t_start < t_end");
        if (method != OdeMethod::dopri5 && steps < 1) throw ConfigError("solver steps must be >= 1");
        if (method == OdeMethod::dopri5) {
            if (rtol <= 0 || atol <= 0) throw ConfigError("solver tolerances must be positive");
            if (max_steps < 1) throw ConfigError("solver max_steps must be >= 1");
        }
    }

    bool fixed_step() const { return method != OdeMethod::dopri5; }

    // Evaluations per fixed-step solve; the deterministic count used by the
    // FLOP accounting. dopri5 is estimated as the rejection-free attempt
    // count at the initial step size.
    std::int64_t nominal_fevals() const {
        switch (method) {
            case OdeMethod::euler: return steps;
            case OdeMethod::rk4: return 4ll * steps;
            case OdeMethod::dopri5: {
                const double h = h_init > 0 ? static_cast<double>(h_init) : static_cast<double>(t1 - t0) / 20.0;
                const auto attempts = static_cast<std::int64_t>(std::ceil(static_cast<double>(t1 - t0) / h));
                return 1 + 6 * std::max<std::int64_t>(attempts, 1);
            }
        }
        return 0;
    }
};

struct SolveStats {
    std::int64_t nfev = 0;
    std::int64_t accepted = 0;
    std::int64_t rejected = 0;
};

// ------------------------------------------------------------- dynamics ---

template <typename T>
class Dynamics {
public:
    virtual ~Dynamics() = default;

    // named learnable tensors, fixed order
    virtual std::vector<std::pair<std::string, Tensor<T>*>> parameters() = 0;

    // dh/dt at (h, t); output has h's shape
    virtual Tensor<T> eval(const Tensor<T>& h, T t) const = 0;

    // one evaluation recorded on the tape h lives on; params align with
    // parameters()
    virtual Var<T> trace(Var<T> h, T t, std::span<const Var<T>> params) const = 0;
};

// Zero-parameter dynamics from a plain callable (tests, toy problems).
template <typename T, typename F>
class CallableDynamics final : public Dynamics<T> {
public:
    explicit CallableDynamics(F f) : f_(std::move(f)) {}
    std::vector<std::pair<std::string, Tensor<T>*>> parameters() override { return {}; }
    Tensor<T> eval(const Tensor<T>& h, T t) const override { return f_(h, t); }
    Var<T> trace(Var<T>, T, std::span<const Var<T>>) const override {
        throw ContractError("CallableDynamics cannot be traced");
    }

private:
    F f_;
};

// ------------------------------------------------------ state containers ---

template <typename T>
using StateVec = std::vector<Tensor<T>>;

namespace ode_detail {

template <typename T>
StateVec<T> sv_clone(const StateVec<T>& a) {
    StateVec<T> out;
    out.reserve(a.size());
    for (const auto& t : a) out.push_back(t.clone());
    return out;
}

template <typename T>
void sv_axpy(StateVec<T>& y, T alpha, const StateVec<T>& x) {
    for (std::size_t i = 0; i < y.size(); ++i) ops::axpy_into(y[i], alpha, x[i]);
}

template <typename T>
void sv_check_finite(const StateVec<T>& s, T t) {
    for (const auto& c : s)
        if (!c.all_finite())
            throw DivergenceError("non-finite dynamics evaluation at t=" + std::to_string(static_cast<double>(t)));
}

// Dormand-Prince 5(4) tableau. Stage 7 equals the 5th-order solution (FSAL).
template <typename T>
struct Dopri5 {
    static constexpr T c2 = T(1) / 5, c3 = T(3) / 10, c4 = T(4) / 5, c5 = T(8) / 9;
    static constexpr T a21 = T(1) / 5;
    static constexpr T a31 = T(3) / 40, a32 = T(9) / 40;
    static constexpr T a41 = T(44) / 45, a42 = T(-56) / 15, a43 = T(32) / 9;
    static constexpr T a51 = T(19372) / 6561, a52 = T(-25360) / 2187, a53 = T(64448) / 6561, a54 = T(-212) / 729;
    static constexpr T a61 = T(9017) / 3168, a62 = T(-355) / 33, a63 = T(46732) / 5247, a64 = T(49) / 176,
                       a65 = T(-5103) / 18656;
    static constexpr T b1 = T(35) / 384, b3 = T(500) / 1113, b4 = T(125) / 192, b5 = T(-2187) / 6784, b6 = T(11) / 84;
    // b - b*: weights of the embedded error estimate
    static constexpr T e1 = T(71) / 57600, e3 = T(-71) / 16695, e4 = T(71) / 1920, e5 = T(-17253) / 339200,
                       e6 = T(22) / 525, e7 = T(-1) / 40;
};

// mixed RMS error norm: sqrt(mean((err_i / (atol + rtol*max(|y|,|y_new|)))^2))
template <typename T>
double error_norm(const StateVec<T>& err, const StateVec<T>& y, const StateVec<T>& ynew, T atol, T rtol) {
    double acc = 0;
    std::int64_t count = 0;
    for (std::size_t c = 0; c < err.size(); ++c) {
        const std::int64_t n = err[c].size();
        const T* e = err[c].data();
        const T* a = y[c].data();
        const T* b = ynew[c].data();
        for (std::int64_t i = 0; i < n; ++i) {
            const double sc = static_cast<double>(atol) +
                              static_cast<double>(rtol) * std::max(std::abs(static_cast<double>(a[i])),
                                                                   std::abs(static_cast<double>(b[i])));
            const double r = static_cast<double>(e[i]) / sc;
            acc += r * r;
        }
        count += n;
    }
    return std::sqrt(acc / static_cast<double>(count));
}

// One fixed-step integration pass, any direction. F: (const StateVec&, t) -> StateVec.
template <typename T, typename F>
StateVec<T> integrate_fixed(F&& f, StateVec<T> y, OdeMethod method, int steps, T t_from, T t_to, SolveStats& stats) {
    const T dt = (t_to - t_from) / static_cast<T>(steps);
    T t = t_from;
    for (int s = 0; s < steps; ++s) {
        if (method == OdeMethod::euler) {
            StateVec<T> k1 = f(y, t);
            sv_check_finite(k1, t);
            ++stats.nfev;
            sv_axpy(y, dt, k1);
        } else { // rk4
            StateVec<T> k1 = f(y, t);
            sv_check_finite(k1, t);
            StateVec<T> y2 = sv_clone(y);
            sv_axpy(y2, dt / 2, k1);
            StateVec<T> k2 = f(y2, t + dt / 2);
            sv_check_finite(k2, t + dt / 2);
            StateVec<T> y3 = sv_clone(y);
            sv_axpy(y3, dt / 2, k2);
            StateVec<T> k3 = f(y3, t + dt / 2);
            sv_check_finite(k3, t + dt / 2);
            StateVec<T> y4 = sv_clone(y);
            sv_axpy(y4, dt, k3);
            StateVec<T> k4 = f(y4, t + dt);
            sv_check_finite(k4, t + dt);
            stats.nfev += 4;
            sv_axpy(y, dt / 6, k1);
            sv_axpy(y, dt / 3, k2);
            sv_axpy(y, dt / 3, k3);
            sv_axpy(y, dt / 6, k4);
        }
        t = t_from + dt * static_cast<T>(s + 1);
        ++stats.accepted;
    }
    return y;
}

template <typename T, typename F>
StateVec<T> integrate_dopri5(F&& f, StateVec<T> y, const SolverConfig<T>& cfg, T t_from, T t_to, SolveStats& stats) {
    using D = Dopri5<T>;
    const T dir = t_to > t_from ? T(1) : T(-1);
    const T span = std::abs(t_to - t_from);
    T h = cfg.h_init > 0 ? cfg.h_init : span / 20;
    h = std::min(h, span) * dir;
    T t = t_from;

    StateVec<T> k1 = f(y, t); // FSAL slot
    sv_check_finite(k1, t);
    ++stats.nfev;

    while (dir * (t_to - t) > 0) {
        const T h_min = std::max({std::abs(t), std::abs(t_to), T(1)}) * std::numeric_limits<T>::epsilon() * 16;
        if (std::abs(t_to - t) <= h_min) break; // already there up to roundoff
        if (stats.accepted + stats.rejected >= cfg.max_steps)
            throw ConvergenceError("dopri5: max steps (" + std::to_string(cfg.max_steps) + ") exceeded at t=" +
                                   std::to_string(static_cast<double>(t)));
        if (std::abs(h) < h_min)
            throw ConvergenceError("dopri5: step size underflow at t=" + std::to_string(static_cast<double>(t)));
        if (dir * (t + h - t_to) > 0) h = t_to - t; // clamp final step

        StateVec<T> y2 = sv_clone(y);
        sv_axpy(y2, h * D::a21, k1);
        StateVec<T> k2 = f(y2, t + D::c2 * h);
        StateVec<T> y3 = sv_clone(y);
        sv_axpy(y3, h * D::a31, k1);
        sv_axpy(y3, h * D::a32, k2);
        StateVec<T> k3 = f(y3, t + D::c3 * h);
        StateVec<T> y4 = sv_clone(y);
        sv_axpy(y4, h * D::a41, k1);
        sv_axpy(y4, h * D::a42, k2);
        sv_axpy(y4, h * D::a43, k3);
        StateVec<T> k4 = f(y4, t + D::c4 * h);
        StateVec<T> y5 = sv_clone(y);
        sv_axpy(y5, h * D::a51, k1);
        sv_axpy(y5, h * D::a52, k2);
        sv_axpy(y5, h * D::a53, k3);
        sv_axpy(y5, h * D::a54, k4);
        StateVec<T> k5 = f(y5, t + D::c5 * h);
        StateVec<T> y6 = sv_clone(y);
        sv_axpy(y6, h * D::a61, k1);
        sv_axpy(y6, h * D::a62, k2);
        sv_axpy(y6, h * D::a63, k3);
        sv_axpy(y6, h * D::a64, k4);
        sv_axpy(y6, h * D::a65, k5);
        StateVec<T> k6 = f(y6, t + h);

        // 5th order solution; stage 7 is f at it
        StateVec<T> ynew = sv_clone(y);
        sv_axpy(ynew, h * D::b1, k1);
        sv_axpy(ynew, h * D::b3, k3);
        sv_axpy(ynew, h * D::b4, k4);
        sv_axpy(ynew, h * D::b5, k5);
        sv_axpy(ynew, h * D::b6, k6);
        StateVec<T> k7 = f(ynew, t + h);
        stats.nfev += 6;
        sv_check_finite(k7, t + h);

        StateVec<T> err;
        err.reserve(y.size());
        for (std::size_t c = 0; c < y.size(); ++c) err.push_back(Tensor<T>::zeros(y[c].shape()));
        sv_axpy(err, h * D::e1, k1);
        sv_axpy(err, h * D::e3, k3);
        sv_axpy(err, h * D::e4, k4);
        sv_axpy(err, h * D::e5, k5);
        sv_axpy(err, h * D::e6, k6);
        sv_axpy(err, h * D::e7, k7);

        const double en = error_norm(err, y, ynew, cfg.atol, cfg.rtol);
        if (en <= 1.0) {
            t = t + h;
            y = std::move(ynew);
            k1 = std::move(k7); // FSAL
            ++stats.accepted;
        } else {
            ++stats.rejected;
        }
        const double factor =
            en == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(en, -0.2), 0.2, 5.0);
        h = h * static_cast<T>(factor);
    }
    return y;
}

template <typename T, typename F>
StateVec<T> integrate(F&& f, StateVec<T> y0, const SolverConfig<T>& cfg, T t_from, T t_to, SolveStats& stats) {
    if (cfg.fixed_step())
        return integrate_fixed(std::forward<F>(f), std::move(y0), cfg.method, cfg.steps, t_from, t_to, stats);
    return integrate_dopri5(std::forward<F>(f), std::move(y0), cfg, t_from, t_to, stats);
}

} // namespace ode_detail

// --------------------------------------------------------------- odesolve ---

template <typename T>
std::pair<Tensor<T>, SolveStats> odesolve(const Tensor<T>& h0, const Dynamics<T>& dyn, const SolverConfig<T>& cfg) {
    cfg.validate();
    if (!h0.all_finite()) throw DivergenceError("odesolve: initial state contains non-finite values");
    SolveStats stats;
    auto f = [&dyn](const StateVec<T>& s, T t) -> StateVec<T> {
        StateVec<T> out;
        out.push_back(dyn.eval(s[0], t));
        return out;
    };
    StateVec<T> y0;
    y0.push_back(h0.clone());
    StateVec<T> y = ode_detail::integrate(f, std::move(y0), cfg, cfg.t0, cfg.t1, stats);
    return {std::move(y[0]), stats};
}

// ------------------------------------------------------- adjoint backward ---

template <typename T>
struct AdjointResult {
    Tensor<T> dh0;
    std::vector<Tensor<T>> dparams; // aligned with dynamics.parameters()
    SolveStats stats;
};

template <typename T>
AdjointResult<T> odesolve_adjoint_backward(const Tensor<T>& h_end, const Tensor<T>& dL_dh_end, Dynamics<T>& dyn,
                                           const SolverConfig<T>& cfg) {
    cfg.validate();
    if (!h_end.same_shape(dL_dh_end))
        throw ContractError("adjoint: dL/dh_end shape " + shape_str(dL_dh_end.shape()) +
                            " does not match state shape " + shape_str(h_end.shape()));
    auto params = dyn.parameters();
    const std::size_t np = params.size();

    // augmented state: [h, a, G_1..G_P]
    StateVec<T> s0;
    s0.push_back(h_end.clone());
    s0.push_back(dL_dh_end.clone());
    for (auto& [name, tp] : params) s0.push_back(Tensor<T>::zeros(tp->shape()));

    auto f = [&dyn, &params, np](const StateVec<T>& s, T t) -> StateVec<T> {
        Tape<T> tape;
        Var<T> h = tape.leaf(s[0]);
        std::vector<Var<T>> pv;
        pv.reserve(np);
        for (auto& [name, tp] : params) pv.push_back(tape.leaf(*tp));
        Var<T> out = dyn.trace(h, t, pv);
        tape.backward_seeded(out, s[1]);
        StateVec<T> d;
        d.reserve(2 + np);
        d.push_back(tape.value(out));
        d.push_back(ops::scalar_mul(tape.grad(h), T(-1)));
        for (std::size_t p = 0; p < np; ++p) d.push_back(ops::scalar_mul(tape.grad(pv[p]), T(-1)));
        return d;
    };

    SolveStats stats;
    StateVec<T> s = ode_detail::integrate(f, std::move(s0), cfg, cfg.t1, cfg.t0, stats);

    AdjointResult<T> res;
    res.dh0 = std::move(s[1]);
    for (std::size_t p = 0; p < np; ++p) res.dparams.push_back(std::move(s[2 + p]));
    res.stats = stats;
    return res;
}

// ------------------------------------------------------ unrolled on tape ---

// Records a fixed-step solve onto the tape h0 lives on. param vars must be
// the leaves bound for dyn.parameters(); gradients then flow to them through
// plain reverse mode.
template <typename T>
Var<T> odesolve_on_tape(Var<T> h0, const Dynamics<T>& dyn, std::span<const Var<T>> params,
                        const SolverConfig<T>& cfg, SolveStats* stats = nullptr) {
    cfg.validate();
    if (!cfg.fixed_step()) throw ContractError("odesolve_on_tape: fixed-step methods only");
    SolveStats local;
    const T dt = (cfg.t1 - cfg.t0) / static_cast<T>(cfg.steps);
    Var<T> h = h0;
    // same add_scaled arithmetic as integrate_fixed, so the recorded forward
    // is bitwise identical to odesolve on the same grid
    for (int s = 0; s < cfg.steps; ++s) {
        const T t = cfg.t0 + dt * static_cast<T>(s);
        if (cfg.method == OdeMethod::euler) {
            Var<T> k1 = dyn.trace(h, t, params);
            local.nfev += 1;
            h = ad::add_scaled(h, k1, dt);
        } else {
            Var<T> k1 = dyn.trace(h, t, params);
            Var<T> k2 = dyn.trace(ad::add_scaled(h, k1, dt / 2), t + dt / 2, params);
            Var<T> k3 = dyn.trace(ad::add_scaled(h, k2, dt / 2), t + dt / 2, params);
            Var<T> k4 = dyn.trace(ad::add_scaled(h, k3, dt), t + dt, params);
            local.nfev += 4;
            Var<T> acc = ad::add_scaled(h, k1, dt / 6);
            acc = ad::add_scaled(acc, k2, dt / 3);
            acc = ad::add_scaled(acc, k3, dt / 3);
            h = ad::add_scaled(acc, k4, dt / 6);
        }
        ops::check_finite(h.value(), "unrolled solve state at step " + std::to_string(s + 1));
        ++local.accepted;
    }
    if (stats) *stats = local;
    return h;
}

// Reverse mode through the unrolled fixed-step solve; the internal oracle
// for adjoint correctness. Same result contract as the adjoint.
template <typename T>
AdjointResult<T> odesolve_discrete_backprop(const Tensor<T>& h0, const Tensor<T>& dL_dh_end, Dynamics<T>& dyn,
                                            const SolverConfig<T>& cfg) {
    auto params = dyn.parameters();
    Tape<T> tape;
    Var<T> h0v = tape.leaf(h0);
    std::vector<Var<T>> pv;
    pv.reserve(params.size());
    for (auto& [name, tp] : params) pv.push_back(tape.leaf(*tp));
    SolveStats stats;
    Var<T> hend = odesolve_on_tape<T>(h0v, dyn, pv, cfg, &stats);
    tape.backward_seeded(hend, dL_dh_end);
    AdjointResult<T> res;
    res.dh0 = tape.grad(h0v);
    for (auto& v : pv) res.dparams.push_back(tape.grad(v));
    res.stats = stats;
    return res;
}

} // namespace vnode
