#pragma once

// Full-model gradient verification: central finite differences of the
// multi-stage loss against the adjoint-mode tape gradient, plus the
// adjoint/unrolled cross-check, grouped by parameter family. 64-bit only;
// finite differences are unreliable in f32.
//
// Relative error is inf-norm based: |a - b| / max(family gradient scale,
// |reference|), so near-zero entries are measured against the family's
// largest gradient instead of exploding.

#include <map>

#include "vnode/model.hpp"
#include "vnode/trainer.hpp"

namespace vnode {

struct GradcheckFamilyReport {
    double max_fd_err = 0;       // adjoint vs central finite differences
    double max_unrolled_err = 0; // adjoint vs unrolled backprop
    double grad_scale = 0;
    std::int64_t params = 0;
};

struct GradcheckReport {
    std::map<ParamFamily, GradcheckFamilyReport> families;
    std::int64_t total_params = 0;

    double max_fd_err() const {
        double m = 0;
        for (const auto& [f, r] : families) m = std::max(m, r.max_fd_err);
        return m;
    }
    double max_unrolled_err() const {
        double m = 0;
        for (const auto& [f, r] : families) m = std::max(m, r.max_unrolled_err);
        return m;
    }
};

inline const char* family_label(ParamFamily f) {
    switch (f) {
        case ParamFamily::discrete_filter: return "V (discrete filters)";
        case ParamFamily::dynamics: return "Theta (dynamics)";
        case ParamFamily::head: return "W (heads)";
    }
    return "?";
}

// eps: central-difference step; the loss is the uniform multi-stage mean
// cross-entropy on the given batch.
inline GradcheckReport gradcheck_model(VnodeModel<double>& model, const Tensor<double>& x,
                                       const std::vector<std::int64_t>& labels, double eps = 1e-4) {
    using T = double;
    auto loss_value = [&]() {
        auto fwd = model.forward(x);
        double total = 0;
        for (const auto& probs : fwd.stage_probs)
            total += ops::reduce_all(ops::cross_entropy(probs, labels), ops::ReduceTag::mean).item();
        return total;
    };

    Tape<T> tape_a;
    auto fwd_a = model.forward_on_tape(tape_a, x, GradMode::adjoint);
    std::vector<Var<T>> losses_a;
    for (auto& p : fwd_a.stage_probs) losses_a.push_back(stage_loss(p, labels));
    tape_a.backward(total_loss(losses_a, {}));

    Tape<T> tape_u;
    auto fwd_u = model.forward_on_tape(tape_u, x, GradMode::unrolled);
    std::vector<Var<T>> losses_u;
    for (auto& p : fwd_u.stage_probs) losses_u.push_back(stage_loss(p, labels));
    tape_u.backward(total_loss(losses_u, {}));

    auto params = model.parameters();
    GradcheckReport report;

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& fam = report.families[params[i].family];
        fam.params += params[i].tensor->size();
        report.total_params += params[i].tensor->size();
        const auto g = tape_a.grad(fwd_a.param_vars[i]);
        for (std::int64_t k = 0; k < g.size(); ++k)
            fam.grad_scale = std::max(fam.grad_scale, std::abs(g.data()[k]));
    }
    for (auto& [f, r] : report.families) r.grad_scale = std::max(r.grad_scale, 1e-8);

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& fam = report.families[params[i].family];
        const auto g_adj = tape_a.grad(fwd_a.param_vars[i]);
        const auto g_unr = tape_u.grad(fwd_u.param_vars[i]);
        Tensor<T>& p = *params[i].tensor;
        for (std::int64_t k = 0; k < p.size(); ++k) {
            const T saved = p.data()[k];
            p.data()[k] = saved + eps;
            const double up = loss_value();
            p.data()[k] = saved - eps;
            const double dn = loss_value();
            p.data()[k] = saved;
            const double fd = (up - dn) / (2 * eps);
            const double ga = g_adj.data()[k];
            const double gu = g_unr.data()[k];
            fam.max_fd_err = std::max(fam.max_fd_err, std::abs(ga - fd) / std::max(fam.grad_scale, std::abs(fd)));
            fam.max_unrolled_err =
                std::max(fam.max_unrolled_err, std::abs(ga - gu) / std::max(fam.grad_scale, std::abs(gu)));
        }
    }
    return report;
}

} // namespace vnode
