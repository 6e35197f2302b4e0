#pragma once

// Trace-based reverse-mode differentiation. Ops append nodes to a Tape as
// they run; nodes are therefore already in topological order and backward is
// a single reverse sweep that visits each reachable node exactly once. Every
// op records a closure that turns the incoming output-gradient into
// parent-gradient contributions via the VJPs in ops.hpp.

#include <functional>
#include <optional>
#include <vector>

#include "vnode/ops.hpp"
#include "vnode/tensor.hpp"

namespace vnode {

// Test hook: scales the conv2d kernel VJP. gradcheck's negative control sets
// this != 1 to prove a wrong VJP is detected.
namespace testhook {
inline double conv_kernel_vjp_scale = 1.0;
}

template <typename T>
class Tape;

template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor<T>& value() const { return tape->value(*this); }
};

template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

    Var<T> leaf(const Tensor<T>& v) { return push(v, {}, nullptr); }

    Var<T> push(Tensor<T> value, std::vector<int> parents, BackwardFn backward) {
        for (int p : parents)
            if (p < 0 || p >= static_cast<int>(nodes_.size()))
                throw ContractError("tape: parent id out of range");
        nodes_.push_back(Node{std::move(value), std::move(parents), std::move(backward)});
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor<T>& value(const Var<T>& v) const { return node(v).value; }

    std::size_t size() const { return nodes_.size(); }

    // Backward from a scalar root, seed 1.
    void backward(const Var<T>& root) {
        if (node(root).value.size() != 1)
            throw ContractError("backward: root must be scalar, got " + shape_str(node(root).value.shape()));
        backward_seeded(root, Tensor<T>::full(node(root).value.shape(), T(1)));
    }

    // Backward with an explicit cotangent on the root (the VJP seed).
    void backward_seeded(const Var<T>& root, const Tensor<T>& seed) {
        if (!seed.same_shape(node(root).value))
            throw ContractError("backward: seed shape " + shape_str(seed.shape()) + " does not match root " +
                                shape_str(node(root).value.shape()));
        grads_.assign(nodes_.size(), Tensor<T>());
        std::vector<char> reachable(nodes_.size(), 0);
        mark_reachable(root.id, reachable);
        accumulate(root.id, seed);
        for (int i = root.id; i >= 0; --i) {
            if (!reachable[static_cast<std::size_t>(i)]) continue;
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.backward) continue;
            const Tensor<T>& g = grads_[static_cast<std::size_t>(i)];
            if (!g.defined()) continue;
            n.backward(*this, g);
        }
    }

    // Called by backward closures to add into a parent's gradient. Fresh
    // unshared tensors are adopted; anything else is copied so later in-place
    // accumulation cannot alias the caller's data.
    void accumulate(int id, Tensor<T> g) {
        auto& slot = grads_[static_cast<std::size_t>(id)];
        if (!slot.defined()) {
            slot = g.storage_unique() ? std::move(g) : g.clone();
        } else {
            kernels::active<T>().add(slot.data(), g.data(), slot.data(), static_cast<std::size_t>(slot.size()));
        }
    }

    bool has_grad(const Var<T>& v) const {
        return v.id < static_cast<int>(grads_.size()) && grads_[static_cast<std::size_t>(v.id)].defined();
    }

    // Gradient of the last backward() w.r.t. v; zeros if v was unreachable.
    Tensor<T> grad(const Var<T>& v) const {
        if (has_grad(v)) return grads_[static_cast<std::size_t>(v.id)];
        return Tensor<T>::zeros(node(v).value.shape());
    }

private:
    struct Node {
        Tensor<T> value;
        std::vector<int> parents;
        BackwardFn backward;
    };

    const Node& node(const Var<T>& v) const {
        if (v.tape != this) throw ContractError("var belongs to a different tape");
        return nodes_.at(static_cast<std::size_t>(v.id));
    }

    void mark_reachable(int root, std::vector<char>& reachable) const {
        std::vector<int> stack{root};
        reachable[static_cast<std::size_t>(root)] = 1;
        while (!stack.empty()) {
            const int id = stack.back();
            stack.pop_back();
            for (int p : nodes_[static_cast<std::size_t>(id)].parents) {
                if (!reachable[static_cast<std::size_t>(p)]) {
                    reachable[static_cast<std::size_t>(p)] = 1;
                    stack.push_back(p);
                }
            }
        }
    }

    std::vector<Node> nodes_;
    std::vector<Tensor<T>> grads_;
};

// ------------------------------------------------------------- tape ops ---
// Each op evaluates eagerly through ops.hpp and registers the matching VJP.

namespace ad {

template <typename T>
void same_tape(const Var<T>& a, const Var<T>& b) {
    if (a.tape != b.tape) throw ContractError("operands recorded on different tapes");
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    same_tape(a, b);
    Tensor<T> out = ops::add(a.value(), b.value());
    return a.tape->push(std::move(out), {a.id, b.id}, [pa = a.id, pb = b.id](Tape<T>& t, const Tensor<T>& g) {
        t.accumulate(pa, g);
        t.accumulate(pb, g);
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    same_tape(a, b);
    Tensor<T> out = ops::sub(a.value(), b.value());
    return a.tape->push(std::move(out), {a.id, b.id}, [pa = a.id, pb = b.id](Tape<T>& t, const Tensor<T>& g) {
        t.accumulate(pa, g);
        t.accumulate(pb, ops::scalar_mul(g, T(-1)));
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    same_tape(a, b);
    Tensor<T> av = a.value(), bv = b.value();
    Tensor<T> out = ops::mul(av, bv);
    return a.tape->push(std::move(out), {a.id, b.id},
                        [pa = a.id, pb = b.id, av, bv](Tape<T>& t, const Tensor<T>& g) {
                            t.accumulate(pa, ops::mul(g, bv));
                            t.accumulate(pb, ops::mul(g, av));
                        });
}

// out = a + alpha * b via clone + axpy, the same arithmetic the fixed-step
// solvers use off-tape, so an unrolled trace reproduces odesolve bit for bit
template <typename T>
Var<T> add_scaled(Var<T> a, Var<T> b, T alpha) {
    same_tape(a, b);
    Tensor<T> out = a.value().clone();
    ops::axpy_into(out, alpha, b.value());
    return a.tape->push(std::move(out), {a.id, b.id},
                        [pa = a.id, pb = b.id, alpha](Tape<T>& t, const Tensor<T>& g) {
                            t.accumulate(pa, g);
                            t.accumulate(pb, ops::scalar_mul(g, alpha));
                        });
}

// x scaled by a single-element tensor variable (e.g. a learnable rate)
template <typename T>
Var<T> scale_by(Var<T> x, Var<T> s) {
    same_tape(x, s);
    if (s.value().size() != 1) throw ShapeError("scale_by: scale must be a single-element tensor");
    Tensor<T> xv = x.value();
    const T sv = s.value().data()[0];
    const Shape ss = s.value().shape();
    Tensor<T> out = ops::scalar_mul(xv, sv);
    return x.tape->push(std::move(out), {x.id, s.id},
                        [px = x.id, ps = s.id, xv, sv, ss](Tape<T>& t, const Tensor<T>& g) {
                            t.accumulate(px, ops::scalar_mul(g, sv));
                            Tensor<T> ds(ss);
                            ds.data()[0] = kernels::active<T>().dot(g.data(), xv.data(),
                                                                    static_cast<std::size_t>(g.size()));
                            t.accumulate(ps, std::move(ds));
                        });
}

template <typename T>
Var<T> scalar_add(Var<T> a, T s) {
    Tensor<T> out = ops::scalar_add(a.value(), s);
    return a.tape->push(std::move(out), {a.id},
                        [pa = a.id](Tape<T>& t, const Tensor<T>& g) { t.accumulate(pa, g); });
}

template <typename T>
Var<T> scalar_mul(Var<T> a, T s) {
    Tensor<T> out = ops::scalar_mul(a.value(), s);
    return a.tape->push(std::move(out), {a.id},
                        [pa = a.id, s](Tape<T>& t, const Tensor<T>& g) { t.accumulate(pa, ops::scalar_mul(g, s)); });
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::type_identity_t<std::optional<Var<T>>> bias, const ops::Conv2dOpts& o) {
    same_tape(x, w);
    Tensor<T> xv = x.value(), wv = w.value();
    Tensor<T> out = ops::conv2d(xv, wv, bias ? &bias->value() : nullptr, o);
    std::vector<int> parents{x.id, w.id};
    if (bias) parents.push_back(bias->id);
    const int pb = bias ? bias->id : -1;
    return x.tape->push(std::move(out), std::move(parents),
                        [px = x.id, pw = w.id, pb, xv, wv, o](Tape<T>& t, const Tensor<T>& g) {
                            t.accumulate(px, ops::conv2d_vjp_input(g, wv, xv.shape(), o));
                            Tensor<T> dw = ops::conv2d_vjp_kernel(g, xv, wv.shape(), o);
                            if (testhook::conv_kernel_vjp_scale != 1.0)
                                dw = ops::scalar_mul(dw, static_cast<T>(testhook::conv_kernel_vjp_scale));
                            t.accumulate(pw, dw);
                            if (pb >= 0) t.accumulate(pb, ops::conv2d_vjp_bias(g));
                        });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    same_tape(a, b);
    Tensor<T> av = a.value(), bv = b.value();
    Tensor<T> out = ops::matmul(av, bv);
    return a.tape->push(std::move(out), {a.id, b.id},
                        [pa = a.id, pb = b.id, av, bv](Tape<T>& t, const Tensor<T>& g) {
                            // da = g * b^T ; db = a^T * g
                            const std::int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
                            Tensor<T> da(av.shape());
                            kernels::active<T>().gemm_acc_nt(g.data(), bv.data(), da.data(),
                                                             static_cast<std::size_t>(m), static_cast<std::size_t>(n),
                                                             static_cast<std::size_t>(k));
                            Tensor<T> db(bv.shape());
                            const auto& kt = kernels::active<T>();
                            for (std::int64_t i = 0; i < m; ++i)
                                for (std::int64_t j = 0; j < k; ++j)
                                    if (av.data()[i * k + j] != T{})
                                        kt.axpy(av.data()[i * k + j], g.data() + i * n, db.data() + j * n,
                                                static_cast<std::size_t>(n));
                            t.accumulate(pa, da);
                            t.accumulate(pb, db);
                        });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, std::type_identity_t<std::optional<Var<T>>> bias) {
    same_tape(x, w);
    Tensor<T> xv = x.value(), wv = w.value();
    Tensor<T> out = ops::linear(xv, wv, bias ? &bias->value() : nullptr);
    std::vector<int> parents{x.id, w.id};
    if (bias) parents.push_back(bias->id);
    const int pb = bias ? bias->id : -1;
    return x.tape->push(std::move(out), std::move(parents),
                        [px = x.id, pw = w.id, pb, xv, wv](Tape<T>& t, const Tensor<T>& g) {
                            t.accumulate(px, ops::linear_vjp_input(g, wv));
                            t.accumulate(pw, ops::linear_vjp_weight(g, xv));
                            if (pb >= 0) {
                                const std::int64_t n = g.dim(0), c = g.dim(1);
                                Tensor<T> db(Shape{c});
                                for (std::int64_t i = 0; i < n; ++i)
                                    kernels::active<T>().add(db.data(), g.data() + i * c, db.data(),
                                                             static_cast<std::size_t>(c));
                                t.accumulate(pb, db);
                            }
                        });
}

template <typename T>
Var<T> relu(Var<T> x) {
    Tensor<T> xv = x.value();
    return x.tape->push(ops::relu(xv), {x.id}, [px = x.id, xv](Tape<T>& t, const Tensor<T>& g) {
        t.accumulate(px, ops::relu_vjp(g, xv));
    });
}

template <typename T>
Var<T> reduce_all(Var<T> x, ops::ReduceTag tag) {
    Tensor<T> xv = x.value();
    return x.tape->push(ops::reduce_all(xv, tag), {x.id}, [px = x.id, xv, tag](Tape<T>& t, const Tensor<T>& g) {
        t.accumulate(px, ops::reduce_all_vjp(g, xv, tag));
    });
}

template <typename T>
Var<T> reduce_axis(Var<T> x, ops::ReduceTag tag, int axis) {
    Tensor<T> xv = x.value();
    return x.tape->push(ops::reduce_axis(xv, tag, axis), {x.id},
                        [px = x.id, xv, tag, axis](Tape<T>& t, const Tensor<T>& g) {
                            t.accumulate(px, ops::reduce_axis_vjp(g, xv, tag, axis));
                        });
}

template <typename T>
Var<T> avgpool2d(Var<T> x, int k, int stride) {
    const Shape xs = x.value().shape();
    return x.tape->push(ops::avgpool2d(x.value(), k, stride), {x.id},
                        [px = x.id, xs, k, stride](Tape<T>& t, const Tensor<T>& g) {
                            t.accumulate(px, ops::avgpool2d_vjp(g, xs, k, stride));
                        });
}

template <typename T>
Var<T> global_avgpool2d(Var<T> x) {
    const Shape xs = x.value().shape();
    return x.tape->push(ops::global_avgpool2d(x.value()), {x.id},
                        [px = x.id, xs](Tape<T>& t, const Tensor<T>& g) {
                            t.accumulate(px, ops::global_avgpool2d_vjp(g, xs));
                        });
}

template <typename T>
Var<T> flatten(Var<T> x) {
    const Shape xs = x.value().shape();
    if (xs.empty()) throw ShapeError("flatten: scalar input");
    Shape os{xs[0], shape_numel(xs) / xs[0]};
    return x.tape->push(x.value().reshaped(os), {x.id}, [px = x.id, xs](Tape<T>& t, const Tensor<T>& g) {
        t.accumulate(px, g.reshaped(xs));
    });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
    const Shape xs = x.value().shape();
    return x.tape->push(x.value().reshaped(std::move(shape)), {x.id},
                        [px = x.id, xs](Tape<T>& t, const Tensor<T>& g) { t.accumulate(px, g.reshaped(xs)); });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    std::vector<Tensor<T>> vals;
    std::vector<int> parents;
    std::vector<Shape> shapes;
    for (const auto& p : parts) {
        same_tape(parts[0], p);
        vals.push_back(p.value());
        parents.push_back(p.id);
        shapes.push_back(p.value().shape());
    }
    Tensor<T> out = ops::concat(vals, axis);
    auto backward = [ids = parents, shapes, axis](Tape<T>& t, const Tensor<T>& g) {
        auto gs = ops::concat_vjp(g, shapes, axis);
        for (std::size_t i = 0; i < ids.size(); ++i) t.accumulate(ids[i], std::move(gs[i]));
    };
    return parts[0].tape->push(std::move(out), std::move(parents), std::move(backward));
}

template <typename T>
Var<T> softmax(Var<T> x, int axis) {
    Tensor<T> y = ops::softmax(x.value(), axis);
    return x.tape->push(y, {x.id}, [px = x.id, y, axis](Tape<T>& t, const Tensor<T>& g) {
        t.accumulate(px, ops::softmax_vjp(g, y, axis));
    });
}

template <typename T>
Var<T> cross_entropy(Var<T> probs, const std::vector<std::int64_t>& labels) {
    Tensor<T> pv = probs.value();
    return probs.tape->push(ops::cross_entropy(pv, labels), {probs.id},
                            [pp = probs.id, pv, labels](Tape<T>& t, const Tensor<T>& g) {
                                t.accumulate(pp, ops::cross_entropy_vjp(g, pv, labels));
                            });
}

} // namespace ad

} // namespace vnode
