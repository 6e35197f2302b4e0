// Acceptance suite. Each criterion prints one [PASS]/[FAIL] line; the exit
// code is the number of failed criteria in the selected group.
//
//   acceptance --fast    criteria 1-5 and 8 (sub-minute each)
//   acceptance --train   criteria 6 and 9 (short training runs)
//   acceptance --full    criterion 7 (desk-scale dataset runs; needs the
//                        real MNIST/CIFAR-10 files under $VNODE_DATA_DIR)
//
// Default: all of the above.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "test_util.hpp"
#include "vnode/checkpoint.hpp"
#include "vnode/data.hpp"
#include "vnode/gradcheck.hpp"
#include "vnode/model.hpp"
#include "vnode/trainer.hpp"

using namespace vnode;
namespace fs = std::filesystem;

namespace {

#ifndef VNODE_SOURCE_DIR
#define VNODE_SOURCE_DIR "."
#endif

std::string data_root() {
    if (const char* env = std::getenv("VNODE_DATA_DIR")) return env;
    return "data";
}

// criterion 1/2 model: M=2, 8 channels, 8x8 inputs, RK4 fixed 8 steps
Config tiny_vnode_config() {
    testutil::TinyModelOpts o;
    o.stages = 2;
    o.channels = 8;
    o.input_c = 3;
    o.input_hw = 8;
    o.rank = 1;
    o.steps = 8;
    return testutil::tiny_model_config(o);
}

struct Ctx {
    std::ostringstream detail;
};

// ---------------------------------------------------------------- 1 & 2 ---

bool criterion1_gradient_soundness(Ctx& c) {
    Rng rng(42);
    auto model = VnodeModel<double>::build(tiny_vnode_config(), rng);
    const std::int64_t nparams = model.count_params();
    Tensor<double> x = uniform_tensor<double>({2, 3, 8, 8}, rng, -1, 1);
    std::vector<std::int64_t> labels{3, 7};
    auto report = gradcheck_model(model, x, labels, 1e-4);
    c.detail << nparams << " params; max rel err vs FD: ";
    bool ok = nparams <= 5000;
    for (auto fam : {ParamFamily::discrete_filter, ParamFamily::dynamics, ParamFamily::head}) {
        const auto& r = report.families.at(fam);
        c.detail << family_label(fam)[0] << "=" << std::scientific << r.max_fd_err << " ";
        ok = ok && r.max_fd_err < 1e-4;
    }
    return ok;
}

bool criterion2_adjoint_equals_unrolled(Ctx& c) {
    Rng rng(43);
    auto model = VnodeModel<double>::build(tiny_vnode_config(), rng);
    Tensor<double> x = uniform_tensor<double>({2, 3, 8, 8}, rng, -1, 1);
    std::vector<std::int64_t> labels{1, 8};

    auto grads = [&](GradMode mode) {
        Tape<double> tape;
        auto fwd = model.forward_on_tape(tape, x, mode);
        std::vector<Var<double>> losses;
        for (auto& p : fwd.stage_probs) losses.push_back(stage_loss(p, labels));
        tape.backward(total_loss(losses, {}));
        std::vector<Tensor<double>> out;
        for (auto& v : fwd.param_vars) out.push_back(tape.grad(v));
        return out;
    };
    auto ga = grads(GradMode::adjoint);
    auto gu = grads(GradMode::unrolled);
    double worst = 0;
    for (std::size_t i = 0; i < ga.size(); ++i) worst = std::max(worst, rel_error(ga[i], gu[i]));
    c.detail << "max rel disagreement " << std::scientific << worst;
    return worst < 1e-6;
}

// -------------------------------------------------------------------- 3 ---

bool criterion3_volterra_oracle(Ctx& c) {
    Rng rng(44);
    double worst = 0;
    int instances = 0;
    struct Cfg {
        int in, out, k, pad, groups, rank, h, w;
    };
    const Cfg cfgs[] = {
        {2, 2, 3, 1, 1, 2, 5, 5}, {1, 4, 3, 0, 1, 1, 6, 6}, {4, 4, 3, 1, 4, 3, 5, 5},
        {2, 6, 1, 0, 2, 2, 4, 4}, {3, 3, 2, 1, 1, 4, 5, 7}, {2, 4, 3, 1, 2, 2, 6, 4},
    };
    while (instances < 100) {
        const auto& cf = cfgs[static_cast<std::size_t>(instances) % (sizeof(cfgs) / sizeof(cfgs[0]))];
        VolterraLayer<double> l;
        l.in_ch = cf.in;
        l.out_ch = cf.out;
        l.kh = l.kw = cf.k;
        l.pad = cf.pad;
        l.groups = cf.groups;
        l.rank = cf.rank;
        l.init_params(rng);
        Tensor<double> x = uniform_tensor<double>({2, cf.in, cf.h, cf.w}, rng, -1, 1);
        auto low = volterra_forward_lowrank(x, l);
        VolterraLayer<double> full = l;
        full.mode = VolterraMode::naive_full;
        full.w2_full = lowrank_to_full_w2(l);
        full.factor_a.clear();
        full.factor_b.clear();
        full.rank = 0;
        auto naive = volterra_forward_naive(x, full);
        worst = std::max(worst, rel_error(low, naive));
        ++instances;
    }
    c.detail << instances << " instances, max rel deviation " << std::scientific << worst;
    return worst < 1e-10;
}

// -------------------------------------------------------------------- 4 ---

bool criterion4_solver_convergence(Ctx& c) {
    CallableDynamics<double, Tensor<double> (*)(const Tensor<double>&, double)> dyn(
        +[](const Tensor<double>& h, double) { return h.clone(); });
    auto err = [&](OdeMethod m, int steps) {
        SolverConfig<double> cfg;
        cfg.method = m;
        cfg.steps = steps;
        auto [y, st] = odesolve(Tensor<double>::full({1}, 1.0), dyn, cfg);
        return std::abs(y.item() - std::exp(1.0));
    };
    const double p_euler = std::log2(err(OdeMethod::euler, 16) / err(OdeMethod::euler, 32));
    const double p_rk4 = std::log2(err(OdeMethod::rk4, 16) / err(OdeMethod::rk4, 32));
    bool ok = std::abs(p_euler - 1.0) <= 0.2 && std::abs(p_rk4 - 4.0) <= 0.2;
    c.detail << "orders euler=" << std::fixed << std::setprecision(3) << p_euler << " rk4=" << p_rk4;

    for (double rtol : {1e-3, 1e-6, 1e-9}) {
        SolverConfig<double> cfg;
        cfg.method = OdeMethod::dopri5;
        cfg.rtol = rtol;
        cfg.atol = rtol * 1e-3;
        auto [y, st] = odesolve(Tensor<double>::full({1}, 1.0), dyn, cfg);
        const double e = std::abs(y.item() - std::exp(1.0));
        ok = ok && e <= 100 * rtol;
        c.detail << " dopri5(" << std::scientific << rtol << ")=" << e;
    }
    return ok;
}

// -------------------------------------------------------------------- 5 ---

bool criterion5_euler_resnet_identity(Ctx& c) {
    testutil::TinyModelOpts o;
    o.stages = 1;
    o.channels = 8;
    o.input_hw = 8;
    o.method = "euler";
    o.steps = 1;
    Rng rng(45);
    auto model = VnodeModel<double>::build(testutil::tiny_model_config(o), rng);
    auto& st = model.stages()[0];
    Tensor<double> x = uniform_tensor<double>({2, 3, 8, 8}, rng, -1, 1);
    Tensor<double> s = volterra_forward_lowrank(x, st.discrete.layer);
    VolterraDynamics<double> dyn(st.dynamics, st.time_injection);
    auto [xm, stats] = odesolve(s, dyn, st.solver);
    Tensor<double> resid = s.clone();
    ops::axpy_into(resid, 1.0, dyn.eval(s, 0.0));
    const bool ok = tensors_equal(xm, resid);
    c.detail << (ok ? "bit-for-bit equal" : "MISMATCH");
    return ok;
}

// -------------------------------------------------------------------- 8 ---

bool criterion8_accounting(Ctx& c) {
    auto cfg = Config::parse_file(std::string(VNODE_SOURCE_DIR) + "/configs/cifar_m1_paper.cfg");
    Rng rng(46);
    auto model = VnodeModel<double>::build(cfg, rng);
    const std::int64_t params = model.count_params();
    const std::int64_t flops = model.count_flops();

    // independent closed-form tally for this exact configuration:
    //   stem 3->64, 3x3, stride 2 (32x32 -> 16x16), avgpool 2 -> 8x8, Q=4
    //   dynamics 64ch, 3x3, groups 2, Q=4, rk4 8 steps (32 evaluations)
    //   pooled head 64 -> 10
    const std::int64_t stem_params = 9 * (64 * 3 * 3 * 3) + 64;        // (1+2Q) kernels + bias
    const std::int64_t dyn_params = 9 * (64 * 32 * 3 * 3) + 64;
    const std::int64_t head_params = 10 * 64 + 10;
    const std::int64_t want_params = stem_params + dyn_params + head_params;

    const std::int64_t stem_flops = 9 * 2 * (16 * 16 * 64 * 27) + 4 * (64 * 16 * 16);
    const std::int64_t dyn_eval = 9 * 2 * (8 * 8 * 64 * (32 * 9)) + 4 * (64 * 8 * 8);
    const std::int64_t want_flops = stem_flops + 32 * dyn_eval + 2 * 10 * 64;

    c.detail << params << " params (want " << want_params << "), " << flops << " flops (want " << want_flops
             << "), " << std::fixed << std::setprecision(4) << static_cast<double>(params) / 1e6 << "M / "
             << static_cast<double>(flops) / 1e9 << "G";
    bool ok = params == want_params && flops == want_flops;
    ok = ok && params >= 100000 && params <= 2000000;
    ok = ok && flops >= 20000000 && flops <= 1000000000;
    return ok;
}

// -------------------------------------------------------------------- 6 ---

bool criterion6_memorization(Ctx& c) {
    using T = float;
    // first 8 records of the real CIFAR train split when available,
    // otherwise a synthetic stand-in of the same shape (noted in the output)
    Dataset<T> ds;
    const std::string cifar_dir = data_root() + "/cifar10";
    if (fs::exists(fs::path(cifar_dir) / "data_batch_1.bin")) {
        auto pair = load_cifar10<T>(cifar_dir);
        std::vector<std::int64_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
        auto batch = gather_batch(pair.train, idx);
        ds.images = batch.images;
        ds.labels = batch.labels;
        c.detail << "real CIFAR-10 subset; ";
    } else {
        ds = testutil::synthetic_dataset<T>(8, 10, 3, 32, 4242, "train");
        c.detail << "synthetic CIFAR-shaped subset (real data not present); ";
    }
    ds.num_classes = 10;
    compute_norm_stats(ds);
    Tensor<T> imgs = normalize_images(ds.images, ds.norm_mean, ds.norm_std);

    testutil::TinyModelOpts o;
    o.stages = 2;
    o.channels = 32;
    o.input_c = 3;
    o.input_hw = 32;
    o.stride1 = 2;
    o.rank = 2;
    o.steps = 2;
    o.pool_head = false; // flatten heads fit the 8 samples within the step budget
    Rng rng(4243);
    auto model = VnodeModel<T>::build(testutil::tiny_model_config(o), rng);

    TrainRunConfig cfg;
    cfg.batch = 8;
    cfg.epochs = 1;
    cfg.hyper.lr = 1e-3;
    cfg.grad_mode = GradMode::adjoint;
    cfg.out_dir = "runs/acceptance_memorize";
    Optimizer<T> opt(OptimizerKind::adam, cfg.hyper);

    double loss = 1e9;
    int steps = 0;
    while (steps < 500) {
        auto res = train_step(model, opt, imgs, ds.labels, cfg, cfg.hyper.lr, 1, steps);
        loss = res.total;
        ++steps;
        if (loss < 0.01) break;
    }
    auto ev = evaluate(model, ds, 8, ds.norm_mean, ds.norm_std);
    c.detail << "loss " << std::setprecision(5) << loss << " after " << steps << " steps, train acc "
             << ev.accuracy;
    return loss < 0.01 && ev.accuracy == 1.0;
}

// -------------------------------------------------------------------- 9 ---

bool criterion9_determinism_persistence(Ctx& c) {
    using T = float;
    auto train_ds = testutil::synthetic_dataset<T>(64, 10, 3, 16, 91, "train");
    auto test_ds = testutil::synthetic_dataset<T>(32, 10, 3, 16, 92, "test");

    testutil::TinyModelOpts o;
    o.stages = 2;
    o.channels = 8;
    o.input_c = 3;
    o.input_hw = 16;
    o.steps = 2;
    o.rank = 1;

    auto make_cfg = [&](const std::string& out, std::int64_t epochs) {
        TrainRunConfig cfg;
        cfg.batch = 16;
        cfg.epochs = epochs;
        cfg.seed = 7;
        cfg.augment = true;
        cfg.out_dir = out;
        cfg.log_timing = false; // wall-clock seconds are the one non-reproducible column
        cfg.eval_batch = 32;
        return cfg;
    };
    auto slurp = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };

    auto run = [&](const std::string& out) {
        Rng rng(7);
        auto model = VnodeModel<T>::build(testutil::tiny_model_config(o), rng);
        auto cfg = make_cfg(out, 3);
        Dataset<T> tr = train_ds;
        Optimizer<T> opt(cfg.optimizer, cfg.hyper);
        return train_loop(model, tr, test_ds, cfg, rng, opt);
    };
    auto r1 = run("runs/acceptance_det_a");
    auto r2 = run("runs/acceptance_det_b");
    const bool csv_identical = slurp(r1.metrics_path) == slurp(r2.metrics_path);

    // interrupted at epoch 2, resumed to epoch 3
    Rng rng(7);
    auto model = VnodeModel<T>::build(testutil::tiny_model_config(o), rng);
    auto cfg2 = make_cfg("runs/acceptance_det_c", 2);
    Dataset<T> tr = train_ds;
    Optimizer<T> opt(cfg2.optimizer, cfg2.hyper);
    auto part = train_loop(model, tr, test_ds, cfg2, rng, opt);

    auto loaded = checkpoint_load<T>(part.final_checkpoint);
    Rng rng_resume(0);
    rng_resume.deserialize(loaded.train->rng_state);
    Optimizer<T> opt2(cfg2.optimizer, cfg2.hyper);
    opt2.restore(loaded.model.parameters(), loaded.train->opt_tensors, loaded.train->step);
    auto cfg3 = make_cfg("runs/acceptance_det_c", 3);
    Dataset<T> tr2 = train_ds;
    tr2.norm_mean = loaded.train->norm_mean;
    tr2.norm_std = loaded.train->norm_std;
    auto resumed = train_loop(loaded.model, tr2, test_ds, cfg3, rng_resume, opt2, loaded.train->epoch_next);

    const bool resume_matches =
        metrics_csv_row(r1.records.back()) == metrics_csv_row(resumed.records.back());
    c.detail << "metrics byte-identical: " << (csv_identical ? "yes" : "NO")
             << "; resumed final row matches: " << (resume_matches ? "yes" : "NO");
    for (const char* d : {"runs/acceptance_det_a", "runs/acceptance_det_b", "runs/acceptance_det_c"})
        fs::remove_all(d);
    return csv_identical && resume_matches;
}

// -------------------------------------------------------------------- 7 ---

struct DeskRun {
    double test_acc = 0;
    bool ran = false;
    std::string note;
};

DeskRun desk_train(const std::string& config_path, const std::string& dataset_dir, bool linear_ablation,
                   const std::string& out_dir) {
    using T = float;
    DeskRun out;
    auto cfg = Config::parse_file(config_path);
    auto tcfg = train_config_from(cfg);
    tcfg.out_dir = out_dir;
    tcfg.linear_ablation = linear_ablation;
    kernels::set_threads(tcfg.threads);

    DatasetPair<T> data;
    if (tcfg.dataset == "mnist")
        data = load_mnist<T>(dataset_dir);
    else
        data = load_cifar10<T>(dataset_dir);
    if (tcfg.subset_per_class > 0) data.train = subset_per_class(data.train, tcfg.subset_per_class);

    Rng rng(tcfg.seed);
    auto model = VnodeModel<T>::build(cfg, rng);
    if (linear_ablation) model.zero_quadratic();
    compute_norm_stats(data.train);
    Optimizer<T> opt(tcfg.optimizer, tcfg.hyper);
    auto res = train_loop(model, data.train, data.test, tcfg, rng, opt, 0, &std::cout);
    out.test_acc = res.records.back().test_acc;
    out.ran = true;
    return out;
}

bool criterion7_desk_scale(Ctx& c) {
    const std::string root = data_root();
    bool ok = true;

    const std::string mnist_dir = root + "/mnist";
    if (fs::exists(fs::path(mnist_dir) / "train-images-idx3-ubyte")) {
        auto run = desk_train(std::string(VNODE_SOURCE_DIR) + "/configs/mnist_m2_desk.cfg", mnist_dir, false,
                              "runs/acceptance_mnist");
        c.detail << "mnist acc " << std::fixed << std::setprecision(4) << run.test_acc;
        ok = ok && run.test_acc >= 0.97;
    } else {
        c.detail << "mnist: dataset not found under " << mnist_dir << " -> FAIL";
        ok = false;
    }

    const std::string cifar_dir = root + "/cifar10";
    if (fs::exists(fs::path(cifar_dir) / "data_batch_1.bin")) {
        auto full = desk_train(std::string(VNODE_SOURCE_DIR) + "/configs/cifar_m3_desk.cfg", cifar_dir, false,
                               "runs/acceptance_cifar");
        auto linear = desk_train(std::string(VNODE_SOURCE_DIR) + "/configs/cifar_m3_desk.cfg", cifar_dir, true,
                                 "runs/acceptance_cifar_linear");
        c.detail << "; cifar acc " << full.test_acc << " vs linear ablation " << linear.test_acc;
        ok = ok && full.test_acc >= 0.65 && full.test_acc > linear.test_acc;
    } else {
        c.detail << "; cifar10: dataset not found under " << cifar_dir << " -> FAIL";
        ok = false;
    }
    return ok;
}

// ------------------------------------------------------------------ main ---

struct Criterion {
    int id;
    const char* label;
    std::function<bool(Ctx&)> fn;
};

} // namespace

int main(int argc, char** argv) {
    std::string group = "all";
    if (argc > 1) group = argv[1];

    std::vector<Criterion> fast = {
        {1, "gradient soundness (adjoint vs finite differences, tiny VNODE)", criterion1_gradient_soundness},
        {2, "adjoint gradients match unrolled backprop", criterion2_adjoint_equals_unrolled},
        {3, "low-rank Volterra matches the full second-order oracle", criterion3_volterra_oracle},
        {4, "solver convergence orders and adaptive tolerance", criterion4_solver_convergence},
        {5, "one Euler step equals the residual update", criterion5_euler_resnet_identity},
        {8, "parameter/FLOP accounting on the M=1 CIFAR configuration", criterion8_accounting},
    };
    std::vector<Criterion> train = {
        {6, "8-sample memorization", criterion6_memorization},
        {9, "determinism and checkpoint persistence", criterion9_determinism_persistence},
    };
    std::vector<Criterion> full = {
        {7, "desk-scale learning signal (MNIST + CIFAR-10 vs linear ablation)", criterion7_desk_scale},
    };

    std::vector<Criterion> selected;
    if (group == "--fast")
        selected = fast;
    else if (group == "--train")
        selected = train;
    else if (group == "--full")
        selected = full;
    else {
        selected = fast;
        selected.insert(selected.end(), train.begin(), train.end());
        selected.insert(selected.end(), full.begin(), full.end());
    }

    int failures = 0;
    for (auto& cr : selected) {
        Ctx ctx;
        const auto t0 = std::chrono::steady_clock::now();
        bool ok = false;
        try {
            ok = cr.fn(ctx);
        } catch (const std::exception& e) {
            ctx.detail << "exception: " << e.what();
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << (ok ? "[PASS]" : "[FAIL]") << " criterion " << cr.id << ": " << cr.label << " ("
                  << std::fixed << std::setprecision(1) << secs << "s) -- " << ctx.detail.str() << "\n";
        std::cout.flush();
        if (!ok) ++failures;
    }
    std::cout << (failures == 0 ? "all selected criteria passed" : std::to_string(failures) + " criterion(s) failed")
              << "\n";
    return failures;
}
