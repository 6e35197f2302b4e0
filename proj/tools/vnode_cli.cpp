// vnode: train / eval / gradcheck / flops / inspect for piecewise-continuous
// Volterra ODE models.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
// divergence, 5 verification failure (gradcheck threshold or checkpoint
// integrity).

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "vnode/checkpoint.hpp"
#include "vnode/data.hpp"
#include "vnode/gradcheck.hpp"
#include "vnode/model.hpp"
#include "vnode/trainer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitVerify = 5;

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides; // dot.path=value
    std::string data_dir;
    std::string out_dir;
    std::string checkpoint;
    std::int64_t seed = -1;
    std::string precision; // f32 | f64 | "" (config/default)
    bool resume = false;
    bool corrupt_vjp = false; // hidden test hook
};

vnode::Config load_config(const CommonArgs& a, bool required) {
    vnode::Config cfg;
    if (!a.config_path.empty())
        cfg = vnode::Config::parse_file(a.config_path);
    else if (required)
        throw vnode::ConfigError("--config is required for this command");
    for (const auto& ov : a.overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos)
            throw vnode::ConfigError("--set expects dot.path=value, got '" + ov + "'");
        cfg.set(ov.substr(0, eq), ov.substr(eq + 1));
    }
    if (!a.data_dir.empty()) cfg.set("train.data_dir", a.data_dir);
    if (!a.out_dir.empty()) cfg.set("train.out_dir", a.out_dir);
    if (a.seed >= 0) cfg.set("train.seed", std::to_string(a.seed));
    return cfg;
}

std::string resolve_precision(const CommonArgs& a, const vnode::Config& cfg, const std::string& fallback) {
    std::string p = !a.precision.empty() ? a.precision : cfg.get_str("train.precision", fallback);
    if (p != "f32" && p != "f64") throw vnode::ConfigError("precision must be f32 or f64, got " + p);
    return p;
}

std::string resolve_data_dir(const vnode::Config& cfg, const std::string& dataset) {
    std::string dir = cfg.get_str("train.data_dir", "");
    if (dir.empty()) {
        if (const char* env = std::getenv("VNODE_DATA_DIR"))
            dir = std::string(env) + "/" + dataset;
        else
            throw vnode::DataError("no dataset directory: set train.data_dir, --data-dir, or VNODE_DATA_DIR");
    }
    return dir;
}

void reject_unknown_keys(const vnode::Config& cfg) {
    const auto leftover = cfg.unconsumed();
    if (!leftover.empty()) {
        std::string msg = "unknown config keys:";
        for (const auto& k : leftover) msg += " " + k;
        throw vnode::ConfigError(msg);
    }
}

template <typename T>
vnode::DatasetPair<T> load_dataset(const std::string& name, const std::string& dir) {
    if (name == "cifar10") return vnode::load_cifar10<T>(dir);
    if (name == "mnist") return vnode::load_mnist<T>(dir);
    throw vnode::ConfigError("unknown dataset '" + name + "' (expected cifar10 or mnist)");
}

// ------------------------------------------------------------------ train ---

template <typename T>
int run_train(const CommonArgs& args) {
    vnode::Config cfg = load_config(args, true);
    auto tcfg = vnode::train_config_from(cfg);
    if (tcfg.dataset.empty()) throw vnode::ConfigError("train.dataset is required (cifar10 or mnist)");
    const std::string dir = resolve_data_dir(cfg, tcfg.dataset);
    vnode::kernels::set_threads(tcfg.threads);

    vnode::Rng rng(tcfg.seed);
    std::int64_t start_epoch = 0;
    vnode::Optimizer<T> opt(tcfg.optimizer, tcfg.hyper);
    std::optional<vnode::TrainState<T>> resumed_state;

    std::unique_ptr<vnode::VnodeModel<T>> model;
    if (args.resume) {
        const std::string ckpt = !args.checkpoint.empty()
                                     ? args.checkpoint
                                     : (std::filesystem::path(tcfg.out_dir) / "model.ckpt").string();
        auto loaded = vnode::checkpoint_load<T>(ckpt);
        if (!loaded.train) throw vnode::CheckpointError("checkpoint has no training state to resume from");
        model = std::make_unique<vnode::VnodeModel<T>>(std::move(loaded.model));
        rng.deserialize(loaded.train->rng_state);
        start_epoch = loaded.train->epoch_next;
        opt.restore(model->parameters(), loaded.train->opt_tensors, loaded.train->step);
        resumed_state = std::move(loaded.train);
        // consume the model keys; the checkpoint's architecture wins
        for (const auto& k : cfg.keys_with_prefix("model.")) cfg.mark_consumed(k);
        std::cout << "resuming from " << ckpt << " at epoch " << (start_epoch + 1) << "\n";
    } else {
        model = std::make_unique<vnode::VnodeModel<T>>(vnode::VnodeModel<T>::build(cfg, rng));
        if (tcfg.linear_ablation) model->zero_quadratic();
    }
    reject_unknown_keys(cfg);

    if (start_epoch >= tcfg.epochs)
        throw vnode::ConfigError("checkpoint is already at epoch " + std::to_string(start_epoch) +
                                 "; nothing to train (train.epochs = " + std::to_string(tcfg.epochs) + ")");

    auto data = load_dataset<T>(tcfg.dataset, dir);
    if (tcfg.subset_per_class > 0) data.train = vnode::subset_per_class(data.train, tcfg.subset_per_class);
    if (resumed_state) {
        data.train.norm_mean = resumed_state->norm_mean;
        data.train.norm_std = resumed_state->norm_std;
    } else {
        vnode::compute_norm_stats(data.train);
    }

    auto result = vnode::train_loop(*model, data.train, data.test, tcfg, rng, opt, start_epoch, &std::cout);
    std::cout << "metrics: " << result.metrics_path << "\ncheckpoint: " << result.final_checkpoint << "\n";
    return kExitOk;
}

// ------------------------------------------------------------------- eval ---

template <typename T>
int run_eval(const CommonArgs& args) {
    if (args.checkpoint.empty()) throw vnode::ConfigError("eval requires --checkpoint");
    vnode::Config cfg = load_config(args, false);
    auto loaded = vnode::checkpoint_load<T>(args.checkpoint);

    const std::string dataset = cfg.get_str("train.dataset", "");
    if (dataset.empty()) throw vnode::ConfigError("eval requires train.dataset (via --config or --set)");
    const std::string dir = resolve_data_dir(cfg, dataset);
    vnode::kernels::set_threads(static_cast<int>(cfg.get_int("train.threads", 1)));
    auto data = load_dataset<T>(dataset, dir);

    std::vector<double> mean, stdev;
    if (loaded.train && !loaded.train->norm_mean.empty()) {
        mean = loaded.train->norm_mean;
        stdev = loaded.train->norm_std;
    } else {
        vnode::compute_norm_stats(data.train);
        mean = data.train.norm_mean;
        stdev = data.train.norm_std;
    }

    const auto ev = vnode::evaluate(loaded.model, data.test, cfg.get_int("train.eval_batch", 256), mean, stdev);
    std::cout << std::fixed << std::setprecision(4);
    for (std::size_t m = 0; m < ev.stage_accuracy.size(); ++m)
        std::cout << "stage " << (m + 1) << " accuracy: " << ev.stage_accuracy[m] << "\n";
    std::cout << "final accuracy: " << ev.accuracy << "\nmean loss: " << ev.mean_loss << "\n";
    return kExitOk;
}

// -------------------------------------------------------------- gradcheck ---

int run_gradcheck(const CommonArgs& args) {
    using T = double;
    vnode::Config cfg = load_config(args, true);
    if (args.corrupt_vjp) vnode::testhook::conv_kernel_vjp_scale = 1.01;

    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", 42));
    vnode::Rng rng(seed);
    auto model = vnode::VnodeModel<T>::build(cfg, rng);
    const std::int64_t batch = cfg.get_int("gradcheck.batch", 2);
    const double eps = cfg.get_double("gradcheck.epsilon", 1e-4);
    const double threshold = cfg.get_double("gradcheck.threshold", 1e-4);
    cfg.get_str("train.dataset", "");
    cfg.get_str("train.data_dir", "");
    reject_unknown_keys(cfg);

    const auto& in = model.input_shape();
    vnode::Tensor<T> x = vnode::uniform_tensor<T>({batch, in[0], in[1], in[2]}, rng, -1.0, 1.0);
    std::vector<std::int64_t> labels;
    for (std::int64_t i = 0; i < batch; ++i)
        labels.push_back(static_cast<std::int64_t>(rng.integer(static_cast<std::uint64_t>(model.num_classes()))));

    const auto report = vnode::gradcheck_model(model, x, labels, eps);
    std::cout << "gradcheck: " << report.total_params << " parameters, batch " << batch << ", eps " << eps << "\n";

    bool ok = true;
    std::cout << std::scientific << std::setprecision(3);
    for (auto fam : {vnode::ParamFamily::discrete_filter, vnode::ParamFamily::dynamics, vnode::ParamFamily::head}) {
        const auto it = report.families.find(fam);
        if (it == report.families.end()) continue;
        const bool pass = it->second.max_fd_err < threshold;
        ok = ok && pass;
        std::cout << vnode::family_label(fam) << ": max rel err vs finite differences " << it->second.max_fd_err
                  << " (adjoint vs unrolled " << it->second.max_unrolled_err << ") " << (pass ? "[ok]" : "[FAIL]")
                  << "\n";
    }
    std::cout << "threshold " << threshold << (ok ? ": all parameter families pass\n" : ": FAILED\n");
    return ok ? kExitOk : kExitVerify;
}

// ------------------------------------------------------------------ flops ---

template <typename T>
int run_flops(const CommonArgs& args) {
    vnode::Config cfg = load_config(args, true);
    vnode::Rng rng(0);
    auto model = vnode::VnodeModel<T>::build(cfg, rng);
    cfg.get_str("train.dataset", "");
    cfg.get_str("train.data_dir", "");

    std::ostringstream csv;
    csv << "stage,params,flops,fevals\n";
    std::cout << std::left << std::setw(8) << "stage" << std::right << std::setw(14) << "params" << std::setw(18)
              << "flops" << std::setw(10) << "fevals" << "\n";
    std::int64_t params_total = 0;
    auto params = model.parameters();
    for (int m = 0; m < model.num_stages(); ++m) {
        const auto& st = model.stages()[static_cast<std::size_t>(m)];
        std::int64_t p = 0;
        const std::string prefix = "stage" + std::to_string(m + 1) + ".";
        for (auto& np : params)
            if (np.name.rfind(prefix, 0) == 0) p += np.tensor->size();
        const std::int64_t f = model.stage_flops(st);
        const std::int64_t fe = st.solver.nominal_fevals();
        params_total += p;
        std::cout << std::left << std::setw(8) << (m + 1) << std::right << std::setw(14) << p << std::setw(18) << f
                  << std::setw(10) << fe << "\n";
        csv << (m + 1) << "," << p << "," << f << "," << fe << "\n";
    }
    const std::int64_t flops_total = model.count_flops();
    std::cout << std::left << std::setw(8) << "total" << std::right << std::setw(14) << params_total << std::setw(18)
              << flops_total << "\n";
    std::cout << "total: " << std::fixed << std::setprecision(4) << static_cast<double>(params_total) / 1e6
              << " M params, " << static_cast<double>(flops_total) / 1e9 << " GFLOPs per forward\n";
    csv << "total," << params_total << "," << flops_total << ",\n";

    if (!args.out_dir.empty()) {
        std::filesystem::create_directories(args.out_dir);
        const std::string path = (std::filesystem::path(args.out_dir) / "flops.csv").string();
        std::ofstream f(path, std::ios::trunc);
        f << csv.str();
        std::cout << "wrote " << path << "\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------- inspect ---

template <typename T>
int run_inspect(const CommonArgs& args) {
    if (args.checkpoint.empty()) throw vnode::ConfigError("inspect requires --checkpoint");
    auto loaded = vnode::checkpoint_load<T>(args.checkpoint);
    auto& model = loaded.model;
    std::cout << "architecture (" << (sizeof(T) == 4 ? "f32" : "f64") << "):\n";
    std::cout << "  input " << vnode::shape_str(model.input_shape()) << ", " << model.num_classes()
              << " classes, " << model.num_stages() << " stage(s)\n";
    for (int m = 0; m < model.num_stages(); ++m) {
        const auto& st = model.stages()[static_cast<std::size_t>(m)];
        std::cout << "  stage " << (m + 1) << ": t in [" << st.solver.t0 << ", " << st.solver.t1 << "], "
                  << "state " << st.c << "x" << st.h << "x" << st.w << ", solver "
                  << vnode::method_name(st.solver.method);
        if (st.solver.fixed_step()) std::cout << "(" << st.solver.steps << ")";
        std::cout << (st.time_injection ? ", time injection" : "") << "\n";
    }
    std::cout << "parameters:\n";
    std::int64_t total = 0;
    for (auto& p : model.parameters()) {
        std::cout << "  " << p.name << " " << vnode::shape_str(p.tensor->shape()) << "\n";
        total += p.tensor->size();
    }
    std::cout << "total " << total << " parameters\n";
    if (loaded.train)
        std::cout << "training state: " << loaded.train->epoch_next << " epochs done, " << loaded.train->step
                  << " optimizer steps\n";
    return kExitOk;
}

// ------------------------------------------------------------------- main ---

int dispatch(const std::string& cmd, const CommonArgs& args) {
    std::string precision = "f32";
    {
        vnode::Config cfg = load_config(args, false);
        precision = resolve_precision(args, cfg, "f32");
    }
    if (cmd == "gradcheck") {
        if (!args.precision.empty() && args.precision != "f64")
            throw vnode::ConfigError("gradcheck runs in f64 only");
        return run_gradcheck(args);
    }
    const bool f64 = precision == "f64";
    if (cmd == "train") return f64 ? run_train<double>(args) : run_train<float>(args);
    if (cmd == "eval") return f64 ? run_eval<double>(args) : run_eval<float>(args);
    if (cmd == "flops") return f64 ? run_flops<double>(args) : run_flops<float>(args);
    if (cmd == "inspect") return f64 ? run_inspect<double>(args) : run_inspect<float>(args);
    throw vnode::ConfigError("unknown command: " + cmd);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"piecewise-continuous Volterra ODE networks"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string cmd;
    for (const auto& name : {"train", "eval", "gradcheck", "flops", "inspect"}) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", args.config_path, "configuration file");
        sub->add_option("--set", args.overrides, "override: dot.path=value")->take_all();
        sub->add_option("--data-dir", args.data_dir, "dataset directory");
        sub->add_option("--out-dir", args.out_dir, "output directory");
        sub->add_option("--checkpoint", args.checkpoint, "checkpoint path");
        sub->add_option("--seed", args.seed, "RNG seed override");
        sub->add_option("--precision", args.precision, "f32 or f64");
        if (std::string(name) == "train") sub->add_flag("--resume", args.resume, "resume from checkpoint");
        if (std::string(name) == "gradcheck")
            sub->add_flag("--test-corrupt-vjp", args.corrupt_vjp)->group(""); // hidden negative-control hook
        sub->callback([&cmd, name] { cmd = name; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        app.exit(e);
        return kExitConfig;
    }

    try {
        return dispatch(cmd, args);
    } catch (const vnode::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const vnode::DivergenceError& e) {
        std::cerr << "numerical divergence: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const vnode::ConvergenceError& e) {
        std::cerr << "solver failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const vnode::CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kExitVerify;
    } catch (const vnode::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
}
