#pragma once

// Multi-stage cross-entropy training. The objective is the stage-weighted
// sum over heads of the per-sample mean cross-entropy; gradients reach every
// parameter family (discrete filters, dynamics, heads) through one backward
// pass per batch, with the ODE blocks differentiated per the configured
// gradient mode.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "vnode/checkpoint.hpp"
#include "vnode/data.hpp"
#include "vnode/kernels.hpp"
#include "vnode/model.hpp"

namespace vnode {

// ---------------------------------------------------------------- losses ---

// mean cross-entropy of one stage head over a batch, on tape
template <typename T>
Var<T> stage_loss(Var<T> probs, const std::vector<std::int64_t>& labels) {
    return ad::reduce_all(ad::cross_entropy(probs, labels), ops::ReduceTag::mean);
}

// weighted sum over stages; weights default to all ones
template <typename T>
Var<T> total_loss(const std::vector<Var<T>>& stage_losses, const std::vector<double>& weights) {
    if (!weights.empty() && weights.size() != stage_losses.size())
        throw ConfigError("stage-loss weights: got " + std::to_string(weights.size()) + " for " +
                          std::to_string(stage_losses.size()) + " stages");
    Var<T> total;
    for (std::size_t m = 0; m < stage_losses.size(); ++m) {
        const double wm = weights.empty() ? 1.0 : weights[m];
        Var<T> term = ad::scalar_mul(stage_losses[m], static_cast<T>(wm));
        total = m == 0 ? term : ad::add(total, term);
    }
    return total;
}

// scalar convenience used by tests: cross-entropy of one probability vector
template <typename T>
T cross_entropy_value(const Tensor<T>& probs, std::int64_t label) {
    Tensor<T> p2 = probs.reshaped(Shape{1, probs.size()});
    return ops::cross_entropy(p2, {label}).item();
}

// ------------------------------------------------------------- optimizer ---

enum class OptimizerKind { adam, sgd_momentum };

inline OptimizerKind optimizer_from_name(const std::string& s) {
    if (s == "adam") return OptimizerKind::adam;
    if (s == "sgd" || s == "sgd-momentum") return OptimizerKind::sgd_momentum;
    throw ConfigError("unknown optimizer: " + s);
}

struct OptimizerHyper {
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8; // adam
    double momentum = 0.9;                          // sgd
    double weight_decay = 0.0;                      // L2, added to the gradient
};

template <typename T>
class Optimizer {
public:
    Optimizer(OptimizerKind kind, OptimizerHyper hyper) : kind_(kind), hyper_(hyper) {}

    // one update; grads aligned with params
    void step(std::vector<NamedParam<T>>& params, const std::vector<Tensor<T>>& grads, double lr) {
        if (slots_.empty()) init_slots(params);
        ++t_;
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor<T>& p = *params[i].tensor;
            const Tensor<T>& g0 = grads[i];
            Tensor<T> g = hyper_.weight_decay > 0
                              ? ops::add(g0, ops::scalar_mul(p, static_cast<T>(hyper_.weight_decay)))
                              : g0;
            if (kind_ == OptimizerKind::adam) {
                Tensor<T>& m = slots_[2 * i];
                Tensor<T>& v = slots_[2 * i + 1];
                const T b1 = static_cast<T>(hyper_.beta1), b2 = static_cast<T>(hyper_.beta2);
                const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
                const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
                for (std::int64_t k = 0; k < p.size(); ++k) {
                    const T gk = g.data()[k];
                    m.data()[k] = b1 * m.data()[k] + (T(1) - b1) * gk;
                    v.data()[k] = b2 * v.data()[k] + (T(1) - b2) * gk * gk;
                    const double mhat = static_cast<double>(m.data()[k]) / bc1;
                    const double vhat = static_cast<double>(v.data()[k]) / bc2;
                    p.data()[k] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + hyper_.eps));
                }
            } else {
                Tensor<T>& v = slots_[2 * i];
                const T mu = static_cast<T>(hyper_.momentum);
                for (std::int64_t k = 0; k < p.size(); ++k) {
                    v.data()[k] = mu * v.data()[k] + g.data()[k];
                    p.data()[k] -= static_cast<T>(lr) * v.data()[k];
                }
            }
        }
    }

    std::int64_t steps() const { return t_; }

    std::vector<std::pair<std::string, Tensor<T>>> serialize(const std::vector<NamedParam<T>>& params) const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        const char* tag0 = kind_ == OptimizerKind::adam ? "m." : "v.";
        for (std::size_t i = 0; i < params.size() && !slots_.empty(); ++i) {
            out.emplace_back(std::string("opt.") + tag0 + params[i].name, slots_[2 * i]);
            if (kind_ == OptimizerKind::adam) out.emplace_back("opt.v." + params[i].name, slots_[2 * i + 1]);
        }
        return out;
    }

    void restore(const std::vector<NamedParam<T>>& params,
                 const std::vector<std::pair<std::string, Tensor<T>>>& tensors, std::int64_t steps) {
        init_slots(params);
        t_ = steps;
        if (tensors.size() != slots_.size())
            throw CheckpointError("optimizer state has " + std::to_string(tensors.size()) + " tensors, expected " +
                                  std::to_string(slots_.size()));
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            if (!tensors[i].second.same_shape(slots_[i]))
                throw CheckpointError("optimizer tensor '" + tensors[i].first + "' has the wrong shape");
            slots_[i] = tensors[i].second.clone();
        }
    }

private:
    void init_slots(const std::vector<NamedParam<T>>& params) {
        slots_.clear();
        for (const auto& p : params) {
            slots_.push_back(Tensor<T>::zeros(p.tensor->shape()));
            slots_.push_back(Tensor<T>::zeros(p.tensor->shape())); // unused pair slot for sgd
        }
    }

    OptimizerKind kind_;
    OptimizerHyper hyper_;
    std::vector<Tensor<T>> slots_; // [m,v] per param (adam) or [v,_] (sgd)
    std::int64_t t_ = 0;
};

// ------------------------------------------------------------- schedules ---

enum class LrSchedule { constant, cosine, step };

inline LrSchedule schedule_from_name(const std::string& s) {
    if (s == "constant") return LrSchedule::constant;
    if (s == "cosine") return LrSchedule::cosine;
    if (s == "step") return LrSchedule::step;
    throw ConfigError("unknown LR schedule: " + s);
}

inline double scheduled_lr(LrSchedule sched, double base, std::int64_t epoch, std::int64_t total_epochs,
                           std::int64_t step_every = 10, double step_gamma = 0.1) {
    switch (sched) {
        case LrSchedule::constant: return base;
        case LrSchedule::cosine:
            return base * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(epoch) /
                                                std::max<std::int64_t>(total_epochs, 1)));
        case LrSchedule::step:
            return base * std::pow(step_gamma, static_cast<double>(epoch / std::max<std::int64_t>(step_every, 1)));
    }
    return base;
}

// ------------------------------------------------------------ run config ---

struct TrainRunConfig {
    std::string dataset;  // cifar10 | mnist
    std::string data_dir;
    std::int64_t batch = 128;
    std::int64_t epochs = 30;
    OptimizerKind optimizer = OptimizerKind::adam;
    OptimizerHyper hyper;
    LrSchedule schedule = LrSchedule::constant;
    std::int64_t lr_step_every = 10;
    double lr_step_gamma = 0.1;
    std::uint64_t seed = 42;
    GradMode grad_mode = GradMode::adjoint;
    std::vector<double> stage_weights; // empty = all ones
    std::string out_dir = "runs/out";
    std::int64_t checkpoint_every = 0; // epochs; 0 = final only
    bool augment = false;
    AugmentPolicy augment_policy;
    std::int64_t subset_per_class = 0; // 0 = full split
    int threads = 1;
    bool log_timing = true; // false writes 0.000 in the seconds column
    bool linear_ablation = false;
    std::int64_t eval_batch = 256;

    void validate(std::size_t stages) const {
        if (batch < 1) throw ConfigError("train.batch must be >= 1");
        if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
        if (hyper.lr <= 0) throw ConfigError("train.lr must be positive");
        if (!stage_weights.empty() && stage_weights.size() != stages)
            throw ConfigError("train.stage_weights must list one weight per stage");
    }
};

inline TrainRunConfig train_config_from(const Config& cfg) {
    TrainRunConfig t;
    t.dataset = cfg.get_str("train.dataset", "");
    t.data_dir = cfg.get_str("train.data_dir", "");
    t.batch = cfg.get_int("train.batch", 128);
    t.epochs = cfg.get_int("train.epochs", 30);
    t.optimizer = optimizer_from_name(cfg.get_str("train.optimizer", "adam"));
    t.hyper.lr = cfg.get_double("train.lr", 1e-3);
    t.hyper.beta1 = cfg.get_double("train.beta1", 0.9);
    t.hyper.beta2 = cfg.get_double("train.beta2", 0.999);
    t.hyper.eps = cfg.get_double("train.eps", 1e-8);
    t.hyper.momentum = cfg.get_double("train.momentum", 0.9);
    t.hyper.weight_decay = cfg.get_double("train.weight_decay", 0.0);
    t.schedule = schedule_from_name(cfg.get_str("train.schedule", "constant"));
    t.lr_step_every = cfg.get_int("train.lr_step_every", 10);
    t.lr_step_gamma = cfg.get_double("train.lr_step_gamma", 0.1);
    t.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", 42));
    t.grad_mode = grad_mode_from_name(cfg.get_str("train.grad_mode", "adjoint"));
    if (cfg.has("train.stage_weights")) t.stage_weights = cfg.get_list("train.stage_weights");
    t.out_dir = cfg.get_str("train.out_dir", "runs/out");
    t.checkpoint_every = cfg.get_int("train.checkpoint_every", 0);
    t.augment = cfg.get_bool("train.augment", false);
    t.augment_policy.crop_pad = static_cast<int>(cfg.get_int("train.crop_pad", 4));
    t.augment_policy.flip_prob = cfg.get_double("train.flip_prob", 0.5);
    t.subset_per_class = cfg.get_int("train.subset_per_class", 0);
    t.threads = static_cast<int>(cfg.get_int("train.threads", 1));
    t.log_timing = cfg.get_bool("train.log_timing", true);
    t.linear_ablation = cfg.get_bool("train.linear_ablation", false);
    t.eval_batch = cfg.get_int("train.eval_batch", 256);
    return t;
}

// --------------------------------------------------------------- metrics ---

struct MetricsRecord {
    std::int64_t epoch = 0;            // 1-based
    std::vector<double> stage_losses;  // training means over the epoch
    double total_loss = 0;
    double train_acc = 0;
    double test_acc = 0;
    std::int64_t fevals = 0; // dynamics evaluations per batch
    double seconds = 0;
};

inline std::string metrics_csv_header(std::size_t stages) {
    std::string h = "epoch";
    for (std::size_t m = 1; m <= stages; ++m) h += ",loss_s" + std::to_string(m);
    h += ",total_loss,train_acc,test_acc,fevals,seconds";
    return h;
}

inline std::string metrics_csv_row(const MetricsRecord& r) {
    std::ostringstream os;
    os << r.epoch;
    os << std::setprecision(10);
    for (double v : r.stage_losses) os << "," << v;
    os << "," << r.total_loss << "," << r.train_acc << "," << r.test_acc << "," << r.fevals << ","
       << std::fixed << std::setprecision(3) << r.seconds;
    return os.str();
}

// ------------------------------------------------------------ train step ---

template <typename T>
struct StepResult {
    std::vector<double> stage_losses;
    double total = 0;
    std::int64_t correct = 0; // final-stage argmax hits in this batch
    std::int64_t fevals = 0;
};

template <typename T>
std::int64_t argmax_row(const Tensor<T>& probs, std::int64_t row) {
    const std::int64_t c = probs.dim(1);
    const T* p = probs.data() + row * c;
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < c; ++j)
        if (p[j] > p[best]) best = j;
    return best;
}

// forward + backward + optimizer update on one normalized batch
template <typename T>
StepResult<T> train_step(VnodeModel<T>& model, Optimizer<T>& opt, const Tensor<T>& images,
                         const std::vector<std::int64_t>& labels, const TrainRunConfig& cfg, double lr,
                         std::int64_t epoch, std::int64_t batch_index) {
    Tape<T> tape;
    TapeForward<T> fwd;
    try {
        fwd = model.forward_on_tape(tape, images, cfg.grad_mode);
    } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(e.what()) + " (batch " + std::to_string(batch_index) + " of epoch " +
                              std::to_string(epoch) + ")");
    }
    std::vector<Var<T>> losses;
    StepResult<T> res;
    for (std::size_t m = 0; m < fwd.stage_probs.size(); ++m) {
        Var<T> lm = stage_loss(fwd.stage_probs[m], labels);
        const double v = static_cast<double>(tape.value(lm).item());
        if (!std::isfinite(v))
            throw DivergenceError("stage " + std::to_string(m + 1) + " loss is non-finite at batch " +
                                  std::to_string(batch_index) + " of epoch " + std::to_string(epoch));
        res.stage_losses.push_back(v);
        losses.push_back(lm);
    }
    Var<T> total = total_loss(losses, cfg.stage_weights);
    res.total = static_cast<double>(tape.value(total).item());
    res.fevals = fwd.fevals;

    const Tensor<T>& final_probs = tape.value(fwd.stage_probs.back());
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (argmax_row(final_probs, static_cast<std::int64_t>(i)) == labels[i]) ++res.correct;

    tape.backward(total);
    auto params = model.parameters();
    std::vector<Tensor<T>> grads;
    grads.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T> g = tape.grad(fwd.param_vars[i]);
        if (!g.all_finite())
            throw DivergenceError("gradient of " + params[i].name + " is non-finite at batch " +
                                  std::to_string(batch_index) + " of epoch " + std::to_string(epoch));
        grads.push_back(std::move(g));
    }
    opt.step(params, grads, lr);
    return res;
}

// -------------------------------------------------------------- evaluate ---

template <typename T>
struct EvalResult {
    double accuracy = 0;                 // final stage
    std::vector<double> stage_accuracy;  // all stages
    double mean_loss = 0;                // final-stage mean cross-entropy
};

template <typename T>
EvalResult<T> evaluate(const VnodeModel<T>& model, const Dataset<T>& ds, std::int64_t eval_batch,
                       const std::vector<double>& mean, const std::vector<double>& stdev) {
    if (ds.size() == 0) throw ContractError("evaluate: empty split");
    const std::int64_t n = ds.size();
    const int M = model.num_stages();
    std::vector<std::int64_t> hits(static_cast<std::size_t>(M), 0);
    double loss_sum = 0;
    for (std::int64_t b = 0; b < n; b += eval_batch) {
        std::vector<std::int64_t> idx;
        for (std::int64_t i = b; i < std::min(n, b + eval_batch); ++i) idx.push_back(i);
        auto batch = gather_batch(ds, idx);
        Tensor<T> norm = normalize_images(batch.images, mean, stdev);
        auto fwd = model.forward(norm);
        for (int m = 0; m < M; ++m) {
            const auto& probs = fwd.stage_probs[static_cast<std::size_t>(m)];
            for (std::size_t i = 0; i < idx.size(); ++i)
                if (argmax_row(probs, static_cast<std::int64_t>(i)) == batch.labels[i])
                    ++hits[static_cast<std::size_t>(m)];
        }
        loss_sum += static_cast<double>(
            ops::reduce_all(ops::cross_entropy(fwd.stage_probs.back(), batch.labels), ops::ReduceTag::sum).item());
    }
    EvalResult<T> out;
    for (int m = 0; m < M; ++m)
        out.stage_accuracy.push_back(static_cast<double>(hits[static_cast<std::size_t>(m)]) /
                                     static_cast<double>(n));
    out.accuracy = out.stage_accuracy.back();
    out.mean_loss = loss_sum / static_cast<double>(n);
    return out;
}

// ------------------------------------------------------------ train loop ---

template <typename T>
struct TrainResult {
    std::vector<MetricsRecord> records;
    std::string final_checkpoint;
    std::string metrics_path;
};

// Runs (or resumes) training of `model` on in-memory datasets. All
// randomness flows from `rng`, whose state is checkpointed, so save/resume
// reproduces the uninterrupted run exactly. Normalization stats must already
// be present on the training split.
template <typename T>
TrainResult<T> train_loop(VnodeModel<T>& model, Dataset<T>& train, const Dataset<T>& test,
                          const TrainRunConfig& cfg, Rng& rng, Optimizer<T>& opt, std::int64_t start_epoch = 0,
                          std::ostream* log = nullptr) {
    cfg.validate(static_cast<std::size_t>(model.num_stages()));
    kernels::set_threads(cfg.threads);
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    const std::string metrics_path = (fs::path(cfg.out_dir) / "metrics.csv").string();
    const std::string ckpt_path = (fs::path(cfg.out_dir) / "model.ckpt").string();

    std::ofstream csv;
    if (start_epoch == 0) {
        csv.open(metrics_path, std::ios::trunc);
        csv << "# seed=" << cfg.seed << " precision=" << (sizeof(T) == 4 ? "f32" : "f64")
            << " kernels=" << kernels::level_name(kernels::active_level()) << " threads=" << cfg.threads
            << " grad_mode=" << (cfg.grad_mode == GradMode::adjoint ? "adjoint" : "unrolled") << "\n";
        csv << metrics_csv_header(static_cast<std::size_t>(model.num_stages())) << "\n";
    } else {
        csv.open(metrics_path, std::ios::app);
    }
    if (!csv) throw ConfigError("cannot open metrics file: " + metrics_path);

    TrainResult<T> out;
    out.metrics_path = metrics_path;

    auto save_state = [&](std::int64_t epoch_next) {
        TrainState<T> ts;
        ts.epoch_next = epoch_next;
        ts.step = opt.steps();
        ts.rng_state = rng.serialize();
        ts.norm_mean = train.norm_mean;
        ts.norm_std = train.norm_std;
        ts.opt_tensors = opt.serialize(model.parameters());
        checkpoint_save(ckpt_path, model, &ts);
    };

    for (std::int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const auto t_start = std::chrono::steady_clock::now();
        const double lr = scheduled_lr(cfg.schedule, cfg.hyper.lr, epoch, cfg.epochs, cfg.lr_step_every,
                                       cfg.lr_step_gamma);
        auto batches = epoch_batches(train.size(), cfg.batch, rng);
        std::vector<double> loss_acc(static_cast<std::size_t>(model.num_stages()), 0.0);
        double total_acc = 0;
        std::int64_t correct = 0, seen = 0, fevals = 0;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            auto batch = gather_batch(train, batches[b]);
            Tensor<T> imgs = cfg.augment ? augment_batch(batch.images, cfg.augment_policy, rng) : batch.images;
            imgs = normalize_images(imgs, train.norm_mean, train.norm_std);
            auto res = train_step(model, opt, imgs, batch.labels, cfg, lr, epoch + 1,
                                  static_cast<std::int64_t>(b));
            for (std::size_t m = 0; m < loss_acc.size(); ++m)
                loss_acc[m] += res.stage_losses[m] * static_cast<double>(batch.labels.size());
            total_acc += res.total * static_cast<double>(batch.labels.size());
            correct += res.correct;
            seen += static_cast<std::int64_t>(batch.labels.size());
            fevals = res.fevals;
        }

        MetricsRecord rec;
        rec.epoch = epoch + 1;
        for (double v : loss_acc) rec.stage_losses.push_back(v / static_cast<double>(seen));
        rec.total_loss = total_acc / static_cast<double>(seen);
        rec.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
        auto ev = evaluate(model, test, cfg.eval_batch, train.norm_mean, train.norm_std);
        rec.test_acc = ev.accuracy;
        rec.fevals = fevals;
        const auto t_end = std::chrono::steady_clock::now();
        rec.seconds = cfg.log_timing ? std::chrono::duration<double>(t_end - t_start).count() : 0.0;
        csv << metrics_csv_row(rec) << "\n";
        csv.flush();
        out.records.push_back(rec);
        if (log)
            (*log) << "epoch " << rec.epoch << "/" << cfg.epochs << "  loss " << std::setprecision(6)
                   << rec.total_loss << "  train_acc " << rec.train_acc << "  test_acc " << rec.test_acc
                   << "  (" << std::setprecision(3) << rec.seconds << "s)\n";

        if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs)
            save_state(epoch + 1);
    }
    save_state(cfg.epochs);
    out.final_checkpoint = ckpt_path;
    return out;
}

} // namespace vnode
