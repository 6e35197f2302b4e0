#pragma once

// Shared fixtures for the model/trainer/acceptance tests.

#include <sstream>
#include <string>

#include "vnode/config.hpp"
#include "vnode/data.hpp"

namespace vnode::testutil {

struct TinyModelOpts {
    int stages = 2;
    int channels = 8;
    int input_c = 3;
    int input_hw = 8;
    int classes = 10;
    int kernel = 3;
    int stride1 = 1;       // stage-1 discrete stride
    int rank = 1;
    int dyn_groups = 0;    // 0 = depthwise (groups = channels)
    int disc_groups = 1;
    std::string method = "rk4";
    int steps = 8;
    bool time_injection = true;
    bool pool_head = true;
};

inline std::string tiny_model_text(const TinyModelOpts& o) {
    std::ostringstream s;
    s << "[model]\n";
    s << "classes = " << o.classes << "\n";
    s << "input = " << o.input_c << "x" << o.input_hw << "x" << o.input_hw << "\n";
    s << "stages = " << o.stages << "\n";
    if (!o.pool_head) s << "pool_head = false\n";
    for (int m = 1; m <= o.stages; ++m) {
        s << "[model.stage" << m << ".discrete]\n";
        s << "out = " << o.channels << "\n";
        s << "kernel = " << o.kernel << "\n";
        s << "stride = " << (m == 1 ? o.stride1 : 2) << "\n";
        s << "rank = " << o.rank << "\n";
        if (m > 1 && o.disc_groups > 1) s << "groups = " << o.disc_groups << "\n";
        s << "[model.stage" << m << ".dynamics]\n";
        s << "kernel = 3\n";
        s << "groups = " << (o.dyn_groups == 0 ? o.channels : o.dyn_groups) << "\n";
        s << "rank = " << o.rank << "\n";
        s << "[model.stage" << m << "]\n";
        s << "time_injection = " << (o.time_injection ? "true" : "false") << "\n";
        s << "[model.stage" << m << ".solver]\n";
        s << "method = " << o.method << "\n";
        s << "steps = " << o.steps << "\n";
    }
    return s.str();
}

inline Config tiny_model_config(const TinyModelOpts& o) {
    return Config::parse_string(tiny_model_text(o), "tiny_model");
}

// Balanced synthetic classification set in CIFAR layout: class-dependent
// blob pattern over broadband noise, deterministic in the seed. Background
// variance is kept CIFAR-like so per-channel normalization yields values in
// roughly [-3, 3] rather than long tails.
template <typename T>
Dataset<T> synthetic_dataset(std::int64_t n, int classes, std::int64_t c, std::int64_t hw, std::uint64_t seed,
                             const std::string& split) {
    Dataset<T> ds;
    ds.split = split;
    ds.num_classes = classes;
    ds.images = Tensor<T>(Shape{n, c, hw, hw});
    Rng rng(seed);
    for (std::int64_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % classes);
        ds.labels.push_back(label);
        // class signature: a bright patch whose position follows the label
        const std::int64_t py = (label / 4) * (hw / 3);
        const std::int64_t px = (label % 4) * (hw / 4);
        for (std::int64_t ch = 0; ch < c; ++ch) {
            T* img = ds.images.data() + (i * c + ch) * hw * hw;
            for (std::int64_t y = 0; y < hw; ++y)
                for (std::int64_t x = 0; x < hw; ++x) {
                    double v = 0.1 + 0.6 * rng.uniform();
                    if (std::abs(y - py) <= 1 && std::abs(x - px) <= 1) v += 0.3;
                    img[y * hw + x] = static_cast<T>(std::min(v, 1.0));
                }
        }
    }
    compute_norm_stats(ds);
    return ds;
}

} // namespace vnode::testutil
