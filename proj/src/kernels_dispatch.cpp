#include "vnode/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>
#include <thread>
#include <vector>

#include "vnode/errors.hpp"

namespace vnode::kernels {

namespace {

IsaLevel resolve_initial() {
    if (const char* env = std::getenv("VNODE_KERNELS")) {
        if (std::strcmp(env, "scalar") == 0) return IsaLevel::scalar;
        if (std::strcmp(env, "avx2") == 0) {
            if (!cpu_has_avx2())
                throw ConfigError("VNODE_KERNELS=avx2 requested but the CPU does not support AVX2+FMA");
            return IsaLevel::avx2;
        }
        throw ConfigError(std::string("unknown VNODE_KERNELS value: ") + env);
    }
    return cpu_has_avx2() ? IsaLevel::avx2 : IsaLevel::scalar;
}

IsaLevel& level_ref() {
    static IsaLevel level = resolve_initial();
    return level;
}

int g_threads = 1;

} // namespace

const char* level_name(IsaLevel level) {
    switch (level) {
        case IsaLevel::scalar: return "scalar";
        case IsaLevel::avx2: return "avx2";
    }
    return "?";
}

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

IsaLevel active_level() { return level_ref(); }

void force_level(IsaLevel level) {
    if (level == IsaLevel::avx2 && !cpu_has_avx2())
        throw ConfigError("AVX2 kernels are not available on this CPU");
    level_ref() = level;
}

void set_threads(int n) {
    if (n < 1) throw ConfigError("thread count must be >= 1");
    g_threads = n;
}

int threads() { return g_threads; }

std::size_t partition_count(std::size_t n) {
    if (g_threads <= 1 || n <= 1) return n > 0 ? 1 : 0;
    return std::min<std::size_t>(static_cast<std::size_t>(g_threads), n);
}

void parallel_for_indexed(std::size_t n,
                          const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
    const std::size_t workers = partition_count(n);
    if (workers == 0) return;
    if (workers == 1) {
        fn(0, 0, n);
        return;
    }
    const std::size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w) {
        const std::size_t b = w * chunk;
        const std::size_t e = std::min(n, b + chunk);
        if (b >= e) break;
        pool.emplace_back([&fn, w, b, e] { fn(w, b, e); });
    }
    fn(0, 0, std::min(n, chunk));
    for (auto& t : pool) t.join();
}

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
    parallel_for_indexed(n, [&fn](std::size_t, std::size_t b, std::size_t e) { fn(b, e); });
}

template <typename T>
const KernelTable<T>& table(IsaLevel level) {
#if defined(__x86_64__) || defined(_M_X64)
    if (level == IsaLevel::avx2) {
        if constexpr (std::is_same_v<T, float>)
            return detail::avx2_f32;
        else
            return detail::avx2_f64;
    }
#else
    (void)level;
#endif
    if constexpr (std::is_same_v<T, float>)
        return detail::scalar_f32;
    else
        return detail::scalar_f64;
}

template <typename T>
const KernelTable<T>& active() {
    return table<T>(active_level());
}

template const KernelTable<float>& table<float>(IsaLevel);
template const KernelTable<double>& table<double>(IsaLevel);
template const KernelTable<float>& active<float>();
template const KernelTable<double>& active<double>();

} // namespace vnode::kernels
