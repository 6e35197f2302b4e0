#pragma once

#include <cstddef>
#include <functional>
#include <string>

namespace vnode::kernels {

// Dense inner loops used by the tensor ops. Every kernel exists as a scalar
// reference implementation and, on x86-64, an AVX2+FMA variant compiled in a
// separate translation unit. The active set is chosen once at runtime from
// CPU capabilities; tests pin the level explicitly and check the variants
// against each other.

enum class IsaLevel { scalar = 0, avx2 = 1 };

const char* level_name(IsaLevel level);

// True if the CPU reports AVX2 and FMA.
bool cpu_has_avx2();

// Active level. Resolved on first use: VNODE_KERNELS=scalar|avx2 env override,
// otherwise the best level the CPU supports.
IsaLevel active_level();

// Pin the level (tests, benchmarking). Throws ConfigError if the requested
// level is not available in this build/CPU.
void force_level(IsaLevel level);

// Deterministic data parallelism: loops are split into fixed contiguous
// blocks per thread, so results are bitwise identical for a fixed thread
// count. 1 disables threading.
void set_threads(int n);
int threads();

// Runs fn(begin, end) over [0, n) split across the configured threads.
// fn must not touch ranges outside [begin, end).
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

// Number of contiguous ranges parallel_for will use for n items.
std::size_t partition_count(std::size_t n);

// As parallel_for, but also passes the range index in [0, partition_count(n)),
// for per-worker scratch or partial-sum buffers.
void parallel_for_indexed(std::size_t n,
                          const std::function<void(std::size_t, std::size_t, std::size_t)>& fn);

template <typename T>
struct KernelTable {
    // elementwise, contiguous, out may alias a or b
    void (*add)(const T* a, const T* b, T* out, std::size_t n);
    void (*sub)(const T* a, const T* b, T* out, std::size_t n);
    void (*mul)(const T* a, const T* b, T* out, std::size_t n);
    void (*scale)(const T* a, T s, T* out, std::size_t n);       // out = a * s
    void (*scalar_add)(const T* a, T s, T* out, std::size_t n);  // out = a + s
    void (*axpy)(T alpha, const T* x, T* y, std::size_t n);      // y += alpha * x
    T (*sum)(const T* a, std::size_t n);
    T (*dot)(const T* a, const T* b, std::size_t n);
    // C[M,N] += A[M,K] * B[K,N], all row-major, no zeroing of C
    void (*gemm_acc)(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
    // C[M,K] += A[M,N] * B[K,N]^T  (dot products of rows)
    void (*gemm_acc_nt)(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k);
};

// Table for the active level.
template <typename T>
const KernelTable<T>& active();

// Table for an explicit level (equivalence tests).
template <typename T>
const KernelTable<T>& table(IsaLevel level);

namespace detail {
extern KernelTable<float> scalar_f32;
extern KernelTable<double> scalar_f64;
#if defined(__x86_64__) || defined(_M_X64)
extern KernelTable<float> avx2_f32;
extern KernelTable<double> avx2_f64;
#endif
} // namespace detail

} // namespace vnode::kernels
