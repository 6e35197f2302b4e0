// Scalar reference kernels. These define the semantics the SIMD variants are
// tested against; keep them obvious.

#include "vnode/kernels.hpp"

namespace vnode::kernels {
namespace {

template <typename T>
void add_(const T* a, const T* b, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
void sub_(const T* a, const T* b, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

template <typename T>
void mul_(const T* a, const T* b, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <typename T>
void scale_(const T* a, T s, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * s;
}

template <typename T>
void scalar_add_(const T* a, T s, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + s;
}

template <typename T>
void axpy_(T alpha, const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
T sum_(const T* a, std::size_t n) {
    T acc{};
    for (std::size_t i = 0; i < n; ++i) acc += a[i];
    return acc;
}

template <typename T>
T dot_(const T* a, const T* b, std::size_t n) {
    T acc{};
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

// Row-major C[M,N] += A[M,K] * B[K,N]. axpy over rows of B keeps the inner
// loop contiguous.
template <typename T>
void gemm_acc_(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T alpha = arow[p];
            if (alpha == T{}) continue;
            axpy_(alpha, b + p * n, crow, n);
        }
    }
}

// C[M,K] += A[M,N] * B[K,N]^T
template <typename T>
void gemm_acc_nt_(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * n;
        T* crow = c + i * k;
        for (std::size_t j = 0; j < k; ++j) crow[j] += dot_(arow, b + j * n, n);
    }
}

template <typename T>
KernelTable<T> make_table() {
    KernelTable<T> t;
    t.add = add_<T>;
    t.sub = sub_<T>;
    t.mul = mul_<T>;
    t.scale = scale_<T>;
    t.scalar_add = scalar_add_<T>;
    t.axpy = axpy_<T>;
    t.sum = sum_<T>;
    t.dot = dot_<T>;
    t.gemm_acc = gemm_acc_<T>;
    t.gemm_acc_nt = gemm_acc_nt_<T>;
    return t;
}

} // namespace

namespace detail {
KernelTable<float> scalar_f32 = make_table<float>();
KernelTable<double> scalar_f64 = make_table<double>();
} // namespace detail

} // namespace vnode::kernels
