// AVX2+FMA kernel variants. This TU is the only one compiled with
// -mavx2 -mfma; nothing here runs unless dispatch selected it, so the rest
// of the binary stays runnable on plain x86-64.

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include "vnode/kernels.hpp"

namespace vnode::kernels {
namespace {

// ---------------------------------------------------------------- float ---

inline float hsum256(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    lo = _mm_hadd_ps(lo, lo);
    lo = _mm_hadd_ps(lo, lo);
    return _mm_cvtss_f32(lo);
}

void add_f32(const float* a, const float* b, float* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_f32(const float* a, const float* b, float* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(out + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_f32(const float* a, const float* b, float* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_f32(const float* a, float s, float* out, std::size_t n) {
    const __m256 vs = _mm256_set1_ps(s);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), vs));
    for (; i < n; ++i) out[i] = a[i] * s;
}

void scalar_add_f32(const float* a, float s, float* out, std::size_t n) {
    const __m256 vs = _mm256_set1_ps(s);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i), vs));
    for (; i < n; ++i) out[i] = a[i] + s;
}

void axpy_f32(float alpha, const float* x, float* y, std::size_t n) {
    const __m256 va = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

float sum_f32(const float* a, std::size_t n) {
    __m256 acc0 = _mm256_setzero_ps(), acc1 = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        acc0 = _mm256_add_ps(acc0, _mm256_loadu_ps(a + i));
        acc1 = _mm256_add_ps(acc1, _mm256_loadu_ps(a + i + 8));
    }
    float out = hsum256(_mm256_add_ps(acc0, acc1));
    for (; i < n; ++i) out += a[i];
    return out;
}

float dot_f32(const float* a, const float* b, std::size_t n) {
    __m256 acc0 = _mm256_setzero_ps(), acc1 = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
        acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
    }
    float out = hsum256(_mm256_add_ps(acc0, acc1));
    for (; i < n; ++i) out += a[i] * b[i];
    return out;
}

// 4x16 register tile; C tile stays in ymm across the K loop.
void gemm_acc_f32(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n) {
    std::size_t j = 0;
    for (; j + 16 <= n; j += 16) {
        std::size_t i = 0;
        for (; i + 4 <= m; i += 4) {
            __m256 c00 = _mm256_loadu_ps(c + (i + 0) * n + j);
            __m256 c01 = _mm256_loadu_ps(c + (i + 0) * n + j + 8);
            __m256 c10 = _mm256_loadu_ps(c + (i + 1) * n + j);
            __m256 c11 = _mm256_loadu_ps(c + (i + 1) * n + j + 8);
            __m256 c20 = _mm256_loadu_ps(c + (i + 2) * n + j);
            __m256 c21 = _mm256_loadu_ps(c + (i + 2) * n + j + 8);
            __m256 c30 = _mm256_loadu_ps(c + (i + 3) * n + j);
            __m256 c31 = _mm256_loadu_ps(c + (i + 3) * n + j + 8);
            for (std::size_t p = 0; p < k; ++p) {
                const __m256 b0 = _mm256_loadu_ps(b + p * n + j);
                const __m256 b1 = _mm256_loadu_ps(b + p * n + j + 8);
                __m256 av;
                av = _mm256_set1_ps(a[(i + 0) * k + p]);
                c00 = _mm256_fmadd_ps(av, b0, c00);
                c01 = _mm256_fmadd_ps(av, b1, c01);
                av = _mm256_set1_ps(a[(i + 1) * k + p]);
                c10 = _mm256_fmadd_ps(av, b0, c10);
                c11 = _mm256_fmadd_ps(av, b1, c11);
                av = _mm256_set1_ps(a[(i + 2) * k + p]);
                c20 = _mm256_fmadd_ps(av, b0, c20);
                c21 = _mm256_fmadd_ps(av, b1, c21);
                av = _mm256_set1_ps(a[(i + 3) * k + p]);
                c30 = _mm256_fmadd_ps(av, b0, c30);
                c31 = _mm256_fmadd_ps(av, b1, c31);
            }
            _mm256_storeu_ps(c + (i + 0) * n + j, c00);
            _mm256_storeu_ps(c + (i + 0) * n + j + 8, c01);
            _mm256_storeu_ps(c + (i + 1) * n + j, c10);
            _mm256_storeu_ps(c + (i + 1) * n + j + 8, c11);
            _mm256_storeu_ps(c + (i + 2) * n + j, c20);
            _mm256_storeu_ps(c + (i + 2) * n + j + 8, c21);
            _mm256_storeu_ps(c + (i + 3) * n + j, c30);
            _mm256_storeu_ps(c + (i + 3) * n + j + 8, c31);
        }
        for (; i < m; ++i) {
            __m256 c0 = _mm256_loadu_ps(c + i * n + j);
            __m256 c1 = _mm256_loadu_ps(c + i * n + j + 8);
            for (std::size_t p = 0; p < k; ++p) {
                const __m256 av = _mm256_set1_ps(a[i * k + p]);
                c0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b + p * n + j), c0);
                c1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b + p * n + j + 8), c1);
            }
            _mm256_storeu_ps(c + i * n + j, c0);
            _mm256_storeu_ps(c + i * n + j + 8, c1);
        }
    }
    // column remainder via axpy
    if (j < n) {
        const std::size_t rem = n - j;
        for (std::size_t i = 0; i < m; ++i) {
            float* crow = c + i * n + j;
            for (std::size_t p = 0; p < k; ++p) {
                const float alpha = a[i * k + p];
                if (alpha == 0.0f) continue;
                axpy_f32(alpha, b + p * n + j, crow, rem);
            }
        }
    }
}

void gemm_acc_nt_f32(const float* a, const float* b, float* c, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const float* arow = a + i * n;
        float* crow = c + i * k;
        for (std::size_t j = 0; j < k; ++j) crow[j] += dot_f32(arow, b + j * n, n);
    }
}

// --------------------------------------------------------------- double ---

inline double hsum256d(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    lo = _mm_hadd_pd(lo, lo);
    return _mm_cvtsd_f64(lo);
}

void add_f64(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_f64(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_f64(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_f64(const double* a, double s, double* out, std::size_t n) {
    const __m256d vs = _mm256_set1_pd(s);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), vs));
    for (; i < n; ++i) out[i] = a[i] * s;
}

void scalar_add_f64(const double* a, double s, double* out, std::size_t n) {
    const __m256d vs = _mm256_set1_pd(s);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), vs));
    for (; i < n; ++i) out[i] = a[i] + s;
}

void axpy_f64(double alpha, const double* x, double* y, std::size_t n) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

double sum_f64(const double* a, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(a + i));
        acc1 = _mm256_add_pd(acc1, _mm256_loadu_pd(a + i + 4));
    }
    double out = hsum256d(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) out += a[i];
    return out;
}

double dot_f64(const double* a, const double* b, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
    }
    double out = hsum256d(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) out += a[i] * b[i];
    return out;
}

void gemm_acc_f64(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
        std::size_t i = 0;
        for (; i + 4 <= m; i += 4) {
            __m256d c00 = _mm256_loadu_pd(c + (i + 0) * n + j);
            __m256d c01 = _mm256_loadu_pd(c + (i + 0) * n + j + 4);
            __m256d c10 = _mm256_loadu_pd(c + (i + 1) * n + j);
            __m256d c11 = _mm256_loadu_pd(c + (i + 1) * n + j + 4);
            __m256d c20 = _mm256_loadu_pd(c + (i + 2) * n + j);
            __m256d c21 = _mm256_loadu_pd(c + (i + 2) * n + j + 4);
            __m256d c30 = _mm256_loadu_pd(c + (i + 3) * n + j);
            __m256d c31 = _mm256_loadu_pd(c + (i + 3) * n + j + 4);
            for (std::size_t p = 0; p < k; ++p) {
                const __m256d b0 = _mm256_loadu_pd(b + p * n + j);
                const __m256d b1 = _mm256_loadu_pd(b + p * n + j + 4);
                __m256d av;
                av = _mm256_set1_pd(a[(i + 0) * k + p]);
                c00 = _mm256_fmadd_pd(av, b0, c00);
                c01 = _mm256_fmadd_pd(av, b1, c01);
                av = _mm256_set1_pd(a[(i + 1) * k + p]);
                c10 = _mm256_fmadd_pd(av, b0, c10);
                c11 = _mm256_fmadd_pd(av, b1, c11);
                av = _mm256_set1_pd(a[(i + 2) * k + p]);
                c20 = _mm256_fmadd_pd(av, b0, c20);
                c21 = _mm256_fmadd_pd(av, b1, c21);
                av = _mm256_set1_pd(a[(i + 3) * k + p]);
                c30 = _mm256_fmadd_pd(av, b0, c30);
                c31 = _mm256_fmadd_pd(av, b1, c31);
            }
            _mm256_storeu_pd(c + (i + 0) * n + j, c00);
            _mm256_storeu_pd(c + (i + 0) * n + j + 4, c01);
            _mm256_storeu_pd(c + (i + 1) * n + j, c10);
            _mm256_storeu_pd(c + (i + 1) * n + j + 4, c11);
            _mm256_storeu_pd(c + (i + 2) * n + j, c20);
            _mm256_storeu_pd(c + (i + 2) * n + j + 4, c21);
            _mm256_storeu_pd(c + (i + 3) * n + j, c30);
            _mm256_storeu_pd(c + (i + 3) * n + j + 4, c31);
        }
        for (; i < m; ++i) {
            __m256d c0 = _mm256_loadu_pd(c + i * n + j);
            __m256d c1 = _mm256_loadu_pd(c + i * n + j + 4);
            for (std::size_t p = 0; p < k; ++p) {
                const __m256d av = _mm256_set1_pd(a[i * k + p]);
                c0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b + p * n + j), c0);
                c1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b + p * n + j + 4), c1);
            }
            _mm256_storeu_pd(c + i * n + j, c0);
            _mm256_storeu_pd(c + i * n + j + 4, c1);
        }
    }
    if (j < n) {
        const std::size_t rem = n - j;
        for (std::size_t i = 0; i < m; ++i) {
            double* crow = c + i * n + j;
            for (std::size_t p = 0; p < k; ++p) {
                const double alpha = a[i * k + p];
                if (alpha == 0.0) continue;
                axpy_f64(alpha, b + p * n + j, crow, rem);
            }
        }
    }
}

void gemm_acc_nt_f64(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double* crow = c + i * k;
        for (std::size_t j = 0; j < k; ++j) crow[j] += dot_f64(arow, b + j * n, n);
    }
}

} // namespace

namespace detail {

KernelTable<float> avx2_f32 = {
    add_f32, sub_f32, mul_f32, scale_f32, scalar_add_f32,
    axpy_f32, sum_f32, dot_f32, gemm_acc_f32, gemm_acc_nt_f32,
};

KernelTable<double> avx2_f64 = {
    add_f64, sub_f64, mul_f64, scale_f64, scalar_add_f64,
    axpy_f64, sum_f64, dot_f64, gemm_acc_f64, gemm_acc_nt_f64,
};

} // namespace detail

} // namespace vnode::kernels

#endif // x86-64
