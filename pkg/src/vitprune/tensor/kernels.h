/* Fixed-order dense kernels.
 *
 * Every reduction runs left to right over its axis so that results do not
 * depend on thread count or batch composition: rows are independent and
 * parallelism is only ever across rows.
 */
#ifndef VITPRUNE_KERNELS_H
#define VITPRUNE_KERNELS_H

#include <math.h>
#include <stddef.h>

#ifdef _OPENMP
#include <omp.h>
#endif

#define VP_SQRT1_2 0.70710678118654752440
#define VP_INV_SQRT_2PI 0.39894228040143267794

/* c[b] = a[b] @ bm[b]; a: (nb, m, k), bm: (nb, k, n), c: (nb, m, n).
 * Each c[i, j] starts at 0 and accumulates a[i, p] * b[p, j] for p = 0..k-1
 * in order. Full 4x32 output tiles are held in local accumulators so the
 * compiler can keep them in vector registers; edge tiles take the same
 * per-element order through memory. */
#define VP_MR 4
#define VP_NR 32
#define VP_DEFINE_MATMUL(NAME, T)                                              \
static void NAME(const T *restrict a, const T *restrict bm, T *restrict c,     \
                 ptrdiff_t nb, ptrdiff_t m, ptrdiff_t k, ptrdiff_t n,          \
                 int nthreads)                                                 \
{                                                                              \
    ptrdiff_t mblocks = (m + VP_MR - 1) / VP_MR;                               \
    ptrdiff_t t;                                                               \
    (void)nthreads;                                                            \
    _Pragma("omp parallel for num_threads(nthreads) schedule(static)")         \
    for (t = 0; t < nb * mblocks; t++) {                                       \
        ptrdiff_t bi = t / mblocks;                                            \
        ptrdiff_t i0 = (t % mblocks) * VP_MR;                                  \
        ptrdiff_t cnt = m - i0 < VP_MR ? m - i0 : VP_MR;                       \
        const T *bb = bm + bi * k * n;                                         \
        const T *a0 = a + (bi * m + i0) * k;                                   \
        T *c0 = c + (bi * m + i0) * n;                                         \
        ptrdiff_t j0, jj, p, i;                                                \
        for (j0 = 0; j0 < n; j0 += VP_NR) {                                    \
            ptrdiff_t jn = n - j0 < VP_NR ? n - j0 : VP_NR;                    \
            if (cnt == VP_MR && jn == VP_NR) {                                 \
                T r0[VP_NR], r1[VP_NR], r2[VP_NR], r3[VP_NR];                  \
                for (jj = 0; jj < VP_NR; jj++)                                 \
                    r0[jj] = r1[jj] = r2[jj] = r3[jj] = (T)0;                  \
                for (p = 0; p < k; p++) {                                      \
                    const T v0 = a0[p], v1 = a0[k + p];                        \
                    const T v2 = a0[2 * k + p], v3 = a0[3 * k + p];            \
                    const T *brow = bb + p * n + j0;                           \
                    for (jj = 0; jj < VP_NR; jj++) {                           \
                        const T bv = brow[jj];                                 \
                        r0[jj] += v0 * bv;                                     \
                        r1[jj] += v1 * bv;                                     \
                        r2[jj] += v2 * bv;                                     \
                        r3[jj] += v3 * bv;                                     \
                    }                                                          \
                }                                                              \
                for (jj = 0; jj < VP_NR; jj++) {                               \
                    c0[jj + j0] = r0[jj];                                      \
                    c0[n + jj + j0] = r1[jj];                                  \
                    c0[2 * n + jj + j0] = r2[jj];                              \
                    c0[3 * n + jj + j0] = r3[jj];                              \
                }                                                              \
            } else {                                                           \
                for (i = 0; i < cnt; i++) {                                    \
                    const T *arow = a0 + i * k;                                \
                    T *crow = c0 + i * n + j0;                                 \
                    for (jj = 0; jj < jn; jj++) crow[jj] = (T)0;               \
                    for (p = 0; p < k; p++) {                                  \
                        const T av = arow[p];                                  \
                        const T *brow = bb + p * n + j0;                       \
                        for (jj = 0; jj < jn; jj++) crow[jj] += av * brow[jj]; \
                    }                                                          \
                }                                                              \
            }                                                                  \
        }                                                                      \
    }                                                                          \
}

VP_DEFINE_MATMUL(vp_matmul_f64, double)
VP_DEFINE_MATMUL(vp_matmul_f32, float)

/* Row-wise layer norm with biased variance; writes y, per-row mean and rstd. */
#define VP_DEFINE_LN_FWD(NAME, T)                                              \
static void NAME(const T *restrict x, const T *restrict g, const T *restrict b,\
                 T *restrict y, T *restrict mean, T *restrict rstd,            \
                 ptrdiff_t rows, ptrdiff_t d, double eps, int nthreads)        \
{                                                                              \
    ptrdiff_t r;                                                               \
    (void)nthreads;                                                            \
    _Pragma("omp parallel for num_threads(nthreads) schedule(static)")         \
    for (r = 0; r < rows; r++) {                                               \
        const T *xr = x + r * d;                                               \
        T *yr = y + r * d;                                                     \
        T s = 0, v = 0, mu, rs;                                                \
        ptrdiff_t j;                                                           \
        for (j = 0; j < d; j++) s += xr[j];                                    \
        mu = s / (T)d;                                                         \
        for (j = 0; j < d; j++) { T t = xr[j] - mu; v += t * t; }              \
        rs = (T)1 / (T)sqrt((double)(v / (T)d) + eps);                         \
        mean[r] = mu;                                                          \
        rstd[r] = rs;                                                          \
        for (j = 0; j < d; j++) yr[j] = (xr[j] - mu) * rs * g[j] + b[j];       \
    }                                                                          \
}

VP_DEFINE_LN_FWD(vp_ln_fwd_f64, double)
VP_DEFINE_LN_FWD(vp_ln_fwd_f32, float)

/* dx only; parameter gradients are column sums done by the caller. */
#define VP_DEFINE_LN_BWD(NAME, T)                                              \
static void NAME(const T *restrict gy, const T *restrict x,                    \
                 const T *restrict g, const T *restrict mean,                  \
                 const T *restrict rstd, T *restrict dx,                       \
                 ptrdiff_t rows, ptrdiff_t d, int nthreads)                    \
{                                                                              \
    ptrdiff_t r;                                                               \
    (void)nthreads;                                                            \
    _Pragma("omp parallel for num_threads(nthreads) schedule(static)")         \
    for (r = 0; r < rows; r++) {                                               \
        const T *gr = gy + r * d;                                              \
        const T *xr = x + r * d;                                               \
        T *dr = dx + r * d;                                                    \
        const T mu = mean[r], rs = rstd[r];                                    \
        T s1 = 0, s2 = 0;                                                      \
        ptrdiff_t j;                                                           \
        for (j = 0; j < d; j++) {                                              \
            T dxh = gr[j] * g[j];                                              \
            s1 += dxh;                                                         \
            s2 += dxh * (xr[j] - mu) * rs;                                     \
        }                                                                      \
        s1 /= (T)d;                                                            \
        s2 /= (T)d;                                                            \
        for (j = 0; j < d; j++) {                                              \
            T xh = (xr[j] - mu) * rs;                                          \
            dr[j] = rs * (gr[j] * g[j] - s1 - xh * s2);                        \
        }                                                                      \
    }                                                                          \
}

VP_DEFINE_LN_BWD(vp_ln_bwd_f64, double)
VP_DEFINE_LN_BWD(vp_ln_bwd_f32, float)

#define VP_DEFINE_SOFTMAX(NAME, T)                                             \
static void NAME(const T *restrict x, T *restrict y, ptrdiff_t rows,           \
                 ptrdiff_t n, int nthreads)                                    \
{                                                                              \
    ptrdiff_t r;                                                               \
    (void)nthreads;                                                            \
    _Pragma("omp parallel for num_threads(nthreads) schedule(static)")         \
    for (r = 0; r < rows; r++) {                                               \
        const T *xr = x + r * n;                                               \
        T *yr = y + r * n;                                                     \
        T mx = xr[0], s = 0;                                                   \
        ptrdiff_t j;                                                           \
        for (j = 1; j < n; j++) if (xr[j] > mx) mx = xr[j];                    \
        for (j = 0; j < n; j++) { yr[j] = (T)exp((double)(xr[j] - mx)); s += yr[j]; } \
        for (j = 0; j < n; j++) yr[j] /= s;                                    \
    }                                                                          \
}

VP_DEFINE_SOFTMAX(vp_softmax_f64, double)
VP_DEFINE_SOFTMAX(vp_softmax_f32, float)

/* Exact GELU x * Phi(x); optionally also the derivative Phi(x) + x * phi(x). */
#define VP_DEFINE_GELU(NAME, T)                                                \
static void NAME(const T *restrict x, T *restrict y, T *restrict dy,           \
                 ptrdiff_t size, int nthreads)                                 \
{                                                                              \
    ptrdiff_t i;                                                               \
    (void)nthreads;                                                            \
    _Pragma("omp parallel for num_threads(nthreads) schedule(static)")         \
    for (i = 0; i < size; i++) {                                               \
        double v = (double)x[i];                                               \
        double cdf = 0.5 * (1.0 + erf(v * VP_SQRT1_2));                        \
        y[i] = (T)(v * cdf);                                                   \
        if (dy) dy[i] = (T)(cdf + v * VP_INV_SQRT_2PI * exp(-0.5 * v * v));    \
    }                                                                          \
}

VP_DEFINE_GELU(vp_gelu_f64, double)
VP_DEFINE_GELU(vp_gelu_f32, float)

#endif
