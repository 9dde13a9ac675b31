#pragma once

#include <cstddef>

namespace multirater {

// Row-major single-precision matrix kernels sized for the conv workloads
// here (M = channels, tens; N = pixels, thousands; K = channels*k*k).
// Accumulation order is fixed, so results are bit-reproducible run to run.

namespace detail {

inline void gemm_nn_edge(int mi, int mend, int nj, int nend, int K,
                         const float* A, int lda, const float* B, int ldb,
                         float* C, int ldc, bool accumulate) {
    for (int i = mi; i < mend; ++i) {
        float* c = C + static_cast<size_t>(i) * ldc;
        const float* a = A + static_cast<size_t>(i) * lda;
        if (!accumulate) {
            for (int j = nj; j < nend; ++j) c[j] = 0.0f;
        }
        for (int k = 0; k < K; ++k) {
            const float av = a[k];
            const float* b = B + static_cast<size_t>(k) * ldb;
            for (int j = nj; j < nend; ++j) c[j] += av * b[j];
        }
    }
}

} // namespace detail

/// C (MxN) = A (MxK) * B (KxN), or += when `accumulate`.
inline void sgemm_nn(int M, int N, int K,
                     const float* __restrict A, int lda,
                     const float* __restrict B, int ldb,
                     float* __restrict C, int ldc, bool accumulate = false) {
    constexpr int MR = 4;
    constexpr int NR = 32;
    const int m_main = M - M % MR;
    const int n_main = N - N % NR;

    for (int i = 0; i < m_main; i += MR) {
        const float* a0 = A + static_cast<size_t>(i + 0) * lda;
        const float* a1 = A + static_cast<size_t>(i + 1) * lda;
        const float* a2 = A + static_cast<size_t>(i + 2) * lda;
        const float* a3 = A + static_cast<size_t>(i + 3) * lda;
        float* c0 = C + static_cast<size_t>(i + 0) * ldc;
        float* c1 = C + static_cast<size_t>(i + 1) * ldc;
        float* c2 = C + static_cast<size_t>(i + 2) * ldc;
        float* c3 = C + static_cast<size_t>(i + 3) * ldc;

        for (int j = 0; j < n_main; j += NR) {
            float acc0[NR], acc1[NR], acc2[NR], acc3[NR];
            if (accumulate) {
                for (int t = 0; t < NR; ++t) acc0[t] = c0[j + t];
                for (int t = 0; t < NR; ++t) acc1[t] = c1[j + t];
                for (int t = 0; t < NR; ++t) acc2[t] = c2[j + t];
                for (int t = 0; t < NR; ++t) acc3[t] = c3[j + t];
            } else {
                for (int t = 0; t < NR; ++t) acc0[t] = 0.0f;
                for (int t = 0; t < NR; ++t) acc1[t] = 0.0f;
                for (int t = 0; t < NR; ++t) acc2[t] = 0.0f;
                for (int t = 0; t < NR; ++t) acc3[t] = 0.0f;
            }
            for (int k = 0; k < K; ++k) {
                const float* b = B + static_cast<size_t>(k) * ldb + j;
                const float v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
                for (int t = 0; t < NR; ++t) {
                    const float bv = b[t];
                    acc0[t] += v0 * bv;
                    acc1[t] += v1 * bv;
                    acc2[t] += v2 * bv;
                    acc3[t] += v3 * bv;
                }
            }
            for (int t = 0; t < NR; ++t) c0[j + t] = acc0[t];
            for (int t = 0; t < NR; ++t) c1[j + t] = acc1[t];
            for (int t = 0; t < NR; ++t) c2[j + t] = acc2[t];
            for (int t = 0; t < NR; ++t) c3[j + t] = acc3[t];
        }
        if (n_main < N)
            detail::gemm_nn_edge(i, i + MR, n_main, N, K, A, lda, B, ldb, C, ldc, accumulate);
    }
    if (m_main < M)
        detail::gemm_nn_edge(m_main, M, 0, N, K, A, lda, B, ldb, C, ldc, accumulate);
}

/// C (MxN) = A (MxK) * B^T where B is (NxK) row-major, or += when
/// `accumulate`. Inner dimension K is the long one (pixels); lane-array
/// accumulators keep the reduction order fixed.
inline void sgemm_nt(int M, int N, int K,
                     const float* __restrict A, int lda,
                     const float* __restrict B, int ldb,
                     float* __restrict C, int ldc, bool accumulate = false) {
    constexpr int LANES = 16;
    constexpr int JR = 4;
    const int k_main = K - K % LANES;
    const int n_main = N - N % JR;

    for (int i = 0; i < M; ++i) {
        const float* a = A + static_cast<size_t>(i) * lda;
        float* c = C + static_cast<size_t>(i) * ldc;
        int j = 0;
        for (; j < n_main; j += JR) {
            const float* b0 = B + static_cast<size_t>(j + 0) * ldb;
            const float* b1 = B + static_cast<size_t>(j + 1) * ldb;
            const float* b2 = B + static_cast<size_t>(j + 2) * ldb;
            const float* b3 = B + static_cast<size_t>(j + 3) * ldb;
            float acc0[LANES], acc1[LANES], acc2[LANES], acc3[LANES];
            for (int t = 0; t < LANES; ++t) acc0[t] = acc1[t] = acc2[t] = acc3[t] = 0.0f;
            for (int k = 0; k < k_main; k += LANES) {
                for (int t = 0; t < LANES; ++t) {
                    const float av = a[k + t];
                    acc0[t] += av * b0[k + t];
                    acc1[t] += av * b1[k + t];
                    acc2[t] += av * b2[k + t];
                    acc3[t] += av * b3[k + t];
                }
            }
            float s0 = 0.0f, s1 = 0.0f, s2 = 0.0f, s3 = 0.0f;
            for (int t = 0; t < LANES; ++t) {
                s0 += acc0[t];
                s1 += acc1[t];
                s2 += acc2[t];
                s3 += acc3[t];
            }
            for (int k = k_main; k < K; ++k) {
                const float av = a[k];
                s0 += av * b0[k];
                s1 += av * b1[k];
                s2 += av * b2[k];
                s3 += av * b3[k];
            }
            if (accumulate) {
                c[j + 0] += s0;
                c[j + 1] += s1;
                c[j + 2] += s2;
                c[j + 3] += s3;
            } else {
                c[j + 0] = s0;
                c[j + 1] = s1;
                c[j + 2] = s2;
                c[j + 3] = s3;
            }
        }
        for (; j < N; ++j) {
            const float* b = B + static_cast<size_t>(j) * ldb;
            float acc[LANES];
            for (int t = 0; t < LANES; ++t) acc[t] = 0.0f;
            for (int k = 0; k < k_main; k += LANES)
                for (int t = 0; t < LANES; ++t) acc[t] += a[k + t] * b[k + t];
            float s = 0.0f;
            for (int t = 0; t < LANES; ++t) s += acc[t];
            for (int k = k_main; k < K; ++k) s += a[k] * b[k];
            if (accumulate)
                c[j] += s;
            else
                c[j] = s;
        }
    }
}

} // namespace multirater
