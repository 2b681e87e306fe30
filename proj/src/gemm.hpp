#pragma once

#include <cstdint>

namespace pluralfill::detail {

/// C[M,N] (+)= A[M,K] * B[K,N], all row-major and contiguous.
void gemm_nn(int64_t M, int64_t N, int64_t K, const float* A, const float* B, float* C,
             bool accumulate);

/// out[cols, rows] = in[rows, cols]^T
void transpose(int64_t rows, int64_t cols, const float* in, float* out);

/// C (+)= A * B^T with A [M,K], B [N,K].
void gemm_nt(int64_t M, int64_t N, int64_t K, const float* A, const float* B, float* C,
             bool accumulate);
/// C (+)= A^T * B with A [K,M], B [K,N].
void gemm_tn(int64_t M, int64_t N, int64_t K, const float* A, const float* B, float* C,
             bool accumulate);

}  // namespace pluralfill::detail
