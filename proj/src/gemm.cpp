#include "gemm.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace pluralfill::detail {

void gemm_nn(int64_t M, int64_t N, int64_t K, const float* A, const float* B, float* C,
             bool accumulate) {
  if (!accumulate) std::memset(C, 0, sizeof(float) * static_cast<size_t>(M * N));
  // Four output rows share each streamed row of B.
  int64_t i = 0;
  for (; i + 4 <= M; i += 4) {
    float* __restrict c0 = C + i * N;
    float* __restrict c1 = c0 + N;
    float* __restrict c2 = c1 + N;
    float* __restrict c3 = c2 + N;
    const float* a0 = A + i * K;
    const float* a1 = a0 + K;
    const float* a2 = a1 + K;
    const float* a3 = a2 + K;
    for (int64_t k = 0; k < K; ++k) {
      const float* __restrict b = B + k * N;
      const float x0 = a0[k], x1 = a1[k], x2 = a2[k], x3 = a3[k];
      for (int64_t j = 0; j < N; ++j) {
        const float bj = b[j];
        c0[j] += x0 * bj;
        c1[j] += x1 * bj;
        c2[j] += x2 * bj;
        c3[j] += x3 * bj;
      }
    }
  }
  for (; i < M; ++i) {
    float* __restrict c = C + i * N;
    const float* a = A + i * K;
    for (int64_t k = 0; k < K; ++k) {
      const float* __restrict b = B + k * N;
      const float x = a[k];
      for (int64_t j = 0; j < N; ++j) c[j] += x * b[j];
    }
  }
}

void transpose(int64_t rows, int64_t cols, const float* in, float* out) {
  constexpr int64_t kBlock = 32;
  for (int64_t r0 = 0; r0 < rows; r0 += kBlock) {
    const int64_t r1 = std::min(rows, r0 + kBlock);
    for (int64_t c0 = 0; c0 < cols; c0 += kBlock) {
      const int64_t c1 = std::min(cols, c0 + kBlock);
      for (int64_t r = r0; r < r1; ++r) {
        for (int64_t c = c0; c < c1; ++c) out[c * rows + r] = in[r * cols + c];
      }
    }
  }
}

void gemm_nt(int64_t M, int64_t N, int64_t K, const float* A, const float* B, float* C,
             bool accumulate) {
  std::vector<float> bt(static_cast<size_t>(K * N));
  transpose(N, K, B, bt.data());
  gemm_nn(M, N, K, A, bt.data(), C, accumulate);
}

void gemm_tn(int64_t M, int64_t N, int64_t K, const float* A, const float* B, float* C,
             bool accumulate) {
  std::vector<float> at(static_cast<size_t>(M * K));
  transpose(K, M, A, at.data());
  gemm_nn(M, N, K, at.data(), B, C, accumulate);
}

}  // namespace pluralfill::detail
