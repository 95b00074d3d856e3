// AVX2/FMA variants. This translation unit is compiled with -mavx2 -mfma
// and must only be entered after a runtime CPU check (see kernels_dispatch).

#include "mcpflow/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <algorithm>
#include <cmath>

namespace mcpflow::kernels {

namespace {

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

void mid_residual_avx2(int n, const double* x, const double* f,
                       const double* lo, const double* up, double* r) {
  int i = 0;
  for (; i + 3 < n; i += 4) {
    const __m256d xv = _mm256_loadu_pd(x + i);
    const __m256d fv = _mm256_loadu_pd(f + i);
    __m256d t = _mm256_sub_pd(xv, fv);
    t = _mm256_max_pd(t, _mm256_loadu_pd(lo + i));
    t = _mm256_min_pd(t, _mm256_loadu_pd(up + i));
    _mm256_storeu_pd(r + i, _mm256_sub_pd(xv, t));
  }
  for (; i < n; ++i) {
    const double t = std::min(up[i], std::max(lo[i], x[i] - f[i]));
    r[i] = x[i] - t;
  }
}

void pf_flows_avx2(const AdmittanceView& Y, const double* v,
                   const double* cosd, const double* sind,
                   double* pflow, double* qflow) {
  for (int i = 0; i < Y.n; ++i) {
    const __m256d ci = _mm256_set1_pd(cosd[i]);
    const __m256d si = _mm256_set1_pd(sind[i]);
    __m256d accp = _mm256_setzero_pd();
    __m256d accq = _mm256_setzero_pd();
    const int begin = Y.row_ptr[i];
    const int end = Y.row_ptr[i + 1];
    int p = begin;
    for (; p + 3 < end; p += 4) {
      const __m128i idx = _mm_loadu_si128(reinterpret_cast<const __m128i*>(Y.col + p));
      const __m256d vk = _mm256_i32gather_pd(v, idx, 8);
      const __m256d ck = _mm256_i32gather_pd(cosd, idx, 8);
      const __m256d sk = _mm256_i32gather_pd(sind, idx, 8);
      const __m256d g = _mm256_loadu_pd(Y.g + p);
      const __m256d b = _mm256_loadu_pd(Y.b + p);
      const __m256d cik = _mm256_fmadd_pd(ci, ck, _mm256_mul_pd(si, sk));
      const __m256d sik = _mm256_fmsub_pd(si, ck, _mm256_mul_pd(ci, sk));
      accp = _mm256_fmadd_pd(vk, _mm256_fmadd_pd(g, cik, _mm256_mul_pd(b, sik)), accp);
      accq = _mm256_fmadd_pd(vk, _mm256_fmsub_pd(g, sik, _mm256_mul_pd(b, cik)), accq);
    }
    double sp = hsum(accp);
    double sq = hsum(accq);
    for (; p < end; ++p) {
      const int k = Y.col[p];
      const double cik = cosd[i] * cosd[k] + sind[i] * sind[k];
      const double sik = sind[i] * cosd[k] - cosd[i] * sind[k];
      sp += v[k] * (Y.g[p] * cik + Y.b[p] * sik);
      sq += v[k] * (Y.g[p] * sik - Y.b[p] * cik);
    }
    pflow[i] = v[i] * sp;
    qflow[i] = v[i] * sq;
  }
}

void fb_phi_avx2(int n, const double* a, const double* b, double* out) {
  int i = 0;
  for (; i + 3 < n; i += 4) {
    const __m256d av = _mm256_loadu_pd(a + i);
    const __m256d bv = _mm256_loadu_pd(b + i);
    const __m256d r = _mm256_sqrt_pd(_mm256_fmadd_pd(av, av, _mm256_mul_pd(bv, bv)));
    _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_sub_pd(r, av), bv));
  }
  for (; i < n; ++i) out[i] = std::sqrt(a[i] * a[i] + b[i] * b[i]) - a[i] - b[i];
}

double inf_norm_avx2(int n, const double* x) {
  const __m256d mask = _mm256_castsi256_pd(_mm256_set1_epi64x(0x7fffffffffffffffLL));
  __m256d acc = _mm256_setzero_pd();
  int i = 0;
  for (; i + 3 < n; i += 4) {
    acc = _mm256_max_pd(acc, _mm256_and_pd(mask, _mm256_loadu_pd(x + i)));
  }
  const __m128d lo = _mm256_castpd256_pd128(acc);
  const __m128d hi = _mm256_extractf128_pd(acc, 1);
  const __m128d m2 = _mm_max_pd(lo, hi);
  double m = _mm_cvtsd_f64(_mm_max_sd(m2, _mm_unpackhi_pd(m2, m2)));
  for (; i < n; ++i) m = std::max(m, std::abs(x[i]));
  return m;
}

}  // namespace

const Ops* avx2_ops_impl() {
  static const Ops ops{"avx2", mid_residual_avx2, pf_flows_avx2, fb_phi_avx2,
                       inf_norm_avx2};
  return &ops;
}

}  // namespace mcpflow::kernels

#else

namespace mcpflow::kernels {
const Ops* avx2_ops_impl() { return nullptr; }
}  // namespace mcpflow::kernels

#endif
