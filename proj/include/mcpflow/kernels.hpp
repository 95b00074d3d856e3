#pragma once

// Data-parallel inner loops used by the residual evaluators and solvers.
// Each kernel has a scalar reference implementation and, on x86-64, an
// AVX2/FMA variant. The active table is chosen once at startup from CPU
// features; MCPFLOW_KERNEL=scalar|avx2 overrides the selection.

#include <cstddef>

namespace mcpflow::kernels {

// CSR view of the nodal admittance pattern. g/b hold the real/imaginary
// entry values; rows and columns are bus indices.
struct AdmittanceView {
  int n = 0;
  const int* row_ptr = nullptr;
  const int* col = nullptr;
  const double* g = nullptr;
  const double* b = nullptr;
};

struct Ops {
  const char* name;

  // r_i = x_i - clamp(x_i - f_i, lo_i, up_i); lo/up may be +-inf.
  void (*mid_residual)(int n, const double* x, const double* f,
                       const double* lo, const double* up, double* r);

  // Power-flow branch sums per bus:
  //   pflow_i = v_i * sum_k v_k (G_ik cos(d_i-d_k) + B_ik sin(d_i-d_k))
  //   qflow_i = v_i * sum_k v_k (G_ik sin(d_i-d_k) - B_ik cos(d_i-d_k))
  // cosd/sind are precomputed per-bus cos(delta)/sin(delta).
  void (*pf_flows)(const AdmittanceView& Y, const double* v,
                   const double* cosd, const double* sind,
                   double* pflow, double* qflow);

  // out_i = sqrt(a_i^2 + b_i^2) - a_i - b_i
  void (*fb_phi)(int n, const double* a, const double* b, double* out);

  double (*inf_norm)(int n, const double* x);
};

const Ops& scalar_ops();

// Null when the build or the CPU lacks AVX2+FMA.
const Ops* avx2_ops();

// Runtime-selected table (env override honored). Stable for process lifetime.
const Ops& active();

}  // namespace mcpflow::kernels
