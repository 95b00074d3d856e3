#include "mcpflow/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace mcpflow::kernels {

namespace {

void mid_residual_scalar(int n, const double* x, const double* f,
                         const double* lo, const double* up, double* r) {
  for (int i = 0; i < n; ++i) {
    const double t = std::min(up[i], std::max(lo[i], x[i] - f[i]));
    r[i] = x[i] - t;
  }
}

void pf_flows_scalar(const AdmittanceView& Y, const double* v,
                     const double* cosd, const double* sind,
                     double* pflow, double* qflow) {
  for (int i = 0; i < Y.n; ++i) {
    const double ci = cosd[i];
    const double si = sind[i];
    double sp = 0.0;
    double sq = 0.0;
    for (int p = Y.row_ptr[i]; p < Y.row_ptr[i + 1]; ++p) {
      const int k = Y.col[p];
      const double cik = ci * cosd[k] + si * sind[k];
      const double sik = si * cosd[k] - ci * sind[k];
      sp += v[k] * (Y.g[p] * cik + Y.b[p] * sik);
      sq += v[k] * (Y.g[p] * sik - Y.b[p] * cik);
    }
    pflow[i] = v[i] * sp;
    qflow[i] = v[i] * sq;
  }
}

void fb_phi_scalar(int n, const double* a, const double* b, double* out) {
  for (int i = 0; i < n; ++i) {
    out[i] = std::sqrt(a[i] * a[i] + b[i] * b[i]) - a[i] - b[i];
  }
}

double inf_norm_scalar(int n, const double* x) {
  double m = 0.0;
  for (int i = 0; i < n; ++i) m = std::max(m, std::abs(x[i]));
  return m;
}

}  // namespace

const Ops& scalar_ops() {
  static const Ops ops{"scalar", mid_residual_scalar, pf_flows_scalar,
                       fb_phi_scalar, inf_norm_scalar};
  return ops;
}

}  // namespace mcpflow::kernels
