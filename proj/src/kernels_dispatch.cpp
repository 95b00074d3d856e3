#include "mcpflow/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace mcpflow::kernels {

const Ops* avx2_ops_impl();

namespace {

bool cpu_has_avx2_fma() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const Ops& select() {
  const Ops* avx2 = cpu_has_avx2_fma() ? avx2_ops_impl() : nullptr;
  if (const char* env = std::getenv("MCPFLOW_KERNEL")) {
    if (std::strcmp(env, "scalar") == 0) return scalar_ops();
    if (std::strcmp(env, "avx2") == 0 && avx2) return *avx2;
  }
  return avx2 ? *avx2 : scalar_ops();
}

}  // namespace

const Ops* avx2_ops() { return cpu_has_avx2_fma() ? avx2_ops_impl() : nullptr; }

const Ops& active() {
  static const Ops& ops = select();
  return ops;
}

}  // namespace mcpflow::kernels
