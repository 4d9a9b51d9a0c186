#include "amortda/tensor.hpp"

#include <cmath>

#if defined(__GLIBC__)
#include <malloc.h>
namespace {
// Tape nodes allocate/free many ~200kB blocks; keep those on the heap free
// lists instead of round-tripping through mmap.
struct MallocTuning {
  MallocTuning() {
    mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
  }
} malloc_tuning;
}  // namespace
#endif

namespace amortda {

void Tensor::check_finite(const char* what) const {
  for (double v : data_) {
    if (!std::isfinite(v)) throw Error(std::string(what) + ": non-finite value");
  }
}

}  // namespace amortda
