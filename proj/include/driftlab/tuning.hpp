#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace driftlab {

// Bundle sweeps allocate and free tens of MB per outer path; with default
// thresholds glibc hands those chunks straight back to the OS and the run
// spends more time in page faults than in simulation. Keep the arena warm.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
#endif
}

}  // namespace driftlab
