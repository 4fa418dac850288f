#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace smart {

/// Keeps large tensor buffers on the heap instead of fresh mmap regions, which
/// avoids a page-fault storm when activations are freed and reallocated every
/// step. No-op outside glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
  mallopt(M_TOP_PAD, 64 * 1024 * 1024);
#endif
}

}  // namespace smart
