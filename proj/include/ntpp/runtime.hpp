#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ntpp {

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// kernel after every tape. Tapes allocate and release many multi-megabyte
/// buffers per step, and with glibc's defaults each of them is a fresh
/// mmap, which on small machines costs as much as the arithmetic.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 256 << 20);
#endif
}

} // namespace ntpp
