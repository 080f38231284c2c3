#include "fine/runtime.hpp"

#include <cstdlib>  // defines __GLIBC__ on glibc

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace fine {

void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 32 << 20);  // glibc caps the threshold here
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace fine
