#pragma once

namespace fine {

// Keeps freed tensor buffers on the heap instead of returning them to the OS.
// Activations of a few MB are allocated and freed every step; with glibc
// defaults each one comes back as fresh mmap pages and the page faults cost
// more than the arithmetic. Call once from main. No-op off glibc.
void tune_allocator();

}  // namespace fine
