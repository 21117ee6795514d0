#pragma once

namespace fsens {

// Keeps large tensor buffers in the heap instead of fresh mmap/munmap pairs
// per allocation. No-op outside glibc. Call once at startup.
void tune_allocator();

}  // namespace fsens
