#pragma once

namespace tlid {

/// Keeps large activation buffers on the heap instead of fresh mmap pages so
/// repeated training steps reuse memory. No-op outside glibc.
void tune_allocator();

}  // namespace tlid
