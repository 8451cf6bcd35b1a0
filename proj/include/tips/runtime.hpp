// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace tips {

// Keeps large activation buffers on the heap instead of fresh mmap pages.
// Training allocates and frees the same sizes every step, so returning them
// to the kernel only buys page faults. No-op outside glibc.
void configure_allocator();

}  // namespace tips
