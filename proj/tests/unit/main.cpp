// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "tips/runtime.hpp"

int main(int argc, char** argv) {
  tips::configure_allocator();
  doctest::Context ctx(argc, argv);
  return ctx.run();
}
