#include "declutter/cli.hpp"

#include <malloc.h>

int main(int argc, char** argv) {
  // Training allocates large per-step buffers; keep freed memory in the heap
  // instead of returning it to the kernel every iteration.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return declutter::run(argc, argv);
}
