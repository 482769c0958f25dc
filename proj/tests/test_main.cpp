#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "automix/tensor.hpp"

int main(int argc, char** argv) {
  automix::tune_allocator();
  doctest::Context context(argc, argv);
  return context.run();
}
