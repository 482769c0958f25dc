#include <iostream>

#include "automix/app.hpp"
#include "automix/tensor.hpp"

int main(int argc, char** argv) {
  automix::tune_allocator();
  return automix::app::run(argc, argv, std::cout, std::cerr);
}
