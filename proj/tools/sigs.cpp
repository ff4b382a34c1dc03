#include <iostream>
#include <string>
#include <vector>

#include "sigs/harness.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return sigs::run_cli(args, std::cout, std::cerr);
}
