#include <iostream>
#include <string>
#include <vector>

#include "seqrl/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return seqrl::run_cli(args, std::cout, std::cerr);
}
