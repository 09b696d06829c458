#include <iostream>
#include <string>
#include <vector>

#include "obs/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return obs::run_command(args, std::cout, std::cerr);
}
