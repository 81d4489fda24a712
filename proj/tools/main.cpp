#include <iostream>
#include <string>
#include <vector>

#include "tvproxy/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return tvproxy::run_command(args, std::cout, std::cerr);
}
