#include <iostream>
#include <string>
#include <vector>

#include "m3/cli/commands.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  return m3::cli::run(args, std::cout, std::cerr);
}
