#include <iostream>

#include "tumorseg/cli.hpp"

int main(int argc, char** argv) {
  return tumorseg::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
