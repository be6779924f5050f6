#include <iostream>

#include "ditopt/app/commands.hpp"

int main(int argc, char** argv) {
  return ditopt::app::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
