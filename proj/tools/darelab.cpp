#include <iostream>

#include "darelab/cli/commands.hpp"

int main(int argc, char** argv) { return darelab::run_cli(argc, argv, std::cout, std::cerr); }
