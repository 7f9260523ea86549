#include "r2d2/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return r2d2::run_cli(argc, argv, std::cout, std::cerr); }
