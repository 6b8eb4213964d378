#include "fusekit/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return fusekit::run_cli(argc, argv, std::cout, std::cerr); }
