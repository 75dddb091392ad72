#include <iostream>

#include "fd2/cli.hpp"

int main(int argc, char** argv) { return fd2::run_cli(argc, argv, std::cout, std::cerr); }
