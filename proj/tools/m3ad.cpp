#include <iostream>

#include "m3ad/cli.hpp"

int main(int argc, char** argv) { return m3ad::run_cli(argc, argv, std::cout, std::cerr); }
