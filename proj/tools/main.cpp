#include <iostream>

#include "semg/cli.hpp"

int main(int argc, char** argv) { return semg::cli::run(argc, argv, std::cout, std::cerr); }
