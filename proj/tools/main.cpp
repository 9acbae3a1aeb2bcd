#include <iostream>

#include "wrangan/cli.hpp"

int main(int argc, char** argv) { return wrangan::cli::run(argc, argv, std::cout, std::cerr); }
