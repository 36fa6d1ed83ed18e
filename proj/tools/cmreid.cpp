#include <iostream>

#include "cmreid/cli.hpp"

int main(int argc, char** argv) { return cmreid::cli::run(argc, argv, std::cout, std::cerr); }
