#include <iostream>

#include "capgnn/cli.hpp"

int main(int argc, char** argv) { return capgnn::run_cli(argc, argv, std::cout, std::cerr); }
