#include <iostream>

#include "winvit/cli.hpp"

int main(int argc, char** argv) { return winvit::cli::run_cli(argc, argv, std::cout, std::cerr); }
