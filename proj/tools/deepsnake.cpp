#include <iostream>

#include "deepsnake/cli.hpp"

int main(int argc, char** argv) { return deepsnake::run_cli(argc, argv, std::cout, std::cerr); }
