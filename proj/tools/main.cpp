#include <iostream>

#include "commands.hpp"

int main(int argc, char** argv) { return cfp::cli::run(argc, argv, std::cerr); }
