#include <iostream>

#include "countsteer/cli.hpp"

int main(int argc, char** argv) { return countsteer::run(argc, argv, std::cout, std::cerr); }
