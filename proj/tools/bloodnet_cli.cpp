#include <iostream>

#include "bloodnet/cli.hpp"

int main(int argc, char** argv) { return bloodnet::dispatch(argc, argv, std::cout, std::cerr); }
