#include <iostream>
#include <string>
#include <vector>

#include "diffusereg/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return dreg::run_cli(args, std::cout, std::cerr);
}
