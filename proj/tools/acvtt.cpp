#include <iostream>

#include "acvtt/cli.hpp"

int main(int argc, char** argv) {
    return acvtt::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
