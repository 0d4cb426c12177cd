#include "thetaguard/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
    return thetaguard::run_cli(argc, argv, std::cout, std::cerr);
}
