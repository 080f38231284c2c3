#include <iostream>

#include "cli.hpp"
#include "fine/runtime.hpp"

int main(int argc, char** argv) {
    fine::tune_allocator();
    std::vector<std::string> args(argv + 1, argv + argc);
    return fine::cli::run_cli(args, std::cout, std::cerr);
}
