#include <string>
#include <vector>

#include "bpoem/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return bpoem::cli::run(std::move(args));
}
