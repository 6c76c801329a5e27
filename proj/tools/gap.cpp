#include "gap/cli.hpp"

int main(int argc, char** argv) { return gap::cli::main(argc, argv); }
