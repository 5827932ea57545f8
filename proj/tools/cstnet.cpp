#include "cstnet/cli.hpp"

int main(int argc, char** argv) { return cstnet::cli::main(argc, argv); }
