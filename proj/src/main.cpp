#include "diffanalog/cli.hpp"

int main(int argc, char** argv) { return diffanalog::cli::main(argc, argv); }
