#include "relprop/cli/app.hpp"

int main(int argc, char** argv) { return relprop::cli::main(argc, argv); }
