#include "tssc/cli.hpp"

int main(int argc, char** argv) { return tssc::cli::run(argc, argv); }
