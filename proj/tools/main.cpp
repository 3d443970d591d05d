#include "cli.hpp"

int main(int argc, char** argv) { return fruitgrader::cli::cli_main(argc, argv); }
