#include "cdd/cli.hpp"

int main(int argc, char** argv) { return cdd::cli::run_cli(argc, argv); }
