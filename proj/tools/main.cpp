#include "cli.hpp"

int main(int argc, char** argv) { return taxcl::cli::run_cli(argc, argv); }
