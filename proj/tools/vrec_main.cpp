#include "cli.hpp"

int main(int argc, char** argv) { return vrec::cli::run_cli(argc, argv); }
