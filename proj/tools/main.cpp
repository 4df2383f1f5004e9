#include "patchsweep/cli.hpp"

int main(int argc, char** argv) { return patchsweep::cli::run_cli(argc, argv); }
