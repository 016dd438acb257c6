#include "mqvtg/cli.hpp"

int main(int argc, char** argv) { return mqvtg::run_cli(argc, argv); }
