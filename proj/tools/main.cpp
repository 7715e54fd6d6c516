#include "mvmc/cli.hpp"

int main(int argc, char** argv) { return mvmc::run_cli(argc, argv); }
