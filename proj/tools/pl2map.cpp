#include "pl2map/cli.hpp"

int main(int argc, char** argv) { return pl2map::run_cli(argc, argv); }
