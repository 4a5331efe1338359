#include "rnnkit/cli.hpp"

int main(int argc, char** argv) { return rnnkit::run_cli(argc, argv); }
