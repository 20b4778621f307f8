#include "pipmm/cli.hpp"

int main(int argc, char** argv) { return pipmm::run_cli(argc, argv); }
