#include "met/cli.hpp"

int main(int argc, char** argv) { return met::run_cli(argc, argv); }
