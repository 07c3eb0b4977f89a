#include "hat/cli.hpp"

int main(int argc, char** argv) { return hat::cli::run(argc, argv); }
