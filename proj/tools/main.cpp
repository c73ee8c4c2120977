#include "vfl/cli.hpp"

int main(int argc, char** argv) { return vfl::cli::run(argc, argv); }
