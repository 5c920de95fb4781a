#include "steerlab/cli.hpp"

int main(int argc, char** argv) { return steerlab::cli::run(argc, argv); }
