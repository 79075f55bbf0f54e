#include "maven/cli.hpp"

int main(int argc, char** argv) { return maven::cli::run(argc, argv); }
