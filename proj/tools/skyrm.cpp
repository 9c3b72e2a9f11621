#include "skyrm/cli.hpp"

int main(int argc, char** argv) { return skyrm::cli::run_cli(argc, argv); }
