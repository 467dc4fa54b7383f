#include "cdpm/cli.hpp"

int main(int argc, char** argv) { return cdpm::cli::run(argc, argv); }
