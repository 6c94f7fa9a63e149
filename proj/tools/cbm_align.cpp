#include "cbm_align/cli.hpp"

int main(int argc, char** argv) { return cbm_align::cli::run(argc, argv); }
