#include "idol/cli.hpp"

int main(int argc, char** argv) { return idol::cli::run(argc, argv); }
