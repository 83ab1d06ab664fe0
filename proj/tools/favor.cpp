#include "favor/cli.hpp"

int main(int argc, char** argv) { return favor::cli::run(argc, argv); }
