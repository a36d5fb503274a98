#include "protodetect/cli.hpp"

int main(int argc, char** argv) { return protodetect::cli::run(argc, argv); }
