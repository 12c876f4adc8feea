#include "fconv/cli.hpp"

int main(int argc, char** argv) { return fconv::run(argc, argv); }
