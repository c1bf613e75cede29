#include "presem/cli.hpp"

int main(int argc, char** argv) { return presem::run(argc, argv); }
