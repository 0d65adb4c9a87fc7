#include "qdm/cli.hpp"

int main(int argc, char** argv) { return qdm::dispatch(argc, argv); }
