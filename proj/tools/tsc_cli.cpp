#include "tsc/harness.hpp"

int main(int argc, char** argv) { return tsc::run_cli(argc, argv); }
