#include "peis/harness.hpp"

int main(int argc, char** argv) { return peis::run_cli(argc, argv); }
