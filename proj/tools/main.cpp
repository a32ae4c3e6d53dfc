#include "cleftnet/cli.hpp"

int main(int argc, char** argv) { return cleftnet::run_cli(argc, argv); }
