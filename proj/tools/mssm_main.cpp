#include "mssm/cli.hpp"

int main(int argc, char** argv) { return mssm::run_cli(argc, argv); }
