#include "strwkv/cli.hpp"

int main(int argc, char** argv) { return strwkv::cli_main(argc, argv); }
