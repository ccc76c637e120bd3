#include "hjbcert/cli.hpp"

int main(int argc, char** argv) { return hjbcert::cli::main(argc, argv); }
