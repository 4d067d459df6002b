#include "owt/cli.hpp"

int main(int argc, char** argv) { return owt::cli::run(argc, argv); }
