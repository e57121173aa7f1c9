#include "ctxlm/cli.hpp"

int main(int argc, char** argv) { return ctxlm::cli::run(argc, argv); }
