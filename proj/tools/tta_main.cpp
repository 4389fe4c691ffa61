#include "tta/cli.hpp"

int main(int argc, char** argv) { return tta::cli::dispatch(argc, argv); }
