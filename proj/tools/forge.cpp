#include "forge/cli.hpp"

int main(int argc, char** argv) { return forge::cli::dispatch(argc, argv); }
