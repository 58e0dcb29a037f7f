#include <mfblowup/cli.hpp>

int main(int argc, char** argv) { return mfblowup::run_cli(argc, argv); }
