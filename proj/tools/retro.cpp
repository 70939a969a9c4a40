#include "retro/pipeline.hpp"

int main(int argc, char** argv) { return retro::run_cli(argc, argv); }
