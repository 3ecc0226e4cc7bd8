#include "lfm/experiment.hpp"

int main(int argc, char** argv) { return lfm::experiment::cli_main(argc, argv); }
