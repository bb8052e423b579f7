#include <iostream>

#include "tspsae/pipeline/pipeline.hpp"

int main(int argc, char** argv) { return tspsae::pipeline::run_cli(argc, argv, std::cout, std::cerr); }
