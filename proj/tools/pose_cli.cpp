#include "pose/cli.hpp"

int main(int argc, char** argv) { return pose::cli::run(argc, argv); }
