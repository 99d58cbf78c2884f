#include "bevfuse/cli/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return bevfuse::cli::run(args);
}
