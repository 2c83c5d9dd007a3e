#include "vdt/cli.hpp"

int main(int argc, char** argv) {
  return vdt::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
