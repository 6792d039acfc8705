#include <string>
#include <vector>

#include "tpmm/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return tpmm::dispatch(std::move(args));
}
