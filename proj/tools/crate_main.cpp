#include <vector>
#include <string>

#include "crate/cli.hpp"

int main(int argc, char** argv) {
  return crate::cli_dispatch(std::vector<std::string>(argv + 1, argv + argc));
}
