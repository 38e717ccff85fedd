#include <string>
#include <vector>

#include "hcfusion/cli.hpp"

int main(int argc, char** argv) {
  return hcfusion::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
