#include <CLI11.hpp>

#include <iostream>

#include "corpus.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Regenerate the scripted demo fixtures"};
  std::string dir = "fixtures/demo";
  app.add_option("dir", dir, "output directory");
  CLI11_PARSE(app, argc, argv);
  try {
    tabprm::corpus::write_demo_fixtures(dir);
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return 1;
  }
  std::cout << "fixtures written to " << dir << '\n';
  return 0;
}
