#include <iostream>

#include <CLI11.hpp>

#include "acceptance.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite: one PASS/FAIL line per criterion"};
  scenelabel::AcceptanceOptions opt;
  app.add_option("--cache", opt.cache_dir, "Working directory for warm starts and runs");
  app.add_flag("--reuse-cache", opt.reuse_cache, "Keep warm starts from an earlier run");
  app.add_option("--only", opt.only, "Run criteria whose name contains this");
  app.add_option("--cli", opt.cli_path, "Path to the scenelabel command-line tool");
  CLI11_PARSE(app, argc, argv);
  return scenelabel::RunAcceptance(opt, std::cout);
}
