#include <iostream>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "cli.hpp"
#include "tlid/alloc.hpp"

int main(int argc, char** argv) {
  tlid::tune_allocator();
  spdlog::set_default_logger(spdlog::stderr_color_mt("tlid"));
  std::vector<std::string> args(argv + 1, argv + argc);
  return tlid::cli::run_cli(args, std::cout, std::cerr);
}
