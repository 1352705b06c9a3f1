#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "susa/numerics/log.hpp"

int main(int argc, char** argv) {
  susa::log::set_min_level(susa::log::Level::warn);
  susa::log::set_sink([](const std::string&) {});
  doctest::Context context(argc, argv);
  return context.run();
}
