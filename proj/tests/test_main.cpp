#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "dmckn/autodiff.hpp"

int main(int argc, char** argv) {
  dmckn::ad::set_strict(true);
  doctest::Context ctx;
  ctx.applyCommandLine(argc, argv);
  return ctx.run();
}
