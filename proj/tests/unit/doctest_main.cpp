#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include <spdlog/spdlog.h>

#include <cstdlib>

int main(int argc, char** argv) {
    // Progress chatter from training loops drowns out test failures; POPGRID_TEST_LOG=info restores it.
    const char* level = std::getenv("POPGRID_TEST_LOG");
    spdlog::set_level(level ? spdlog::level::from_str(level) : spdlog::level::warn);
    doctest::Context ctx(argc, argv);
    return ctx.run();
}
