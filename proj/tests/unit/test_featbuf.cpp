#include <catch2/catch_amalgamated.hpp>
#include "featdrive/pipeline/pipeline.hpp"
TEST_CASE("placeholder_featbuf") { REQUIRE(true); }
