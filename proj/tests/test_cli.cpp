// placeholder, replaced by the real CLI driver tests
#include <doctest.h>
TEST_CASE("cli placeholder") { CHECK(false); }
