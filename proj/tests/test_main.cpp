#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"
#include "fine/runtime.hpp"

int main(int argc, char** argv) {
    fine::tune_allocator();
    doctest::Context context(argc, argv);
    return context.run();
}
