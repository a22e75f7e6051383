#include <gtest/gtest.h>

#include "freqtune/tensor.hpp"

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  freqtune::set_strict_numerics(true);
  return RUN_ALL_TESTS();
}
