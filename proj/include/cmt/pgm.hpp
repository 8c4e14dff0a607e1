#pragma once

#include <string>

#include "cmt/tensor.hpp"

namespace cmt {

// ASCII (P2) grayscale image of a 2-D array, min-max normalized to 0..255;
// constant arrays come out all zero.
void write_pgm(const std::string& path, const Array& values, int64_t H, int64_t W);

// Round-trip reader for tests; returns values in 0..255.
Array read_pgm(const std::string& path, int64_t* H_out = nullptr, int64_t* W_out = nullptr);

}  // namespace cmt
