#include "cmt/pgm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace cmt {

void write_pgm(const std::string& path, const Array& values, int64_t H, int64_t W) {
  if (values.numel() != H * W)
    throw std::invalid_argument("write_pgm: " + std::to_string(values.numel()) +
                                " values for a " + std::to_string(H) + "x" + std::to_string(W) +
                                " raster");
  const auto [mn_it, mx_it] = std::minmax_element(values.data.begin(), values.data.end());
  const double mn = *mn_it, range = *mx_it - *mn_it;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "P2\n" << W << " " << H << "\n255\n";
  for (int64_t i = 0; i < H; ++i) {
    for (int64_t j = 0; j < W; ++j) {
      const double v = values.data[static_cast<size_t>(i * W + j)];
      const int g = range > 0 ? static_cast<int>(std::lround((v - mn) / range * 255.0)) : 0;
      out << g << (j + 1 < W ? ' ' : '\n');
    }
  }
  out.close();
  if (!out) throw std::runtime_error("write failure: " + path);
}

Array read_pgm(const std::string& path, int64_t* H_out, int64_t* W_out) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::string magic;
  int64_t W = 0, H = 0, maxval = 0;
  in >> magic >> W >> H >> maxval;
  if (magic != "P2" || W <= 0 || H <= 0 || maxval != 255)
    throw std::runtime_error("not an 8-bit P2 image: " + path);
  Array a(Shape{H, W});
  for (double& v : a.data)
    if (!(in >> v)) throw std::runtime_error("truncated P2 image: " + path);
  if (H_out) *H_out = H;
  if (W_out) *W_out = W;
  return a;
}

}  // namespace cmt
