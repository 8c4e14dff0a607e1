#include "cmt/location.hpp"

namespace cmt {

PixelCoordGrid make_pixel_grid(int64_t H, int64_t W) {
  PixelCoordGrid g;
  g.H = H;
  g.W = W;
  g.coords = Array(Shape{H * W, 2});
  for (int64_t i = 0; i < H; ++i)
    for (int64_t j = 0; j < W; ++j) {
      g.coords.at(i * W + j, 0) = (static_cast<double>(i) + 0.5) / static_cast<double>(H);
      g.coords.at(i * W + j, 1) = (static_cast<double>(j) + 0.5) / static_cast<double>(W);
    }
  return g;
}

Var affine(Var x, const AffineParams& p) { return add_rowvec(matmul(x, p.w), p.b); }

ReferenceState init_reference_state(Tape& tape, int64_t N, int64_t M) {
  ReferenceState s;
  s.M = M;
  s.e = tape.constant(Array(Shape{N, 2 * M}));
  s.r_c = sigmoid(s.e);
  return s;
}

ReferenceState update_reference_masks(const ReferenceState& state, Var centers,
                                      const RefMlpParams& mlp) {
  Var h = gelu(affine(centers, AffineParams{mlp.w1, mlp.b1}));
  Var delta = affine(h, AffineParams{mlp.w2, mlp.b2});
  ReferenceState out;
  out.M = state.M;
  out.e = add(state.e, delta);
  out.r_c = sigmoid(out.e);
  return out;
}

std::pair<Var, Var> inject_coordinates(Var F, Var C, const PixelCoordGrid& grid,
                                       const ReferenceState& ref, const AffineParams& convF,
                                       const AffineParams& convC) {
  Tape& tape = *F.tape;
  Var rp = tape.constant(grid.coords);
  Var newC = affine(concat(C, ref.r_c, 1), convC);
  Var newF = affine(concat(F, rp, 1), convF);
  return {newF, newC};
}

}  // namespace cmt
