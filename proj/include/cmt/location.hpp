#pragma once

#include "cmt/tensor.hpp"

// Location-sensitive clustering support: per-center reference masks predicted
// residually from the centers, and coordinate injection for pixels/centers.

namespace cmt {

// Fixed per-resolution pixel coordinate grid, HW x 2 rows of
// ((i+0.5)/H, (j+0.5)/W). Never participates in gradients.
struct PixelCoordGrid {
  int64_t H = 0, W = 0;
  Array coords;  // HW x 2
};

PixelCoordGrid make_pixel_grid(int64_t H, int64_t W);

// e is the pre-sigmoid embedding carried across decoder stages; r_c its
// sigmoid. Layout per center: M h-coordinates then M w-coordinates.
struct ReferenceState {
  Var e;
  Var r_c;
  int64_t M = 0;
};

// Two affine layers with GeLU between, D -> D -> 2M, output layer zero-init.
struct RefMlpParams {
  Var w1, b1, w2, b2;
};

// per-row affine map (1x1 convolution)
struct AffineParams {
  Var w;  // in x out
  Var b;  // 1 x out
};

Var affine(Var x, const AffineParams& p);

// e starts at zero so the initial reference mask is all-0.5.
ReferenceState init_reference_state(Tape& tape, int64_t N, int64_t M);

// e' = e + MLP(C), r_c' = sigmoid(e')
ReferenceState update_reference_masks(const ReferenceState& state, Var centers,
                                      const RefMlpParams& mlp);

// C' = Affine(Concat(C, r_c)), F' = Affine(Concat(F, r_p))
std::pair<Var, Var> inject_coordinates(Var F, Var C, const PixelCoordGrid& grid,
                                       const ReferenceState& ref, const AffineParams& convF,
                                       const AffineParams& convC);

}  // namespace cmt
