#pragma once

#include <vector>

#include "avstyle/tensor.hpp"

namespace avstyle {

// All ops record their backward closure on the tape when any input requires
// grad. Shapes are strict; the only broadcasting anywhere is scalar-vs-tensor
// (scale/add_scalar) and the dedicated broadcast_spatial op.

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);              // [m,k]x[k,n] -> [m,n]
Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b);           // [m,k]x[n,k] -> [m,n]  (a * b^T)
Tensor linear(Tape& tape, const Tensor& w, const Tensor& x, const Tensor& b); // [m,k],[k],[m] -> [m]

// 3x3 kernel, zero padding 1. stride 1 keeps spatial size, stride 2 halves it.
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride = 1);

Tensor relu(Tape& tape, const Tensor& t);
Tensor tanh_act(Tape& tape, const Tensor& t);
Tensor sigmoid(Tape& tape, const Tensor& t);
Tensor softplus(Tape& tape, const Tensor& t);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& t, float s);
Tensor add_scalar(Tape& tape, const Tensor& t, float c);

// axes empty -> reduce everything to a scalar. Reduced axes are removed.
Tensor reduce_sum(Tape& tape, const Tensor& t, const std::vector<int>& axes = {});
Tensor reduce_mean(Tape& tape, const Tensor& t, const std::vector<int>& axes = {});

Tensor l2_normalize(Tape& tape, const Tensor& v);
Tensor l2_normalize_rows(Tape& tape, const Tensor& m);
Tensor cosine(Tape& tape, const Tensor& u, const Tensor& v);
Tensor frobenius_distance(Tape& tape, const Tensor& a, const Tensor& b);

Tensor upsample2x(Tape& tape, const Tensor& t);                           // [c,h,w] -> [c,2h,2w], nearest
Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b);     // [c1,h,w]+[c2,h,w] -> [c1+c2,h,w]
Tensor broadcast_spatial(Tape& tape, const Tensor& v, int h, int w);      // [z] -> [z,h,w]
Tensor reshape(Tape& tape, const Tensor& t, std::vector<int> new_shape);
// out[i] = in[index_map[i]]; index_map length == prod(new_shape).
Tensor reorder(Tape& tape, const Tensor& t, std::vector<int> new_shape, std::vector<int> index_map);

// Crop window (top-left y0,x0, size sh x sw in source pixels) resampled
// bilinearly to oh x ow; optional horizontal flip of the result.
Tensor crop_resize(Tape& tape, const Tensor& img, double y0, double x0, double sh, double sw,
                   int oh, int ow, bool hflip);

// Mean of scalar tensors with 64-bit accumulation; each input's gradient is 1/n.
Tensor mean_scalars(Tape& tape, const std::vector<Tensor>& terms);

} // namespace avstyle
