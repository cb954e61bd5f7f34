#pragma once

// Independent reference implementations used by the unit and acceptance
// suites. Nothing here calls the code under test for the quantity it checks.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sqz/model.hpp"
#include "sqz/rng.hpp"
#include "sqz/tensor.hpp"
#include "sqz/verification.hpp"

namespace sqz::oracle {

Tensor64 random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0);

// Direct sliding-window cross-correlation.
Tensor64 conv2d(const Tensor64& input, const Tensor64& weights, const Tensor64& bias, int stride, int pad);

// Per-channel batch statistics (biased variance) applied with gamma/beta.
Tensor64 batch_norm_train(const Tensor64& input, const Tensor64& gamma, const Tensor64& beta, double epsilon);

// Largest elementwise |analytic - fd| / max(1, |fd|) over the inputs and
// parameters of one randomised instance of `layer`, with central differences
// in double precision.
struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};
GradCheck gradient_check(const std::string& layer, std::uint64_t seed);
const std::vector<std::string>& gradient_layers();

// FAR/FRR evaluated at every candidate threshold by counting, crossing found
// by scanning FAR - FRR as doubles.
double eer_sweep(std::span<const double> genuine, std::span<const double> impostor);

// Enumerates every ordered (identity, template, identity, template) pair of a
// pose pair and keeps those the protocol admits.
struct PairCounts {
  std::size_t genuine = 0;
  std::size_t impostor = 0;
};
PairCounts enumerate_protocol(int identities, int templates_per_pose, bool same_pose, int window);

// Small fire-module network: stride-1 stem, two or three fires, a pool after
// the first fire, 1x1 embedding conv; widths drawn from `seed`.
ArchSchedule random_small_schedule(std::uint64_t seed, int input_size = 15);

// data -> conv(filters, in_channels, 3x3, pad 1) -> bn -> relu -> gap ->
// fc(classes) -> softmax, random conv and fc weights.
ModelGraph single_conv_model(int filters, int in_channels, int classes, std::uint64_t seed, int input_size = 5);

// Per-group Taylor score recomputed from the raw weight/bias/gamma/beta
// tensors and their stored gradients, one conv filter at a time in layer
// order. Products and sums in double, members in the order weight row, bias,
// gamma, beta.
std::vector<double> taylor_from_dump(const ModelGraph& model);

// Gaussian direction of unit L2 norm.
std::vector<float> unit_vector(std::size_t dim, Rng& rng);

// Random unit-norm descriptors for `identities` x 3 poses x `per_pose`.
PoseDescriptors random_pose_descriptors(int identities, int per_pose, std::uint64_t seed, std::size_t dim = 8);

// Fills batch-norm running statistics and biases with random values so eval
// mode is not the identity.
void randomize_model(ModelGraph& model, std::uint64_t seed);

}  // namespace sqz::oracle
