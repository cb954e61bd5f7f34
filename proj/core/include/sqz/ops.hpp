#pragma once

#include <span>
#include <string>
#include <vector>

#include "sqz/autodiff.hpp"

namespace sqz {

struct Conv2dOptions {
  int stride = 1;
  int pad = 0;
  std::string name = "conv";  // used in error messages
};

// Cross-correlation over NCHW input with [F, C, kH, kW] weights and [F] bias.
// Output spatial size is floor((H + 2*pad - kH) / stride) + 1.
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weights, Var<T> bias, const Conv2dOptions& options);

enum class NormMode { kTrain, kEval };

struct BatchNormOptions {
  NormMode mode = NormMode::kEval;
  bool update_running_stats = true;
  double momentum = 0.1;
  double epsilon = 1e-5;
  std::string name = "bn";
};

// Per-channel normalisation of NCHW (or NC) input. Train mode normalises by
// the biased batch statistics and, when update_running_stats is set, moves the
// running estimates by `momentum`. Eval mode uses the running estimates.
template <typename T>
Var<T> batch_norm(Var<T> input, Var<T> gamma, Var<T> beta, BasicTensor<T>& running_mean,
                  BasicTensor<T>& running_var, const BatchNormOptions& options);

template <typename T>
Var<T> relu(Var<T> input);

// Floor-mode max pooling without padding. Ties route the gradient to the
// first maximal element in scan order.
template <typename T>
Var<T> max_pool(Var<T> input, int kernel, int stride);

// [N, C, H, W] -> [N, C]
template <typename T>
Var<T> global_avg_pool(Var<T> input);

// Concatenates along axis 1. Inputs must agree on N and on trailing dims.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& inputs);

// Channels [begin, end) along axis 1.
template <typename T>
Var<T> slice_channels(Var<T> input, std::size_t begin, std::size_t end);

// Multiplies channel c (axis 1) by scale[c]. Used for functional ablation.
template <typename T>
Var<T> scale_channels(Var<T> input, std::vector<T> scale);

// [N, D] x [K, D]^T + [K] -> [N, K]
template <typename T>
Var<T> fully_connected(Var<T> input, Var<T> weights, Var<T> bias);

// Mean over the batch of -log softmax(logits)[label]. Labels index axis 1.
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const int> labels);

// Sum of all elements, as a [1] tensor.
template <typename T>
Var<T> sum(Var<T> input);

// Out-of-tape helpers on plain tensors.
template <typename T>
BasicTensor<T> hflip(const BasicTensor<T>& nchw);

// Row-wise argmax of an [N, K] tensor.
template <typename T>
std::vector<int> argmax_rows(const BasicTensor<T>& logits);

}  // namespace sqz
