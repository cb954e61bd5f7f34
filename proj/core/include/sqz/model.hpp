#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "sqz/autodiff.hpp"
#include "sqz/ops.hpp"

namespace sqz {

enum class LayerKind : std::uint8_t {
  kInput = 0,
  kConv = 1,
  kBatchNorm = 2,
  kRelu = 3,
  kMaxPool = 4,
  kConcat = 5,
  kGlobalAvgPool = 6,
  kFullyConnected = 7,
  kSoftmax = 8,
};

std::string_view to_string(LayerKind kind);

struct NamedParam {
  std::string name;
  Parameter<float> param;
  bool trainable = true;
};

// One node of the layer graph. `inputs` index earlier nodes, so the node
// vector is already in topological order.
//
//   kInput           channels, height, width
//   kConv            channels (filters), kernel, stride, pad; params weight [F,C,k,k], bias [F]
//   kBatchNorm       params gamma, beta, running_mean, running_var (the last two frozen)
//   kMaxPool         kernel, stride
//   kFullyConnected  channels (outputs); params weight [K,D], bias [K]
//   kSoftmax         classifier head marker; the loss is applied to its input
//
// `block` names the fire module a node belongs to (empty outside fires).
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::kInput;
  std::vector<int> inputs;
  int channels = 0;
  int kernel = 0;
  int stride = 1;
  int pad = 0;
  int height = 0;
  int width = 0;
  std::string block;
  std::vector<NamedParam> params;

  NamedParam& param(std::string_view pname);
  const NamedParam& param(std::string_view pname) const;
};

struct FireSpec {
  int squeeze_1x1 = 0;
  int expand_1x1 = 0;
  int expand_3x3 = 0;

  int output_channels() const { return expand_1x1 + expand_3x3; }
  friend bool operator==(const FireSpec&, const FireSpec&) = default;
};

// Filter counts of the SqueezeNet-style backbone. Max-pooling (3x3, stride 2)
// follows the stem and the fires listed in `pool_after_fire` (late
// downsampling).
struct ArchSchedule {
  int input_size = 113;
  int input_channels = 3;
  int stem_filters = 64;
  int stem_kernel = 3;
  int stem_stride = 1;
  int stem_pad = 1;
  std::vector<FireSpec> fires;
  std::vector<int> pool_after_fire;  // zero-based fire indices
  int embedding_filters = 1000;

  friend bool operator==(const ArchSchedule&, const ArchSchedule&) = default;
};

// SqueezeNet v1.1 counts with a stride-1 stem.
ArchSchedule full_schedule();
// Every filter count divided by `width_divisor` (floor). Throws ConfigError if
// the divisor is not 2, 4 or 8 or any count falls below 2.
ArchSchedule micro_schedule(int width_divisor);

// INI round trip of a schedule ([stem], [fireN], [embedding] sections).
ArchSchedule load_schedule(const std::filesystem::path& path);
void save_schedule(const ArchSchedule& schedule, const std::filesystem::path& path);

struct ModelStats {
  std::int64_t total_filters = 0;
  std::int64_t learnables = 0;           // every trainable scalar
  std::int64_t backbone_learnables = 0;  // learnables minus the class FC head
  std::int64_t embedding_dim = 0;
  std::int64_t model_bytes = 0;          // exact serialized checkpoint size
};

class ModelGraph {
 public:
  int add_layer(LayerSpec layer);

  std::vector<LayerSpec>& layers() { return layers_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  LayerSpec& layer(int index) { return layers_.at(static_cast<std::size_t>(index)); }
  const LayerSpec& layer(int index) const { return layers_.at(static_cast<std::size_t>(index)); }
  int size() const { return static_cast<int>(layers_.size()); }
  int find(std::string_view name) const;  // -1 when absent

  // Consumers of every node (reverse adjacency).
  std::vector<std::vector<int>> consumers() const;

  // Output channel count of every node. Throws SurgeryError naming the
  // offending edge when producer and consumer disagree or parameter shapes do
  // not match the attributes.
  std::vector<int> infer_channels() const;
  void validate() const { (void)infer_channels(); }

  int input_node() const;
  int embedding_node() const;  // the global-average-pool node
  int logits_node() const;     // the fully-connected head
  int num_classes() const;

  std::vector<Parameter<float>*> trainable_parameters();
  void zero_grad();

 private:
  std::vector<LayerSpec> layers_;
};

ModelGraph build_from_schedule(const ArchSchedule& schedule, int num_classes, std::uint64_t seed = 1);
ModelGraph build_full_config(int num_classes, std::uint64_t seed = 1);
ModelGraph build_micro_config(int num_classes, int width_divisor, std::uint64_t seed = 1);

ModelStats count_stats(const ModelGraph& model);

// Multiplies the output of node `first` by the mask (one factor per channel).
using ChannelMasks = std::map<int, std::vector<float>>;

struct ForwardOptions {
  NormMode mode = NormMode::kEval;
  bool update_running_stats = true;
  const ChannelMasks* masks = nullptr;
};

struct ForwardOutputs {
  Var<float> embedding;  // [N, embedding_dim], global-average-pool output
  Var<float> logits;     // [N, num_classes]
};

// Records the forward pass of `model` on `input` ([N, C, H, W]) onto `tape`.
// Train mode may update the batch-norm running statistics in place.
ForwardOutputs forward(Tape<float>& tape, ModelGraph& model, const Tensor& input,
                       const ForwardOptions& options = {});

// Eval-mode embeddings/logits without keeping gradients.
Tensor infer_embeddings(ModelGraph& model, const Tensor& input);
Tensor infer_logits(ModelGraph& model, const Tensor& input);

constexpr double kBatchNormMomentum = 0.1;
constexpr double kBatchNormEpsilon = 1e-5;

}  // namespace sqz
