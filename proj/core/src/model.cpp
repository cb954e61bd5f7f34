#include "sqz/model.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cmath>
#include <random>

#include "sqz/checkpoint.hpp"
#include "sqz/rng.hpp"

namespace sqz {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kInput: return "input";
    case LayerKind::kConv: return "conv";
    case LayerKind::kBatchNorm: return "batchnorm";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kMaxPool: return "maxpool";
    case LayerKind::kConcat: return "concat";
    case LayerKind::kGlobalAvgPool: return "gap";
    case LayerKind::kFullyConnected: return "fc";
    case LayerKind::kSoftmax: return "softmax";
  }
  return "unknown";
}

NamedParam& LayerSpec::param(std::string_view pname) {
  for (auto& p : params) {
    if (p.name == pname) return p;
  }
  throw Error("layer '" + name + "' has no parameter '" + std::string(pname) + "'");
}

const NamedParam& LayerSpec::param(std::string_view pname) const {
  return const_cast<LayerSpec*>(this)->param(pname);
}

// ---------------------------------------------------------------------------
// Schedules

ArchSchedule full_schedule() {
  ArchSchedule s;
  s.fires = {{16, 64, 64},   {16, 64, 64},   {32, 128, 128}, {32, 128, 128},
             {48, 192, 192}, {48, 192, 192}, {64, 256, 256}, {64, 256, 256}};
  s.pool_after_fire = {1, 3};
  return s;
}

ArchSchedule micro_schedule(int width_divisor) {
  if (width_divisor != 2 && width_divisor != 4 && width_divisor != 8) {
    throw ConfigError("width_divisor must be 2, 4 or 8, got " + std::to_string(width_divisor));
  }
  ArchSchedule s = full_schedule();
  auto scale = [width_divisor](int count, const std::string& where) {
    const int scaled = count / width_divisor;
    if (scaled < 2) {
      throw ConfigError(where + ": " + std::to_string(count) + " / " + std::to_string(width_divisor) +
                        " leaves fewer than 2 filters");
    }
    return scaled;
  };
  s.stem_filters = scale(s.stem_filters, "stem");
  for (std::size_t i = 0; i < s.fires.size(); ++i) {
    const std::string where = "fire" + std::to_string(i + 2);
    s.fires[i].squeeze_1x1 = scale(s.fires[i].squeeze_1x1, where);
    s.fires[i].expand_1x1 = scale(s.fires[i].expand_1x1, where);
    s.fires[i].expand_3x3 = scale(s.fires[i].expand_3x3, where);
  }
  s.embedding_filters = scale(s.embedding_filters, "embedding");
  return s;
}

ArchSchedule load_schedule(const std::filesystem::path& path) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("cannot read schedule " + path.string() + ": " + e.message());
  }
  try {
    ArchSchedule s;
    s.fires.clear();
    s.input_size = tree.get<int>("input.size");
    s.input_channels = tree.get<int>("input.channels");
    s.stem_filters = tree.get<int>("stem.filters");
    s.stem_kernel = tree.get<int>("stem.kernel");
    s.stem_stride = tree.get<int>("stem.stride");
    s.stem_pad = tree.get<int>("stem.pad");
    for (int i = 2;; ++i) {
      const auto section = tree.get_child_optional("fire" + std::to_string(i));
      if (!section) break;
      FireSpec f{section->get<int>("squeeze1x1"), section->get<int>("expand1x1"),
                 section->get<int>("expand3x3")};
      if (section->get<bool>("pool_after", false)) s.pool_after_fire.push_back(i - 2);
      s.fires.push_back(f);
    }
    s.embedding_filters = tree.get<int>("embedding.filters");
    if (s.fires.empty()) throw ConfigError("schedule " + path.string() + " defines no fire modules");
    return s;
  } catch (const pt::ptree_error& e) {
    throw ConfigError("schedule " + path.string() + ": " + e.what());
  }
}

void save_schedule(const ArchSchedule& s, const std::filesystem::path& path) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  tree.put("input.size", s.input_size);
  tree.put("input.channels", s.input_channels);
  tree.put("stem.filters", s.stem_filters);
  tree.put("stem.kernel", s.stem_kernel);
  tree.put("stem.stride", s.stem_stride);
  tree.put("stem.pad", s.stem_pad);
  for (std::size_t i = 0; i < s.fires.size(); ++i) {
    const std::string sec = "fire" + std::to_string(i + 2);
    tree.put(sec + ".squeeze1x1", s.fires[i].squeeze_1x1);
    tree.put(sec + ".expand1x1", s.fires[i].expand_1x1);
    tree.put(sec + ".expand3x3", s.fires[i].expand_3x3);
    const bool pool = std::find(s.pool_after_fire.begin(), s.pool_after_fire.end(),
                                static_cast<int>(i)) != s.pool_after_fire.end();
    tree.put(sec + ".pool_after", pool);
  }
  tree.put("embedding.filters", s.embedding_filters);
  try {
    pt::write_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw IoError("cannot write schedule " + path.string() + ": " + e.message());
  }
}

// ---------------------------------------------------------------------------
// Graph

int ModelGraph::add_layer(LayerSpec layer) {
  for (int in : layer.inputs) {
    if (in < 0 || in >= size()) {
      throw Error("layer '" + layer.name + "' references unknown input " + std::to_string(in));
    }
  }
  if (find(layer.name) >= 0) throw Error("duplicate layer name '" + layer.name + "'");
  layers_.push_back(std::move(layer));
  return size() - 1;
}

int ModelGraph::find(std::string_view name) const {
  for (int i = 0; i < size(); ++i) {
    if (layers_[static_cast<std::size_t>(i)].name == name) return i;
  }
  return -1;
}

std::vector<std::vector<int>> ModelGraph::consumers() const {
  std::vector<std::vector<int>> out(layers_.size());
  for (int i = 0; i < size(); ++i) {
    for (int in : layer(i).inputs) out[static_cast<std::size_t>(in)].push_back(i);
  }
  return out;
}

namespace {

[[noreturn]] void edge_error(const LayerSpec& producer, const LayerSpec& consumer, int have, std::size_t want) {
  throw SurgeryError("edge " + producer.name + " -> " + consumer.name + ": producer has " +
                     std::to_string(have) + " channels, consumer expects " + std::to_string(want));
}

void expect_shape(const LayerSpec& layer, std::string_view pname, const Shape& want) {
  const auto& have = layer.param(pname).param.value.shape();
  if (have != want) {
    throw SurgeryError("layer " + layer.name + ": parameter " + std::string(pname) + " has shape " +
                       shape_str(have) + ", expected " + shape_str(want));
  }
}

}  // namespace

std::vector<int> ModelGraph::infer_channels() const {
  std::vector<int> ch(layers_.size(), 0);
  for (int i = 0; i < size(); ++i) {
    const LayerSpec& l = layer(i);
    auto in_ch = [&](std::size_t k) { return ch[static_cast<std::size_t>(l.inputs.at(k))]; };
    auto producer = [&](std::size_t k) -> const LayerSpec& { return layer(l.inputs.at(k)); };
    const bool needs_input = l.kind != LayerKind::kInput;
    if (needs_input && l.inputs.empty()) throw SurgeryError("layer " + l.name + " has no inputs");
    if (l.kind != LayerKind::kConcat && l.kind != LayerKind::kInput && l.inputs.size() != 1) {
      throw SurgeryError("layer " + l.name + " must have exactly one input");
    }
    int out = 0;
    switch (l.kind) {
      case LayerKind::kInput:
        out = l.channels;
        break;
      case LayerKind::kConv: {
        if (l.channels < 1) throw SurgeryError("layer " + l.name + " has no filters");
        const auto& w = l.param("weight").param.value;
        if (w.rank() != 4) throw SurgeryError("layer " + l.name + ": weight must be rank 4");
        if (static_cast<int>(w.dim(1)) != in_ch(0)) edge_error(producer(0), l, in_ch(0), w.dim(1));
        const auto c = static_cast<std::size_t>(l.channels);
        const auto k = static_cast<std::size_t>(l.kernel);
        expect_shape(l, "weight", {c, w.dim(1), k, k});
        expect_shape(l, "bias", {c});
        out = l.channels;
        break;
      }
      case LayerKind::kBatchNorm: {
        const std::size_t c = l.param("gamma").param.value.size();
        if (static_cast<int>(c) != in_ch(0)) edge_error(producer(0), l, in_ch(0), c);
        for (const char* p : {"gamma", "beta", "running_mean", "running_var"}) expect_shape(l, p, {c});
        out = in_ch(0);
        break;
      }
      case LayerKind::kRelu:
      case LayerKind::kMaxPool:
      case LayerKind::kGlobalAvgPool:
      case LayerKind::kSoftmax:
        out = in_ch(0);
        break;
      case LayerKind::kConcat:
        for (std::size_t k = 0; k < l.inputs.size(); ++k) out += in_ch(k);
        break;
      case LayerKind::kFullyConnected: {
        const auto& w = l.param("weight").param.value;
        if (w.rank() != 2) throw SurgeryError("layer " + l.name + ": weight must be rank 2");
        if (static_cast<int>(w.dim(1)) != in_ch(0)) edge_error(producer(0), l, in_ch(0), w.dim(1));
        expect_shape(l, "bias", {static_cast<std::size_t>(l.channels)});
        expect_shape(l, "weight", {static_cast<std::size_t>(l.channels), w.dim(1)});
        out = l.channels;
        break;
      }
    }
    if (out < 1) throw SurgeryError("layer " + l.name + " ends up with no channels");
    ch[static_cast<std::size_t>(i)] = out;
  }
  return ch;
}

namespace {

int find_kind(const ModelGraph& g, LayerKind kind, const char* what) {
  int found = -1;
  for (int i = 0; i < g.size(); ++i) {
    if (g.layer(i).kind == kind) {
      if (found >= 0) throw Error(std::string("model has more than one ") + what + " node");
      found = i;
    }
  }
  if (found < 0) throw Error(std::string("model has no ") + what + " node");
  return found;
}

}  // namespace

int ModelGraph::input_node() const { return find_kind(*this, LayerKind::kInput, "input"); }
int ModelGraph::embedding_node() const { return find_kind(*this, LayerKind::kGlobalAvgPool, "global-average-pool"); }
int ModelGraph::logits_node() const { return find_kind(*this, LayerKind::kFullyConnected, "fully-connected"); }
int ModelGraph::num_classes() const { return layer(logits_node()).channels; }

std::vector<Parameter<float>*> ModelGraph::trainable_parameters() {
  std::vector<Parameter<float>*> out;
  for (auto& l : layers_) {
    for (auto& p : l.params) {
      if (p.trainable) out.push_back(&p.param);
    }
  }
  return out;
}

void ModelGraph::zero_grad() {
  for (auto* p : trainable_parameters()) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Builders

namespace {

class Builder {
 public:
  Builder(ModelGraph& g, std::uint64_t seed) : g_(g), seed_(seed) {}

  int input(int channels, int size) {
    LayerSpec l;
    l.name = "data";
    l.kind = LayerKind::kInput;
    l.channels = channels;
    l.height = size;
    l.width = size;
    return g_.add_layer(std::move(l));
  }

  // conv -> batch norm -> relu; returns the relu node.
  int conv_bn_relu(const std::string& name, int in, int in_channels, int filters, int kernel,
                   int stride, int pad, const std::string& block) {
    LayerSpec conv;
    conv.name = name;
    conv.kind = LayerKind::kConv;
    conv.inputs = {in};
    conv.channels = filters;
    conv.kernel = kernel;
    conv.stride = stride;
    conv.pad = pad;
    conv.block = block;
    const auto f = static_cast<std::size_t>(filters);
    const auto c = static_cast<std::size_t>(in_channels);
    const auto k = static_cast<std::size_t>(kernel);
    Tensor w(Shape{f, c, k, k});
    // He-normal initialisation.
    Rng rng = make_rng(seed_, name);
    std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(c * k * k)));
    for (float& v : w.values()) v = dist(rng);
    conv.params.push_back({"weight", Parameter<float>(std::move(w)), true});
    conv.params.push_back({"bias", Parameter<float>(Tensor(Shape{f})), true});
    const int conv_idx = g_.add_layer(std::move(conv));

    LayerSpec bn;
    bn.name = name + "_bn";
    bn.kind = LayerKind::kBatchNorm;
    bn.inputs = {conv_idx};
    bn.block = block;
    bn.params.push_back({"gamma", Parameter<float>(Tensor(Shape{f}, 1.0f)), true});
    bn.params.push_back({"beta", Parameter<float>(Tensor(Shape{f})), true});
    bn.params.push_back({"running_mean", Parameter<float>(Tensor(Shape{f})), false});
    bn.params.push_back({"running_var", Parameter<float>(Tensor(Shape{f}, 1.0f)), false});
    const int bn_idx = g_.add_layer(std::move(bn));

    return simple(name + "_relu", LayerKind::kRelu, bn_idx, block);
  }

  int simple(const std::string& name, LayerKind kind, int in, const std::string& block = {}) {
    LayerSpec l;
    l.name = name;
    l.kind = kind;
    l.inputs = {in};
    l.block = block;
    return g_.add_layer(std::move(l));
  }

  int max_pool(const std::string& name, int in) {
    LayerSpec l;
    l.name = name;
    l.kind = LayerKind::kMaxPool;
    l.inputs = {in};
    l.kernel = 3;
    l.stride = 2;
    return g_.add_layer(std::move(l));
  }

  // squeeze 1x1 -> {expand 1x1, expand 3x3} -> concat (1x1 block first).
  int fire(const std::string& name, int in, int in_channels, const FireSpec& spec) {
    if (spec.squeeze_1x1 < 1 || spec.expand_1x1 < 1 || spec.expand_3x3 < 1) {
      throw ConfigError(name + ": fire filter counts must be >= 1");
    }
    const int sq = conv_bn_relu(name + "/squeeze1x1", in, in_channels, spec.squeeze_1x1, 1, 1, 0, name);
    const int e1 = conv_bn_relu(name + "/expand1x1", sq, spec.squeeze_1x1, spec.expand_1x1, 1, 1, 0, name);
    const int e3 = conv_bn_relu(name + "/expand3x3", sq, spec.squeeze_1x1, spec.expand_3x3, 3, 1, 1, name);
    LayerSpec cat;
    cat.name = name + "/concat";
    cat.kind = LayerKind::kConcat;
    cat.inputs = {e1, e3};
    cat.block = name;
    return g_.add_layer(std::move(cat));
  }

  int fully_connected(const std::string& name, int in, int in_features, int outputs) {
    LayerSpec l;
    l.name = name;
    l.kind = LayerKind::kFullyConnected;
    l.inputs = {in};
    l.channels = outputs;
    const auto k = static_cast<std::size_t>(outputs);
    const auto d = static_cast<std::size_t>(in_features);
    Tensor w(Shape{k, d});
    Rng rng = make_rng(seed_, name);
    std::normal_distribution<float> dist(0.0f, std::sqrt(1.0f / static_cast<float>(d)));
    for (float& v : w.values()) v = dist(rng);
    l.params.push_back({"weight", Parameter<float>(std::move(w)), true});
    l.params.push_back({"bias", Parameter<float>(Tensor(Shape{k})), true});
    return g_.add_layer(std::move(l));
  }

 private:
  ModelGraph& g_;
  std::uint64_t seed_;
};

}  // namespace

ModelGraph build_from_schedule(const ArchSchedule& s, int num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2, got " + std::to_string(num_classes));
  ModelGraph g;
  Builder b(g, seed);
  int x = b.input(s.input_channels, s.input_size);
  x = b.conv_bn_relu("conv1", x, s.input_channels, s.stem_filters, s.stem_kernel, s.stem_stride,
                     s.stem_pad, {});
  x = b.max_pool("pool1", x);
  int channels = s.stem_filters;
  for (std::size_t i = 0; i < s.fires.size(); ++i) {
    const std::string name = "fire" + std::to_string(i + 2);
    x = b.fire(name, x, channels, s.fires[i]);
    channels = s.fires[i].output_channels();
    if (std::find(s.pool_after_fire.begin(), s.pool_after_fire.end(), static_cast<int>(i)) !=
        s.pool_after_fire.end()) {
      x = b.max_pool("pool" + std::to_string(i + 2), x);
    }
  }
  const std::string emb = "conv" + std::to_string(s.fires.size() + 2);
  x = b.conv_bn_relu(emb, x, channels, s.embedding_filters, 1, 1, 0, {});
  x = b.simple("gap", LayerKind::kGlobalAvgPool, x);
  x = b.fully_connected("fc", x, s.embedding_filters, num_classes);
  b.simple("softmax", LayerKind::kSoftmax, x);
  g.validate();
  return g;
}

ModelGraph build_full_config(int num_classes, std::uint64_t seed) {
  return build_from_schedule(full_schedule(), num_classes, seed);
}

ModelGraph build_micro_config(int num_classes, int width_divisor, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2, got " + std::to_string(num_classes));
  return build_from_schedule(micro_schedule(width_divisor), num_classes, seed);
}

ModelStats count_stats(const ModelGraph& model) {
  ModelStats s;
  const int fc = model.logits_node();
  for (int i = 0; i < model.size(); ++i) {
    const LayerSpec& l = model.layer(i);
    if (l.kind == LayerKind::kConv) s.total_filters += l.channels;
    for (const auto& p : l.params) {
      if (!p.trainable) continue;
      const auto n = static_cast<std::int64_t>(p.param.value.size());
      s.learnables += n;
      if (i != fc) s.backbone_learnables += n;
    }
  }
  s.embedding_dim = model.infer_channels()[static_cast<std::size_t>(model.embedding_node())];
  s.model_bytes = static_cast<std::int64_t>(serialized_size(model));
  return s;
}

// ---------------------------------------------------------------------------
// Forward

ForwardOutputs forward(Tape<float>& tape, ModelGraph& model, const Tensor& input,
                       const ForwardOptions& options) {
  std::vector<Var<float>> vals(static_cast<std::size_t>(model.size()));
  for (int i = 0; i < model.size(); ++i) {
    LayerSpec& l = model.layer(i);
    auto in = [&](std::size_t k) { return vals[static_cast<std::size_t>(l.inputs.at(k))]; };
    Var<float> out;
    switch (l.kind) {
      case LayerKind::kInput:
        if (input.rank() != 4 || static_cast<int>(input.dim(1)) != l.channels) {
          throw ShapeError("input: expected [N, " + std::to_string(l.channels) + ", H, W], got " +
                           shape_str(input.shape()));
        }
        out = tape.constant(input);
        break;
      case LayerKind::kConv:
        out = conv2d(in(0), tape.parameter(l.param("weight").param), tape.parameter(l.param("bias").param),
                     Conv2dOptions{l.stride, l.pad, l.name});
        break;
      case LayerKind::kBatchNorm: {
        BatchNormOptions bo;
        bo.mode = options.mode;
        bo.update_running_stats = options.update_running_stats;
        bo.momentum = kBatchNormMomentum;
        bo.epsilon = kBatchNormEpsilon;
        bo.name = l.name;
        out = batch_norm(in(0), tape.parameter(l.param("gamma").param), tape.parameter(l.param("beta").param),
                         l.param("running_mean").param.value, l.param("running_var").param.value, bo);
        break;
      }
      case LayerKind::kRelu:
        out = relu(in(0));
        break;
      case LayerKind::kMaxPool:
        out = max_pool(in(0), l.kernel, l.stride);
        break;
      case LayerKind::kConcat: {
        std::vector<Var<float>> parts;
        for (std::size_t k = 0; k < l.inputs.size(); ++k) parts.push_back(in(k));
        out = concat_channels(parts);
        break;
      }
      case LayerKind::kGlobalAvgPool:
        out = global_avg_pool(in(0));
        break;
      case LayerKind::kFullyConnected:
        out = fully_connected(in(0), tape.parameter(l.param("weight").param),
                              tape.parameter(l.param("bias").param));
        break;
      case LayerKind::kSoftmax:
        out = in(0);
        break;
    }
    if (options.masks != nullptr) {
      if (auto it = options.masks->find(i); it != options.masks->end()) {
        out = scale_channels(out, it->second);
      }
    }
    vals[static_cast<std::size_t>(i)] = out;
  }
  return {vals[static_cast<std::size_t>(model.embedding_node())],
          vals[static_cast<std::size_t>(model.logits_node())]};
}

Tensor infer_embeddings(ModelGraph& model, const Tensor& input) {
  Tape<float> tape;
  tape.set_grad_enabled(false);
  return forward(tape, model, input, {}).embedding.value();
}

Tensor infer_logits(ModelGraph& model, const Tensor& input) {
  Tape<float> tape;
  tape.set_grad_enabled(false);
  return forward(tape, model, input, {}).logits.value();
}

}  // namespace sqz
