#include "sqz/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"
#include "sqz/model.hpp"

namespace sqz {
namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    u32(bits);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

  std::size_t remaining() const { return in_.size() - pos_; }

  void need(std::size_t n, CheckpointErrc code, const char* what) const {
    if (remaining() < n) {
      throw CheckpointError(code, std::string("checkpoint truncated while reading ") + what);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, CheckpointErrc::kCorruptHeader, what);
    return in_[pos_++];
  }
  std::uint32_t u32(const char* what, CheckpointErrc code = CheckpointErrc::kCorruptHeader) {
    need(4, code, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::int32_t i32(const char* what) { return static_cast<std::int32_t>(u32(what)); }
  float f32() {
    const std::uint32_t bits = u32("payload", CheckpointErrc::kTruncatedPayload);
    float v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, CheckpointErrc::kCorruptHeader, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

// Parameters every layer kind must declare, in declaration order.
std::vector<std::string> expected_params(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv:
    case LayerKind::kFullyConnected:
      return {"weight", "bias"};
    case LayerKind::kBatchNorm:
      return {"gamma", "beta", "running_mean", "running_var"};
    default:
      return {};
  }
}

}  // namespace

std::size_t serialized_size(const ModelGraph& model) {
  std::size_t n = 4 + 4 + 4;
  for (const LayerSpec& l : model.layers()) {
    n += 4 + l.name.size() + 1 + 4 + l.block.size();
    n += 4 + 4 * l.inputs.size() + 6 * 4;
    n += 4;
    for (const NamedParam& p : l.params) {
      n += 4 + p.name.size() + 1 + 4 + 4 * p.param.value.rank();
      n += 4 * p.param.value.size();
    }
  }
  return n;
}

std::vector<std::uint8_t> serialize(const ModelGraph& model) {
  Writer w;
  for (char c : kCheckpointMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(model.size()));
  for (const LayerSpec& l : model.layers()) {
    w.str(l.name);
    w.u8(static_cast<std::uint8_t>(l.kind));
    w.str(l.block);
    w.u32(static_cast<std::uint32_t>(l.inputs.size()));
    for (int in : l.inputs) w.i32(in);
    for (int attr : {l.channels, l.kernel, l.stride, l.pad, l.height, l.width}) w.i32(attr);
    w.u32(static_cast<std::uint32_t>(l.params.size()));
    for (const NamedParam& p : l.params) {
      w.str(p.name);
      w.u8(p.trainable ? 1 : 0);
      const Shape& shape = p.param.value.shape();
      w.u32(static_cast<std::uint32_t>(shape.size()));
      for (std::size_t d : shape) w.u32(static_cast<std::uint32_t>(d));
    }
  }
  for (const LayerSpec& l : model.layers()) {
    for (const NamedParam& p : l.params) {
      for (float v : p.param.value.values()) w.f32(v);
    }
  }
  return w.take();
}

ModelGraph deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointError(CheckpointErrc::kBadMagic, "not a checkpoint: bad magic");
  }
  for (int i = 0; i < 4; ++i) r.u8("magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrc::kUnsupportedVersion,
                          "unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32("layer count");
  // Each layer record is at least 41 bytes; reject absurd counts early.
  if (static_cast<std::uint64_t>(count) * 41 > r.remaining()) {
    throw CheckpointError(CheckpointErrc::kCorruptHeader, "layer count exceeds file size");
  }

  std::vector<LayerSpec> layers;
  layers.reserve(count);
  std::uint64_t payload_floats = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    LayerSpec l;
    l.name = r.str("layer name");
    const std::uint8_t kind = r.u8("layer kind");
    if (kind > static_cast<std::uint8_t>(LayerKind::kSoftmax)) {
      throw CheckpointError(CheckpointErrc::kCorruptHeader,
                            "layer " + l.name + ": unknown kind tag " + std::to_string(kind));
    }
    l.kind = static_cast<LayerKind>(kind);
    l.block = r.str("block name");
    const std::uint32_t n_inputs = r.u32("input count");
    if (n_inputs > i) {
      throw CheckpointError(CheckpointErrc::kCorruptHeader, "layer " + l.name + ": too many inputs");
    }
    for (std::uint32_t k = 0; k < n_inputs; ++k) l.inputs.push_back(r.i32("input index"));
    l.channels = r.i32("channels");
    l.kernel = r.i32("kernel");
    l.stride = r.i32("stride");
    l.pad = r.i32("pad");
    l.height = r.i32("height");
    l.width = r.i32("width");
    const std::uint32_t n_tensors = r.u32("tensor count");
    const auto expected = expected_params(l.kind);
    if (n_tensors != expected.size()) {
      throw CheckpointError(CheckpointErrc::kShapeMismatch,
                            "layer " + l.name + ": " + std::to_string(n_tensors) + " tensors, expected " +
                                std::to_string(expected.size()));
    }
    for (std::uint32_t t = 0; t < n_tensors; ++t) {
      NamedParam p;
      p.name = r.str("tensor name");
      p.trainable = r.u8("trainable flag") != 0;
      if (p.name != expected[t]) {
        throw CheckpointError(CheckpointErrc::kShapeMismatch,
                              "layer " + l.name + ": unexpected tensor '" + p.name + "'");
      }
      const std::uint32_t rank = r.u32("tensor rank");
      if (rank == 0 || rank > 4) {
        throw CheckpointError(CheckpointErrc::kShapeMismatch,
                              "layer " + l.name + ": tensor " + p.name + " has rank " + std::to_string(rank));
      }
      Shape shape;
      std::uint64_t elems = 1;
      for (std::uint32_t d = 0; d < rank; ++d) {
        const std::uint32_t dim = r.u32("tensor dims");
        if (dim == 0) {
          throw CheckpointError(CheckpointErrc::kShapeMismatch,
                                "layer " + l.name + ": tensor " + p.name + " has a zero dimension");
        }
        shape.push_back(dim);
        elems *= dim;
      }
      payload_floats += elems;
      // The payload follows the headers, so it can never exceed what is left.
      if (payload_floats * 4 > r.remaining()) {
        throw CheckpointError(CheckpointErrc::kTruncatedPayload,
                              "shape table declares more payload than the file holds");
      }
      p.param.value = Tensor(std::move(shape));
      l.params.push_back(std::move(p));
    }
    layers.push_back(std::move(l));
  }

  if (r.remaining() < payload_floats * 4) {
    throw CheckpointError(CheckpointErrc::kTruncatedPayload,
                          "payload holds " + std::to_string(r.remaining()) + " bytes, shape table needs " +
                              std::to_string(payload_floats * 4));
  }
  for (LayerSpec& l : layers) {
    for (NamedParam& p : l.params) {
      for (float& v : p.param.value.values()) v = r.f32();
      p.param.grad = Tensor(p.param.value.shape());
    }
  }
  if (r.remaining() != 0) {
    throw CheckpointError(CheckpointErrc::kTrailingData,
                          std::to_string(r.remaining()) + " unexpected bytes after payload");
  }

  ModelGraph model;
  try {
    for (LayerSpec& l : layers) model.add_layer(std::move(l));
    model.validate();
  } catch (const CheckpointError&) {
    throw;
  } catch (const Error& e) {
    throw CheckpointError(CheckpointErrc::kShapeMismatch, std::string("inconsistent checkpoint: ") + e.what());
  }
  return model;
}

std::string topology_json(const ModelGraph& model) {
  nlohmann::ordered_json j;
  j["format"] = "SQZP";
  j["version"] = kCheckpointVersion;
  const ModelStats s = count_stats(model);
  j["stats"] = {{"filters", s.total_filters},
                {"learnables", s.learnables},
                {"backbone_learnables", s.backbone_learnables},
                {"embedding_dim", s.embedding_dim},
                {"model_bytes", s.model_bytes}};
  const auto channels = model.infer_channels();
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (int i = 0; i < model.size(); ++i) {
    const LayerSpec& l = model.layer(i);
    nlohmann::ordered_json e;
    e["name"] = l.name;
    e["kind"] = std::string(to_string(l.kind));
    if (!l.block.empty()) e["block"] = l.block;
    nlohmann::ordered_json ins = nlohmann::ordered_json::array();
    for (int in : l.inputs) ins.push_back(model.layer(in).name);
    e["inputs"] = ins;
    e["out_channels"] = channels[static_cast<std::size_t>(i)];
    if (l.kind == LayerKind::kConv || l.kind == LayerKind::kMaxPool) {
      e["kernel"] = l.kernel;
      e["stride"] = l.stride;
    }
    if (l.kind == LayerKind::kConv) e["pad"] = l.pad;
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    for (const NamedParam& p : l.params) {
      tensors.push_back({{"name", p.name}, {"shape", p.param.value.shape()}, {"trainable", p.trainable}});
    }
    if (!tensors.empty()) e["tensors"] = tensors;
    layers.push_back(std::move(e));
  }
  j["layers"] = std::move(layers);
  return j.dump(2);
}

void save_checkpoint(const ModelGraph& model, const std::filesystem::path& path) {
  const auto bytes = serialize(model);
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  // Write to a temporary name first so a crash never leaves a half file.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointErrc::kIo, "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointErrc::kIo, "failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointErrc::kIo, "cannot move checkpoint into " + path.string());

  std::ofstream side(path.string() + ".json", std::ios::trunc);
  if (!side) throw CheckpointError(CheckpointErrc::kIo, "cannot write sidecar for " + path.string());
  side << topology_json(model) << '\n';
}

ModelGraph load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrc::kIo, "cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserialize(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(e.code(), path.string() + ": " + e.what());
  }
}

}  // namespace sqz
