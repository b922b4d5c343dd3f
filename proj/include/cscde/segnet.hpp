#pragma once

// Encoder-decoder segmentation network whose decoder stages are
// upsample -> 3x3 conv ("Up Conv") -> concat(skip) -> ML-block.

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cscde/autodiff.hpp"
#include "cscde/errors.hpp"
#include "cscde/layers.hpp"
#include "cscde/ml_block.hpp"
#include "cscde/serialize.hpp"

namespace cscde {

/// Architecture hyperparameters. Everything needed to rebuild a network.
struct SegNetConfig {
  std::size_t in_channels = 1;
  std::size_t n_classes = 4;
  std::vector<std::size_t> encoder_channels{16, 32, 64, 128};
  std::vector<std::size_t> decoder_channels{32, 16, 8};
  std::vector<std::size_t> iterations{2, 2, 2};  // T per decoder stage
  std::size_t ml_kernel = 3;
  std::size_t ml_stride = 1;
  std::size_t ml_padding = 1;
  std::uint64_t seed = 42;

  std::size_t stages() const { return decoder_channels.size(); }
  std::size_t reduction() const { return std::size_t(1) << (encoder_channels.size() - 1); }

  void set_iterations(std::size_t t) { iterations.assign(stages(), t); }

  void validate() const {
    if (in_channels == 0) throw ConfigError("in_channels must be positive");
    if (n_classes < 2) throw ConfigError("n_classes must be at least 2");
    if (encoder_channels.size() < 2) throw ConfigError("encoder needs at least two stages");
    if (decoder_channels.size() != encoder_channels.size() - 1) {
      throw ConfigError("decoder_channels must have one entry per encoder skip (" +
                        std::to_string(encoder_channels.size() - 1) + ")");
    }
    if (iterations.size() != decoder_channels.size()) {
      throw ConfigError("iterations must have one entry per decoder stage");
    }
    for (auto c : encoder_channels) {
      if (c == 0) throw ConfigError("encoder channel widths must be positive");
    }
    for (auto c : decoder_channels) {
      if (c == 0) throw ConfigError("decoder channel widths must be positive");
    }
    if (ml_kernel == 0) throw ConfigError("ml_kernel must be positive");
    // A decoder stage must come out at its skip resolution.
    if (ml_stride != 1 || ml_kernel != 2 * ml_padding + 1) {
      throw ConfigError("decoder ML-blocks must preserve resolution: need ml_stride = 1 and "
                        "ml_kernel = 2 * ml_padding + 1");
    }
  }
};

inline void to_json(nlohmann::json& j, const SegNetConfig& c) {
  j = nlohmann::json{{"in_channels", c.in_channels},   {"n_classes", c.n_classes},
                     {"encoder_channels", c.encoder_channels},
                     {"decoder_channels", c.decoder_channels},
                     {"iterations", c.iterations},     {"ml_kernel", c.ml_kernel},
                     {"ml_stride", c.ml_stride},       {"ml_padding", c.ml_padding},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SegNetConfig& c) {
  SegNetConfig d;
  c.in_channels = j.value("in_channels", d.in_channels);
  c.n_classes = j.value("n_classes", d.n_classes);
  c.encoder_channels = j.value("encoder_channels", d.encoder_channels);
  c.decoder_channels = j.value("decoder_channels", d.decoder_channels);
  c.ml_kernel = j.value("ml_kernel", d.ml_kernel);
  c.ml_stride = j.value("ml_stride", d.ml_stride);
  c.ml_padding = j.value("ml_padding", d.ml_padding);
  c.seed = j.value("seed", d.seed);
  if (j.contains("iterations") && j["iterations"].is_number_integer()) {
    const auto t = j["iterations"].get<long long>();
    if (t < 0) throw ConfigError("iterations must be non-negative");
    c.iterations.assign(c.decoder_channels.size(), static_cast<std::size_t>(t));
  } else {
    c.iterations = j.value("iterations", std::vector<std::size_t>(c.decoder_channels.size(), 2));
  }
}

/// Multi-scale encoder features, shallowest skip first.
template <typename Real>
struct EncoderOutput {
  std::vector<Tensor<Real>> features;
  Tensor<Real> bottleneck;
};

struct EncoderVars {
  std::vector<Var> skips;
  Var bottleneck;
};

/// Backbone interface. Any encoder producing skips at strides 1, 2, 4, ... and
/// a bottleneck one halving below the deepest skip can drive the decoder.
template <typename Real>
class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual EncoderVars encode(Tape<Real>& t, Var x, Mode mode) = 0;
  virtual std::vector<std::size_t> skip_channels() const = 0;
  virtual std::size_t bottleneck_channels() const = 0;
  virtual void collect(std::vector<Param<Real>*>& out) = 0;
  virtual void collect_buffers(std::vector<std::pair<std::string, Tensor<Real>*>>& out) = 0;
};

/// Default backbone: per stage two conv3x3-BN-ReLU, then 2x2 mean pooling
/// between stages.
template <typename Real>
class CnnEncoder final : public Encoder<Real> {
 public:
  CnnEncoder(std::size_t in_channels, const std::vector<std::size_t>& widths, SplitMix64& rng) {
    std::size_t prev = in_channels;
    stages_.reserve(widths.size());
    for (std::size_t s = 0; s < widths.size(); ++s) {
      const std::string p = "encoder." + std::to_string(s);
      Stage st;
      st.conv1 = Param<Real>(p + ".conv1.weight", kaiming_uniform<Real>(widths[s], prev, 3, rng));
      st.bn1 = BatchNormLayer<Real>(p + ".bn1", widths[s]);
      st.conv2 =
          Param<Real>(p + ".conv2.weight", kaiming_uniform<Real>(widths[s], widths[s], 3, rng));
      st.bn2 = BatchNormLayer<Real>(p + ".bn2", widths[s]);
      stages_.push_back(std::move(st));
      prev = widths[s];
    }
  }

  EncoderVars encode(Tape<Real>& t, Var x, Mode mode) override {
    const ConvGeom g{1, 1};
    EncoderVars out;
    Var cur = x;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      Stage& st = stages_[s];
      if (s > 0) cur = ad::avg_pool2x(t, cur);
      cur = ad::relu(t, st.bn1(t, ad::conv2d(t, cur, t.param(st.conv1), g), mode));
      cur = ad::relu(t, st.bn2(t, ad::conv2d(t, cur, t.param(st.conv2), g), mode));
      if (s + 1 < stages_.size()) out.skips.push_back(cur);
    }
    out.bottleneck = cur;
    return out;
  }

  std::vector<std::size_t> skip_channels() const override {
    std::vector<std::size_t> c;
    for (std::size_t s = 0; s + 1 < stages_.size(); ++s) c.push_back(stages_[s].conv1.value.n());
    return c;
  }
  std::size_t bottleneck_channels() const override { return stages_.back().conv2.value.n(); }

  void collect(std::vector<Param<Real>*>& out) override {
    for (Stage& st : stages_) {
      out.push_back(&st.conv1);
      st.bn1.collect(out);
      out.push_back(&st.conv2);
      st.bn2.collect(out);
    }
  }
  void collect_buffers(std::vector<std::pair<std::string, Tensor<Real>*>>& out) override {
    for (Stage& st : stages_) {
      st.bn1.collect_buffers(out);
      st.bn2.collect_buffers(out);
    }
  }

 private:
  struct Stage {
    Param<Real> conv1;
    BatchNormLayer<Real> bn1;
    Param<Real> conv2;
    BatchNormLayer<Real> bn2;
  };
  std::vector<Stage> stages_;
};

template <typename Real>
struct DecoderStage {
  Param<Real> up_weight;  // 3x3 conv after bilinear upsampling
  BatchNormLayer<Real> up_bn;
  MLBlock<Real> ml;       // consumes concat(up, skip)
};

template <typename Real>
class SegNet {
 public:
  explicit SegNet(const SegNetConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    SplitMix64 rng = make_stream(cfg_.seed, Stream::Init);
    encoder_ = std::make_unique<CnnEncoder<Real>>(cfg_.in_channels, cfg_.encoder_channels, rng);
    build_decoder(rng);
  }

  /// Network around a custom backbone; decoder widths and T come from cfg.
  SegNet(const SegNetConfig& cfg, std::unique_ptr<Encoder<Real>> encoder)
      : cfg_(cfg), encoder_(std::move(encoder)) {
    cfg_.validate();
    SplitMix64 rng = make_stream(cfg_.seed, Stream::Init);
    build_decoder(rng);
  }

  SegNet(const SegNet&) = delete;
  SegNet& operator=(const SegNet&) = delete;

  const SegNetConfig& config() const { return cfg_; }
  std::vector<DecoderStage<Real>>& stages() { return stages_; }
  Encoder<Real>& encoder() { return *encoder_; }

  void set_iterations(const std::vector<std::size_t>& t) {
    if (t.size() != stages_.size()) throw ConfigError("one iteration count per decoder stage");
    for (std::size_t i = 0; i < t.size(); ++i) stages_[i].ml.iterations = t[i];
    cfg_.iterations = t;
  }

  void check_input(const Shape& s) const {
    if (s.c != cfg_.in_channels) {
      throw ShapeError("SegNet expects " + std::to_string(cfg_.in_channels) +
                       " input channels, got " + s.str());
    }
    const std::size_t r = cfg_.reduction();
    if (s.h % r != 0 || s.w % r != 0 || s.h == 0 || s.w == 0) {
      throw ShapeError("SegNet input height and width must be positive multiples of " +
                       std::to_string(r) + ", got " + s.str());
    }
  }

  EncoderVars encode(Tape<Real>& t, Var x, Mode mode) {
    check_input(t.value(x).shape());
    return encoder_->encode(t, x, mode);
  }

  EncoderOutput<Real> encode(const Tensor<Real>& x, Mode mode) {
    Tape<Real> t(false);
    EncoderVars v = encode(t, t.leaf(x), mode);
    EncoderOutput<Real> out;
    for (Var s : v.skips) out.features.push_back(t.value(s));
    out.bottleneck = t.value(v.bottleneck);
    return out;
  }

  /// Decoder stages then the 1x1 head. `traces`, when given, receives one
  /// ML-block trace per stage.
  Var decode(Tape<Real>& t, const EncoderVars& enc, Mode mode,
             std::vector<MLBlockTrace<Real>>* traces = nullptr) {
    if (enc.skips.size() != stages_.size()) {
      throw ShapeError("decoder expects " + std::to_string(stages_.size()) + " skips, got " +
                       std::to_string(enc.skips.size()));
    }
    if (traces) traces->assign(stages_.size(), {});
    const ConvGeom g{1, 1};
    Var cur = enc.bottleneck;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      DecoderStage<Real>& st = stages_[i];
      Var skip = enc.skips[stages_.size() - 1 - i];
      Var up = ad::upsample2x(t, cur);
      up = ad::relu(t, st.up_bn(t, ad::conv2d(t, up, t.param(st.up_weight), g), mode));
      Var cat = ad::concat_channels(t, up, skip);
      cur = ml_forward(t, cat, st.ml, mode, traces ? &(*traces)[i] : nullptr);
    }
    Var logits = ad::conv2d(t, cur, t.param(head_weight_), ConvGeom{1, 0});
    return ad::add_channel_bias(t, logits, t.param(head_bias_));
  }

  Var forward(Tape<Real>& t, Var x, Mode mode,
              std::vector<MLBlockTrace<Real>>* traces = nullptr) {
    return decode(t, encode(t, x, mode), mode, traces);
  }

  Tensor<Real> logits(const Tensor<Real>& x, Mode mode = Mode::Eval,
                      std::vector<MLBlockTrace<Real>>* traces = nullptr) {
    Tape<Real> t(false);
    return t.value(forward(t, t.leaf(x), mode, traces));
  }

  /// Per-pixel argmax in eval mode; ties go to the lower class index.
  LabelMap predict(const Tensor<Real>& x) { return argmax_channels(logits(x, Mode::Eval)); }

  static LabelMap argmax_channels(const Tensor<Real>& z) {
    LabelMap m(Shape{z.n(), 1, z.h(), z.w()});
    for (std::size_t n = 0; n < z.n(); ++n) {
      for (std::size_t i = 0; i < z.shape().plane(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < z.c(); ++c) {
          if (z.plane(n, c)[i] > z.plane(n, best)[i]) best = c;
        }
        m.plane(n, 0)[i] = static_cast<std::uint8_t>(best);
      }
    }
    return m;
  }

  std::vector<Param<Real>*> params() {
    std::vector<Param<Real>*> out;
    encoder_->collect(out);
    for (auto& st : stages_) {
      out.push_back(&st.up_weight);
      st.up_bn.collect(out);
      st.ml.collect(out);
    }
    out.push_back(&head_weight_);
    out.push_back(&head_bias_);
    return out;
  }

  /// Non-learned state saved with checkpoints (batch-norm running statistics).
  std::vector<std::pair<std::string, Tensor<Real>*>> buffers() {
    std::vector<std::pair<std::string, Tensor<Real>*>> out;
    encoder_->collect_buffers(out);
    for (auto& st : stages_) {
      st.up_bn.collect_buffers(out);
      st.ml.collect_buffers(out);
    }
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : params()) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }

 private:
  void build_decoder(SplitMix64& rng) {
    const auto skips = encoder_->skip_channels();
    if (skips.size() != cfg_.stages()) {
      throw ConfigError("encoder provides " + std::to_string(skips.size()) + " skips but " +
                        std::to_string(cfg_.stages()) + " decoder stages are configured");
    }
    std::size_t prev = encoder_->bottleneck_channels();
    stages_.reserve(cfg_.stages());
    for (std::size_t i = 0; i < cfg_.stages(); ++i) {
      const std::string p = "decoder." + std::to_string(i);
      const std::size_t width = cfg_.decoder_channels[i];
      const std::size_t skip = skips[skips.size() - 1 - i];
      DecoderStage<Real> st;
      st.up_weight = Param<Real>(p + ".up.weight", kaiming_uniform<Real>(width, prev, 3, rng));
      st.up_bn = BatchNormLayer<Real>(p + ".up_bn", width);
      st.ml = MLBlock<Real>::create(p + ".ml", width + skip, width, width, cfg_.ml_kernel,
                                    cfg_.ml_stride, cfg_.ml_padding, cfg_.iterations[i], rng);
      stages_.push_back(std::move(st));
      prev = width;
    }
    head_weight_ = Param<Real>("head.weight", kaiming_uniform<Real>(cfg_.n_classes, prev, 1, rng));
    head_bias_ = Param<Real>("head.bias", Tensor<Real>(Shape{1, cfg_.n_classes, 1, 1}));
  }

  SegNetConfig cfg_;
  std::unique_ptr<Encoder<Real>> encoder_;
  std::vector<DecoderStage<Real>> stages_;
  Param<Real> head_weight_;
  Param<Real> head_bias_;
};

// ---------------------------------------------------------------------------
// Checkpoints:
//   u64 header length | JSON header {"format", "dtype", "config"} |
//   u64 tensor count | per tensor: u32 name length, name, CSCT record

template <typename Real>
void save_checkpoint(std::ostream& os, SegNet<Real>& net) {
  nlohmann::json header{{"format", "cscde-checkpoint"},
                        {"version", 1},
                        {"dtype", dtype_of<Real>() == DType::F32 ? "f32" : "f64"},
                        {"config", net.config()}};
  const std::string text = header.dump();
  detail::put<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));

  std::vector<std::pair<std::string, const Tensor<Real>*>> named;
  for (auto* p : net.params()) named.emplace_back(p->name, &p->value);
  for (auto& [name, t] : net.buffers()) named.emplace_back(name, t);
  detail::put<std::uint64_t>(os, named.size());
  for (const auto& [name, t] : named) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, *t);
  }
}

template <typename Real>
void save_checkpoint(const std::string& path, SegNet<Real>& net) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path);
  save_checkpoint(os, net);
  if (!os) throw DataError("failed writing checkpoint " + path);
}

template <typename Real>
std::unique_ptr<SegNet<Real>> load_checkpoint(std::istream& is) {
  detail::Reader r(is);
  const auto len = r.get<std::uint64_t>("header length");
  if (len > (std::uint64_t(1) << 24)) throw FormatError("implausible header length", 0);
  std::string text(len, '\0');
  r.bytes(text.data(), len, "header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not JSON: ") + e.what(), 8);
  }
  if (header.value("format", "") != "cscde-checkpoint") {
    throw FormatError("not a checkpoint file", 8);
  }
  auto net = std::make_unique<SegNet<Real>>(header.at("config").get<SegNetConfig>());

  std::map<std::string, Tensor<Real>*> slots;
  for (auto* p : net->params()) slots[p->name] = &p->value;
  for (auto& [name, t] : net->buffers()) slots[name] = t;

  const auto count = r.get<std::uint64_t>("tensor count");
  if (count != slots.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, model needs " +
                      std::to_string(slots.size()),
                      r.offset());
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto nlen = r.get<std::uint32_t>("name length");
    if (nlen > 4096) throw FormatError("implausible tensor name length", r.offset());
    std::string name(nlen, '\0');
    r.bytes(name.data(), nlen, "tensor name");
    auto it = slots.find(name);
    if (it == slots.end()) throw FormatError("unexpected tensor '" + name + "'", r.offset());
    const std::size_t at = r.offset();
    Tensor<Real> t = read_tensor<Real>(r);
    if (t.shape() != it->second->shape()) {
      throw FormatError("tensor '" + name + "' has shape " + t.shape().str() + ", expected " +
                        it->second->shape().str(),
                        at);
    }
    *it->second = std::move(t);
  }
  for (auto* p : net->params()) p->zero_grad();
  return net;
}

template <typename Real>
std::unique_ptr<SegNet<Real>> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path);
  return load_checkpoint<Real>(is);
}

}  // namespace cscde
