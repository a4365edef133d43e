#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "retina/core.hpp"
#include "retina/image.hpp"
#include "retina/nn/ops.hpp"
#include "retina/nn/tape.hpp"

namespace retina::nn {

enum class ModelKind { Teacher, Student };

inline std::string to_string(ModelKind k) { return k == ModelKind::Teacher ? "teacher" : "student"; }

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "teacher") return ModelKind::Teacher;
  if (s == "student") return ModelKind::Student;
  fail(ErrorKind::InvalidArgument, "unknown model kind '" + s + "'");
}

/// Architecture description. The teacher is a small UNet-style CNN; the
/// student swaps its encoder for patch embedding plus two stages of windowed
/// self-attention and keeps the same two decoders.
struct ModelSpec {
  ModelKind kind = ModelKind::Teacher;
  int base_channels = 16;
  int descriptor_dim = 32;
  bool lk_block = false;
  int embed_dim = 32;        // student only
  int window_size = 4;       // student only, in tokens
  int heads = 2;             // student only
  int depth = 2;             // attention blocks per stage, student only
  double dropout_rate = 0.0; // student only
  int input_height = 128;
  int input_width = 128;

  static ModelSpec teacher() { return ModelSpec{}; }
  static ModelSpec student() {
    ModelSpec s;
    s.kind = ModelKind::Student;
    s.dropout_rate = 0.5;
    return s;
  }

  void validate() const {
    auto bad = [](const std::string& m) { fail(ErrorKind::InvalidArgument, "model spec: " + m); };
    if (input_height <= 0 || input_width <= 0 || input_height % 16 || input_width % 16)
      bad("input size must be a positive multiple of 16");
    if (base_channels < 1) bad("base_channels must be >= 1");
    if (descriptor_dim < 8) bad("descriptor_dim must be >= 8");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) bad("dropout_rate must be in [0,1)");
    if (kind == ModelKind::Student) {
      if (embed_dim < 1 || heads < 1 || embed_dim % heads) bad("embed_dim must be a multiple of heads");
      if (depth < 1) bad("depth must be >= 1");
      const int h1 = input_height / 4, w1 = input_width / 4;
      if (window_size < 1 || h1 % window_size || w1 % window_size || (h1 / 2) % window_size ||
          (w1 / 2) % window_size)
        bad("window_size must divide both attention stage grids");
    }
  }

  std::string canonical() const {
    std::ostringstream os;
    os << "kind=" << to_string(kind) << ";c=" << base_channels << ";d=" << descriptor_dim
       << ";lk=" << lk_block << ";h=" << input_height << ";w=" << input_width;
    if (kind == ModelKind::Student)
      os << ";e=" << embed_dim << ";ws=" << window_size << ";heads=" << heads
         << ";depth=" << depth;
    // Dropout changes training only, never the parameter layout or inference.
    return os.str();
  }

  std::string hash() const { return hex64(fnv1a(canonical())); }
};

/// Named parameter tensors plus the hash of the spec that created them.
struct ModelParams {
  std::string spec_hash;
  std::map<std::string, Tensor> tensors;

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors) n += t.size();
    return n;
  }
};

using ParamShapes = std::vector<std::pair<std::string, std::vector<int>>>;

namespace detail {

struct ShapeBuilder {
  bool lk = false;
  ParamShapes shapes;

  void conv(const std::string& name, int cin, int cout, int k = 3) {
    shapes.push_back({name + ".w", {cout, cin, k, k}});
    shapes.push_back({name + ".b", {cout}});
  }
  // Encoder convs become 1x1 + 3x3 + 5x5 branches with a shared bias.
  void enc_conv(const std::string& name, int cin, int cout) {
    if (!lk) return conv(name, cin, cout, 3);
    shapes.push_back({name + ".w", {cout, cin, 3, 3}});
    shapes.push_back({name + ".b", {cout}});
    shapes.push_back({name + ".w1", {cout, cin, 1, 1}});
    shapes.push_back({name + ".w5", {cout, cin, 5, 5}});
  }
  void linear(const std::string& name, int ein, int eout) {
    shapes.push_back({name + ".w", {eout, ein}});
    shapes.push_back({name + ".b", {eout}});
  }
  void norm(const std::string& name, int e) {
    shapes.push_back({name + ".g", {e}});
    shapes.push_back({name + ".b", {e}});
  }
};

inline void decoder_shapes(ShapeBuilder& sb, const ModelSpec& s) {
  const int c = s.base_channels, d = s.descriptor_dim;
  sb.conv("det.up1.conv1", 6 * c, 2 * c);
  sb.conv("det.up1.conv2", 2 * c, 2 * c);
  sb.conv("det.up2.conv1", 3 * c, c);
  sb.conv("det.up2.conv2", c, c);
  sb.conv("det.up3.conv1", 2 * c, c);
  sb.conv("det.up3.conv2", c, c);
  sb.conv("det.head.conv1", c, c);
  sb.conv("det.head.conv2", c, c);
  sb.conv("det.head.conv3", c, 1);
  sb.conv("desc.conv", 4 * c, d);
  for (int i = 1; i <= 4; ++i) {
    sb.shapes.push_back({"desc.up" + std::to_string(i) + ".w", {d, 4, 4, d}});
    sb.shapes.push_back({"desc.up" + std::to_string(i) + ".b", {d}});
  }
}

}  // namespace detail

/// Parameter names and shapes for a spec, in creation order.
inline ParamShapes param_shapes(const ModelSpec& s) {
  s.validate();
  detail::ShapeBuilder sb;
  sb.lk = s.lk_block;
  const int c = s.base_channels;
  if (s.kind == ModelKind::Teacher) {
    sb.enc_conv("enc.stem", 1, c);
    sb.enc_conv("enc.b1.conv1", c, c);
    sb.enc_conv("enc.b1.conv2", c, c);
    sb.enc_conv("enc.b2.conv1", c, 2 * c);
    sb.enc_conv("enc.b2.conv2", 2 * c, 2 * c);
    sb.enc_conv("enc.b3.conv1", 2 * c, 4 * c);
    sb.enc_conv("enc.b3.conv2", 4 * c, 4 * c);
  } else {
    const int e = s.embed_dim;
    sb.enc_conv("enc.stem", 1, c);
    sb.enc_conv("enc.b1.conv1", c, c);
    sb.linear("enc.embed", 16, e);
    for (int stage = 1; stage <= 2; ++stage) {
      const int se = stage == 1 ? e : 2 * e;
      if (stage == 2) {
        sb.norm("enc.merge.norm", 4 * e);
        sb.linear("enc.merge", 4 * e, 2 * e);
      }
      for (int blk = 0; blk < s.depth; ++blk) {
        const std::string p = "enc.s" + std::to_string(stage) + ".blk" + std::to_string(blk);
        sb.norm(p + ".norm1", se);
        sb.linear(p + ".qkv", se, 3 * se);
        sb.linear(p + ".proj", se, se);
        sb.norm(p + ".norm2", se);
        sb.linear(p + ".mlp1", se, 2 * se);
        sb.linear(p + ".mlp2", 2 * se, se);
      }
    }
    sb.linear("enc.bridge2", e, 2 * c);
    sb.linear("enc.bridge3", 2 * e, 4 * c);
  }
  detail::decoder_shapes(sb, s);
  return sb.shapes;
}

inline std::size_t count_params(const ModelSpec& s) {
  std::size_t n = 0;
  for (const auto& [_, shape] : param_shapes(s)) n += Tensor::count(shape);
  return n;
}

/// He-style uniform init (variance 2 / fan_in) for kernels and projections,
/// zero biases, unit norm gains. Values are rounded to float precision so a
/// float32 checkpoint holds them exactly.
inline ModelParams init_params(const ModelSpec& s, std::uint64_t seed) {
  ModelParams p;
  p.spec_hash = s.hash();
  for (const auto& [name, shape] : param_shapes(s)) {
    Tensor t(shape, 0.0);
    const bool is_norm_gain = name.size() > 2 && name.compare(name.size() - 2, 2, ".g") == 0;
    const bool is_bias = name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0;
    if (is_norm_gain) {
      std::fill(t.data.begin(), t.data.end(), 1.0);
    } else if (!is_bias) {
      // conv: Co x Ci x k x k; transposed conv: Co x 4 x 4 x Ci; linear: Eout x Ein.
      const bool upsample = name.rfind("desc.up", 0) == 0;
      // Each transposed-conv output pixel sums 2 x 2 taps.
      const std::size_t fan_in =
          upsample ? 4 * static_cast<std::size_t>(shape[3]) : t.size() / static_cast<std::size_t>(shape[0]);
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      Rng rng(derive_seed(seed, name));
      for (double& v : t.data) v = uniform(rng, -bound, bound);
      if (upsample) {
        // Start near channel-wise bilinear upsampling so the field is smooth from step 0.
        constexpr double tap[4] = {0.25, 0.75, 0.75, 0.25};
        const int co = shape[0], ci = shape[3];
        for (int o = 0; o < std::min(co, ci); ++o)
          for (int ky = 0; ky < 4; ++ky)
            for (int kx = 0; kx < 4; ++kx)
              t[((static_cast<std::size_t>(o) * 4 + ky) * 4 + kx) * ci + o] += tap[ky] * tap[kx];
      }
      for (double& v : t.data) v = static_cast<float>(v);
    }
    p.tensors.emplace(name, std::move(t));
  }
  return p;
}

/// Heatmap P (1 x H x W, in (0,1)) and descriptor field D (d x H x W, unit
/// vectors along the channel axis) for one image.
struct ModelOutput {
  Tensor heatmap;
  Tensor descriptors;

  int height() const { return heatmap.dim(1); }
  int width() const { return heatmap.dim(2); }
  int dim() const { return descriptors.dim(0); }
};

/// Everything backward() needs from one forward pass.
struct ForwardTape {
  std::unique_ptr<Tape> tape;
  Id heatmap = 0;
  Id descriptors = 0;
  // Student only: attention-stage features before the decoders (E x h x w).
  Id stage1 = 0;
  Id stage2 = 0;
  std::string spec_hash;
};

namespace detail {

class Builder {
 public:
  Builder(Tape& t, const ModelSpec& s, const ModelParams& p, bool train, std::uint64_t seed)
      : t_(t), spec_(s), params_(p), train_(train), seed_(seed) {}

  Id param(const std::string& name) {
    auto it = ids_.find(name);
    if (it != ids_.end()) return it->second;
    auto pit = params_.tensors.find(name);
    if (pit == params_.tensors.end()) fail(ErrorKind::ShapeMismatch, "missing parameter " + name);
    return ids_[name] = t_.parameter(name, pit->second);
  }

  Id conv(Id x, const std::string& name) { return conv2d(t_, x, param(name + ".w"), param(name + ".b")); }

  Id enc_conv(Id x, const std::string& name) {
    Id y = conv(x, name);
    if (spec_.lk_block) {
      y = add(t_, y, conv2d(t_, x, param(name + ".w1")));
      y = add(t_, y, conv2d(t_, x, param(name + ".w5")));
    }
    return y;
  }

  Id lin(Id x, const std::string& name) { return linear(t_, x, param(name + ".w"), param(name + ".b")); }
  Id norm(Id x, const std::string& name) { return layer_norm(t_, x, param(name + ".g"), param(name + ".b")); }

  Id drop(Id x) {
    const std::uint64_t s = derive_seed(seed_, static_cast<std::uint64_t>(drop_counter_++));
    return dropout(t_, x, spec_.dropout_rate, train_ && spec_.kind == ModelKind::Student, s);
  }

  Tape& tape() { return t_; }

 private:
  Tape& t_;
  const ModelSpec& spec_;
  const ModelParams& params_;
  bool train_;
  std::uint64_t seed_;
  std::uint64_t drop_counter_ = 0;
  std::map<std::string, Id> ids_;
};

struct EncoderOut {
  Id s0, e1, e2, e3;
  Id stage1 = 0, stage2 = 0;
};

inline EncoderOut teacher_encoder(Builder& b, Id x) {
  Tape& t = b.tape();
  auto block = [&](Id in, const std::string& name) {
    Id y = relu(t, b.enc_conv(in, name + ".conv1"));
    y = b.enc_conv(y, name + ".conv2");
    return relu(t, maxpool2(t, y));
  };
  EncoderOut o{};
  o.s0 = relu(t, b.enc_conv(x, "enc.stem"));
  o.e1 = block(o.s0, "enc.b1");
  o.e2 = block(o.e1, "enc.b2");
  o.e3 = block(o.e2, "enc.b3");
  return o;
}

inline Id attention_stage(Builder& b, const ModelSpec& s, Id x, int stage, int gh, int gw) {
  Tape& t = b.tape();
  for (int blk = 0; blk < s.depth; ++blk) {
    const std::string p = "enc.s" + std::to_string(stage) + ".blk" + std::to_string(blk);
    Id qkv = b.lin(b.norm(x, p + ".norm1"), p + ".qkv");
    Id att = window_attention(t, qkv, gh, gw, s.window_size, s.heads);
    x = add(t, x, b.lin(att, p + ".proj"));
    Id m = gelu(t, b.lin(b.norm(x, p + ".norm2"), p + ".mlp1"));
    x = add(t, x, b.lin(m, p + ".mlp2"));
  }
  return b.drop(x);
}

inline EncoderOut student_encoder(Builder& b, const ModelSpec& s, Id x) {
  Tape& t = b.tape();
  const int h1 = s.input_height / 4, w1 = s.input_width / 4;
  EncoderOut o{};
  o.s0 = relu(t, b.enc_conv(x, "enc.stem"));
  o.e1 = relu(t, maxpool2(t, b.enc_conv(o.s0, "enc.b1.conv1")));

  Id tok = b.lin(patchify(t, x, 4), "enc.embed");
  tok = attention_stage(b, s, tok, 1, h1, w1);
  o.stage1 = tokens_to_map(t, tok, h1, w1);
  o.e2 = relu(t, tokens_to_map(t, b.lin(tok, "enc.bridge2"), h1, w1));

  Id merged = b.lin(b.norm(patchify(t, o.stage1, 2), "enc.merge.norm"), "enc.merge");
  merged = attention_stage(b, s, merged, 2, h1 / 2, w1 / 2);
  o.stage2 = tokens_to_map(t, merged, h1 / 2, w1 / 2);
  o.e3 = relu(t, tokens_to_map(t, b.lin(merged, "enc.bridge3"), h1 / 2, w1 / 2));
  return o;
}

}  // namespace detail

inline Tensor image_tensor(const GrayImage& img) {
  Tensor x({1, img.height, img.width});
  for (std::size_t i = 0; i < img.size(); ++i) x.data[i] = img.data[i];
  return x;
}

inline void check_params(const ModelSpec& spec, const ModelParams& params) {
  if (params.spec_hash != spec.hash())
    fail(ErrorKind::HashMismatch, "parameters were created for spec " + params.spec_hash +
                                      ", not " + spec.hash());
  for (const auto& [name, shape] : param_shapes(spec)) {
    auto it = params.tensors.find(name);
    if (it == params.tensors.end()) fail(ErrorKind::ShapeMismatch, "missing parameter " + name);
    require_shape(it->second, shape, name.c_str());
    if (!it->second.all_finite()) fail(ErrorKind::InvalidArgument, "non-finite parameter " + name);
  }
}

/// Runs the model on one image. In train mode the student applies dropout
/// with masks derived from `seed`; eval mode is deterministic.
inline ForwardTape forward(const ModelSpec& spec, const ModelParams& params, const Tensor& image,
                           bool train_mode, std::uint64_t seed, bool need_grad = true,
                           bool track_pattern = false) {
  spec.validate();
  check_params(spec, params);
  require_shape(image, {1, spec.input_height, spec.input_width}, "model input");

  ForwardTape ft;
  ft.spec_hash = spec.hash();
  ft.tape = std::make_unique<Tape>(need_grad);
  Tape& t = *ft.tape;
  t.track_pattern(track_pattern);
  detail::Builder b(t, spec, params, train_mode, seed);
  const Id x = t.constant(image);

  const detail::EncoderOut enc = spec.kind == ModelKind::Teacher
                                     ? detail::teacher_encoder(b, x)
                                     : detail::student_encoder(b, spec, x);
  ft.stage1 = enc.stage1;
  ft.stage2 = enc.stage2;

  auto up_block = [&](Id low, Id skip, const std::string& name) {
    Id y = concat(t, upsample2(t, low), skip);
    y = relu(t, b.conv(y, name + ".conv1"));
    y = relu(t, b.conv(y, name + ".conv2"));
    return b.drop(y);
  };
  Id y = up_block(enc.e3, enc.e2, "det.up1");
  y = up_block(y, enc.e1, "det.up2");
  y = up_block(y, enc.s0, "det.up3");
  y = relu(t, b.conv(y, "det.head.conv1"));
  y = relu(t, b.conv(y, "det.head.conv2"));
  ft.heatmap = sigmoid(t, b.conv(y, "det.head.conv3"));

  // The descriptor path stays linear after the encoder so no unit can die
  // and leave a keypoint with an all-zero descriptor.
  Id d = b.conv(maxpool2(t, enc.e3), "desc.conv");
  for (int i = 1; i <= 4; ++i) {
    const std::string name = "desc.up" + std::to_string(i);
    d = conv_transpose4x4(t, d, b.param(name + ".w"), b.param(name + ".b"));
  }
  ft.descriptors = l2_normalize_channels(t, d);
  return ft;
}

inline ModelOutput output_of(const ForwardTape& ft) {
  return {ft.tape->value(ft.heatmap), ft.tape->value(ft.descriptors)};
}

inline ModelOutput infer(const ModelSpec& spec, const ModelParams& params, const GrayImage& img) {
  ForwardTape ft = forward(spec, params, image_tensor(img), false, 0, false);
  return output_of(ft);
}

/// Parameter gradients for output gradients dL/dP and dL/dD. Either may be
/// empty (treated as zero).
inline std::map<std::string, Tensor> backward(ForwardTape& ft, const Tensor& grad_heatmap,
                                              const Tensor& grad_descriptors) {
  require(ft.tape && ft.tape->grad_enabled(), ErrorKind::InvalidArgument,
          "backward needs a tape recorded with gradients");
  std::vector<std::pair<Id, const Tensor*>> seeds;
  if (!grad_heatmap.data.empty()) seeds.push_back({ft.heatmap, &grad_heatmap});
  if (!grad_descriptors.data.empty()) seeds.push_back({ft.descriptors, &grad_descriptors});
  ft.tape->backward(seeds);
  return ft.tape->parameter_grads();
}

}  // namespace retina::nn
