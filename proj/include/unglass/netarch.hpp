#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "unglass/nn/layers.hpp"

namespace unglass {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Encoder / dual-decoder generator layout.
struct GeneratorConfig {
  int depth = 5;
  int base_channels = 64;
  int max_channels = 512;
  int input_size = 256;
  bool norm = true;
  // SD -> FD feature sharing. Off reproduces the "no skip between decoders"
  // ablations.
  bool sd_fd_skips = true;
  // 2 = glasses + face shape, 1 = glasses only.
  int mask_channels = 2;

  void validate() const {
    if (depth < 2) throw ConfigError("generator depth must be >= 2");
    if (base_channels < 1 || max_channels < base_channels) {
      throw ConfigError("generator channel widths are invalid");
    }
    if (input_size < 1 || input_size % (1 << depth) != 0) {
      throw ConfigError("input_size " + std::to_string(input_size) +
                        " is not divisible by 2^" + std::to_string(depth));
    }
    if (mask_channels != 1 && mask_channels != 2) throw ConfigError("mask_channels must be 1 or 2");
  }

  int encoder_channels(int level) const {
    return std::min(base_channels << level, max_channels);
  }
  /// Output width of decoder up-block `j` (0 = innermost).
  int decoder_channels(int j) const {
    return j < depth - 1 ? encoder_channels(depth - 2 - j) : encoder_channels(0);
  }
  int bottleneck_size() const { return input_size >> depth; }
};

/// Input-channel composition of one face-decoder block.
struct DecoderWiring {
  int upsampled = 0;
  int encoder_skip = 0;
  int seg_skip = 0;
  int total() const { return upsampled + encoder_skip + seg_skip; }
};

template <typename Scalar>
struct GeneratorOutput {
  Tensor<Scalar> y_hat;  // N x 3 x H x W, in [-1, 1]
  Tensor<Scalar> m_hat;  // N x mask_channels x H x W, in [0, 1]
};

namespace detail {

inline constexpr double kInitStd = 0.02;

template <typename Scalar>
class DownBlock {
 public:
  DownBlock(const std::string& name, int in, int out, bool norm, Rng& rng, Scalar slope)
      : norm_(norm), conv_(name + ".conv", in, out, {4, 2, 1}, !norm, rng, kInitStd), act_(slope) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x) {
    Tensor<Scalar> h = conv_.forward(x);
    if (norm_) h = in_.forward(h);
    return act_.forward(h);
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& g) {
    Tensor<Scalar> h = act_.backward(g);
    if (norm_) h = in_.backward(h);
    return conv_.backward(h);
  }
  void parameters(nn::ParameterList<Scalar>& out) { conv_.parameters(out); }
  void set_requires_grad(bool on) { conv_.accumulate_grads = on; }
  nn::Conv2d<Scalar>& conv() { return conv_; }

 private:
  bool norm_;
  nn::Conv2d<Scalar> conv_;
  nn::InstanceNorm<Scalar> in_;
  nn::LeakyRelu<Scalar> act_;
};

template <typename Scalar>
class UpBlock {
 public:
  UpBlock(const std::string& name, int in, int out, bool norm, Rng& rng)
      : norm_(norm), deconv_(name + ".deconv", in, out, {4, 2, 1}, !norm, rng, kInitStd) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x) {
    Tensor<Scalar> h = deconv_.forward(x);
    if (norm_) h = in_.forward(h);
    return act_.forward(h);
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& g) {
    Tensor<Scalar> h = act_.backward(g);
    if (norm_) h = in_.backward(h);
    return deconv_.backward(h);
  }
  void parameters(nn::ParameterList<Scalar>& out) { deconv_.parameters(out); }
  void set_requires_grad(bool on) { deconv_.accumulate_grads = on; }
  int in_channels() const { return deconv_.in_channels(); }

 private:
  bool norm_;
  nn::ConvTranspose2d<Scalar> deconv_;
  nn::InstanceNorm<Scalar> in_;
  nn::Relu<Scalar> act_;
};

/// Resolution-preserving deconvolution followed by a squashing activation.
template <typename Scalar, template <typename> class Activation>
class OutBlock {
 public:
  OutBlock(const std::string& name, int in, int out, Rng& rng)
      : deconv_(name, in, out, {3, 1, 1}, true, rng, kInitStd) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x) { return act_.forward(deconv_.forward(x)); }
  Tensor<Scalar> backward(const Tensor<Scalar>& g) { return deconv_.backward(act_.backward(g)); }
  void parameters(nn::ParameterList<Scalar>& out) { deconv_.parameters(out); }
  void set_requires_grad(bool on) { deconv_.accumulate_grads = on; }
  int in_channels() const { return deconv_.in_channels(); }

 private:
  nn::ConvTranspose2d<Scalar> deconv_;
  Activation<Scalar> act_;
};

}  // namespace detail

/// Encoder E feeding a face decoder FD (image) and a segmentation decoder SD
/// (masks). U-Net skips run E->FD and E->SD at matching resolutions; SD block
/// outputs are also concatenated into the FD block at the next level when
/// `sd_fd_skips` is on.
template <typename Scalar>
class Generator {
 public:
  explicit Generator(const GeneratorConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const int d = cfg_.depth;
    for (int i = 0; i < d; ++i) {
      const int in = i == 0 ? 3 : cfg_.encoder_channels(i - 1);
      // Instance statistics over a single pixel are degenerate.
      const bool norm = cfg_.norm && (cfg_.input_size >> (i + 1)) > 1;
      encoder_.emplace_back("gen.enc." + std::to_string(i), in, cfg_.encoder_channels(i), norm,
                            rng, Scalar(0.2));
    }
    for (int j = 0; j < d; ++j) {
      const int skip = j == 0 ? 0 : cfg_.encoder_channels(d - 1 - j);
      const int up = j == 0 ? cfg_.encoder_channels(d - 1) : cfg_.decoder_channels(j - 1);
      seg_.emplace_back("gen.seg." + std::to_string(j), up + skip, cfg_.decoder_channels(j),
                        cfg_.norm, rng);
      DecoderWiring w{up, skip, (j > 0 && cfg_.sd_fd_skips) ? cfg_.decoder_channels(j - 1) : 0};
      wiring_.push_back(w);
      face_.emplace_back("gen.face." + std::to_string(j), w.total(), cfg_.decoder_channels(j),
                         cfg_.norm, rng);
    }
    const int last = cfg_.decoder_channels(d - 1);
    DecoderWiring out_w{last, 0, cfg_.sd_fd_skips ? last : 0};
    wiring_.push_back(out_w);
    face_out_ = std::make_unique<FaceOut>("gen.face.out", out_w.total(), 3, rng);
    seg_out_ = std::make_unique<SegOut>("gen.seg.out", last, cfg_.mask_channels, rng);
    check_wiring();
  }

  const GeneratorConfig& config() const { return cfg_; }

  /// Per face-decoder block input composition; the final entry is the
  /// output block.
  const std::vector<DecoderWiring>& wiring() const { return wiring_; }

  GeneratorOutput<Scalar> forward(const Tensor<Scalar>& x) {
    if (x.channels() != 3 || x.height() != cfg_.input_size || x.width() != cfg_.input_size) {
      throw ShapeError("generator expects [N,3," + std::to_string(cfg_.input_size) + "," +
                       std::to_string(cfg_.input_size) + "], got " + x.shape_string());
    }
    const int d = cfg_.depth;
    enc_out_.assign(d, {});
    seg_feat_.assign(d, {});
    face_feat_.assign(d, {});
    enc_out_[0] = encoder_[0].forward(x);
    for (int i = 1; i < d; ++i) enc_out_[i] = encoder_[i].forward(enc_out_[i - 1]);

    for (int j = 0; j < d; ++j) {
      if (j == 0) {
        seg_feat_[j] = seg_[j].forward(enc_out_[d - 1]);
      } else {
        seg_feat_[j] = seg_[j].forward(concat_channels({&seg_feat_[j - 1], &enc_out_[d - 1 - j]}));
      }
    }
    for (int j = 0; j < d; ++j) {
      if (j == 0) {
        face_feat_[j] = face_[j].forward(enc_out_[d - 1]);
      } else if (cfg_.sd_fd_skips) {
        face_feat_[j] = face_[j].forward(
            concat_channels({&face_feat_[j - 1], &enc_out_[d - 1 - j], &seg_feat_[j - 1]}));
      } else {
        face_feat_[j] = face_[j].forward(concat_channels({&face_feat_[j - 1], &enc_out_[d - 1 - j]}));
      }
    }
    GeneratorOutput<Scalar> out;
    out.y_hat = cfg_.sd_fd_skips
                    ? face_out_->forward(concat_channels({&face_feat_[d - 1], &seg_feat_[d - 1]}))
                    : face_out_->forward(face_feat_[d - 1]);
    out.m_hat = seg_out_->forward(seg_feat_[d - 1]);
    return out;
  }

  /// Backpropagate output gradients from the last forward(). Either gradient
  /// may be empty, meaning zero. Returns the gradient w.r.t. the input image.
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_y, const Tensor<Scalar>& grad_m) {
    const int d = cfg_.depth;
    std::vector<Tensor<Scalar>> g_enc(d), g_seg(d), g_face(d);
    auto accumulate = [](Tensor<Scalar>& dst, Tensor<Scalar>&& src) {
      if (dst.empty()) dst = std::move(src);
      else dst += src;
    };

    if (!grad_y.empty()) {
      Tensor<Scalar> g = face_out_->backward(grad_y);
      if (cfg_.sd_fd_skips) {
        auto parts = split_channels(g, {wiring_[d].upsampled, wiring_[d].seg_skip});
        accumulate(g_face[d - 1], std::move(parts[0]));
        accumulate(g_seg[d - 1], std::move(parts[1]));
      } else {
        accumulate(g_face[d - 1], std::move(g));
      }
      for (int j = d - 1; j >= 0; --j) {
        if (g_face[j].empty()) continue;
        Tensor<Scalar> gi = face_[j].backward(g_face[j]);
        if (j == 0) {
          accumulate(g_enc[d - 1], std::move(gi));
          continue;
        }
        const auto& w = wiring_[j];
        auto parts = cfg_.sd_fd_skips
                         ? split_channels(gi, {w.upsampled, w.encoder_skip, w.seg_skip})
                         : split_channels(gi, {w.upsampled, w.encoder_skip});
        accumulate(g_face[j - 1], std::move(parts[0]));
        accumulate(g_enc[d - 1 - j], std::move(parts[1]));
        if (cfg_.sd_fd_skips) accumulate(g_seg[j - 1], std::move(parts[2]));
      }
    }
    if (!grad_m.empty()) accumulate(g_seg[d - 1], seg_out_->backward(grad_m));
    for (int j = d - 1; j >= 0; --j) {
      if (g_seg[j].empty()) continue;
      Tensor<Scalar> gi = seg_[j].backward(g_seg[j]);
      if (j == 0) {
        accumulate(g_enc[d - 1], std::move(gi));
        continue;
      }
      auto parts =
          split_channels(gi, {cfg_.decoder_channels(j - 1), cfg_.encoder_channels(d - 1 - j)});
      accumulate(g_seg[j - 1], std::move(parts[0]));
      accumulate(g_enc[d - 1 - j], std::move(parts[1]));
    }
    Tensor<Scalar> g_in;
    for (int i = d - 1; i >= 0; --i) {
      if (g_enc[i].empty()) continue;
      Tensor<Scalar> gi = encoder_[i].backward(g_enc[i]);
      if (i > 0) accumulate(g_enc[i - 1], std::move(gi));
      else g_in = std::move(gi);
    }
    return g_in;
  }

  nn::ParameterList<Scalar> parameters() {
    nn::ParameterList<Scalar> out;
    for (auto& b : encoder_) b.parameters(out);
    for (auto& b : face_) b.parameters(out);
    face_out_->parameters(out);
    for (auto& b : seg_) b.parameters(out);
    seg_out_->parameters(out);
    return out;
  }
  nn::ParameterList<Scalar> encoder_parameters() {
    nn::ParameterList<Scalar> out;
    for (auto& b : encoder_) b.parameters(out);
    return out;
  }
  nn::ParameterList<Scalar> face_decoder_parameters() {
    nn::ParameterList<Scalar> out;
    for (auto& b : face_) b.parameters(out);
    face_out_->parameters(out);
    return out;
  }
  nn::ParameterList<Scalar> seg_decoder_parameters() {
    nn::ParameterList<Scalar> out;
    for (auto& b : seg_) b.parameters(out);
    seg_out_->parameters(out);
    return out;
  }

  void set_requires_grad(bool on) {
    for (auto& b : encoder_) b.set_requires_grad(on);
    for (auto& b : face_) b.set_requires_grad(on);
    for (auto& b : seg_) b.set_requires_grad(on);
    face_out_->set_requires_grad(on);
    seg_out_->set_requires_grad(on);
  }

 private:
  using FaceOut = detail::OutBlock<Scalar, nn::Tanh>;
  using SegOut = detail::OutBlock<Scalar, nn::Sigmoid>;

  void check_wiring() const {
    for (int j = 0; j < cfg_.depth; ++j) {
      if (face_[j].in_channels() != wiring_[j].total()) {
        throw ConfigError("face decoder block " + std::to_string(j) + " wiring mismatch");
      }
    }
    if (face_out_->in_channels() != wiring_.back().total()) {
      throw ConfigError("face decoder output wiring mismatch");
    }
  }

  GeneratorConfig cfg_;
  std::vector<detail::DownBlock<Scalar>> encoder_;
  std::vector<detail::UpBlock<Scalar>> face_, seg_;
  std::unique_ptr<FaceOut> face_out_;
  std::unique_ptr<SegOut> seg_out_;
  std::vector<DecoderWiring> wiring_;
  std::vector<Tensor<Scalar>> enc_out_, seg_feat_, face_feat_;
};

/// PatchGAN layout. `layers` stride-2 stages then two stride-1 convolutions;
/// layers = 3 gives the 70x70 receptive field.
struct DiscriminatorConfig {
  int base_channels = 64;
  int max_channels = 512;
  int layers = 3;
  bool norm = true;

  void validate() const {
    if (layers < 1 || base_channels < 1) throw ConfigError("invalid discriminator config");
  }

  /// Score map side length for a square input.
  int score_size(int input) const {
    int s = input;
    for (int i = 0; i < layers; ++i) s = nn::ConvGeometry{4, 2, 1}.conv_out(s);
    s = nn::ConvGeometry{4, 1, 1}.conv_out(s);
    return nn::ConvGeometry{4, 1, 1}.conv_out(s);
  }

  int receptive_field() const {
    // Walk back from one output unit: r_in = (r_out - 1) * stride + kernel.
    int r = 1;
    r = (r - 1) * 1 + 4;
    r = (r - 1) * 1 + 4;
    for (int i = 0; i < layers; ++i) r = (r - 1) * 2 + 4;
    return r;
  }
};

/// Least-squares PatchGAN critic: raw, unsquashed per-patch scores.
template <typename Scalar>
class PatchDiscriminator {
 public:
  PatchDiscriminator(const DiscriminatorConfig& cfg, const std::string& name,
                     std::uint64_t seed = 0)
      : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    int in = 3;
    for (int i = 0; i <= cfg_.layers; ++i) {
      const int out = std::min(cfg_.base_channels << i, cfg_.max_channels);
      const nn::ConvGeometry g{4, i < cfg_.layers ? 2 : 1, 1};
      const bool norm = cfg_.norm && i > 0;
      stages_.push_back(Stage{nn::Conv2d<Scalar>(name + "." + std::to_string(i), in, out, g, !norm,
                                                 rng, detail::kInitStd),
                              norm, nn::InstanceNorm<Scalar>(), nn::LeakyRelu<Scalar>(Scalar(0.2))});
      in = out;
    }
    final_ = nn::Conv2d<Scalar>(name + ".out", in, 1, {4, 1, 1}, true, rng, detail::kInitStd);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& image) {
    if (image.channels() != 3) throw ShapeError("discriminator expects 3 channels");
    Tensor<Scalar> h = image;
    for (auto& s : stages_) {
      h = s.conv.forward(h);
      if (s.norm) h = s.in.forward(h);
      h = s.act.forward(h);
    }
    return final_.forward(h);
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad_scores) {
    Tensor<Scalar> g = final_.backward(grad_scores);
    for (auto it = stages_.rbegin(); it != stages_.rend(); ++it) {
      g = it->act.backward(g);
      if (it->norm) g = it->in.backward(g);
      g = it->conv.backward(g);
    }
    return g;
  }

  nn::ParameterList<Scalar> parameters() {
    nn::ParameterList<Scalar> out;
    for (auto& s : stages_) s.conv.parameters(out);
    final_.parameters(out);
    return out;
  }

  void set_requires_grad(bool on) {
    for (auto& s : stages_) s.conv.accumulate_grads = on;
    final_.accumulate_grads = on;
  }

  nn::Conv2d<Scalar>& final_layer() { return final_; }
  const DiscriminatorConfig& config() const { return cfg_; }

 private:
  struct Stage {
    nn::Conv2d<Scalar> conv;
    bool norm;
    nn::InstanceNorm<Scalar> in;
    nn::LeakyRelu<Scalar> act;
  };

  DiscriminatorConfig cfg_;
  std::vector<Stage> stages_;
  nn::Conv2d<Scalar> final_;
};

inline constexpr int kEmbeddingDim = 512;

struct IdentityExtractorConfig {
  int input_size = 64;
  int stem_channels = 16;
  std::vector<int> stage_channels{16, 32, 64, 128};
  int embedding_dim = kEmbeddingDim;

  void validate() const {
    if (stage_channels.empty()) throw ConfigError("identity extractor needs stages");
    if ((input_size >> stage_channels.size()) < 1) throw ConfigError("IE input too small");
  }
};

/// Small residual face embedder: stem, strided residual stages, global
/// average pooling and a linear projection to the embedding.
template <typename Scalar>
class IdentityExtractor {
 public:
  explicit IdentityExtractor(const IdentityExtractorConfig& cfg, std::uint64_t seed = 0)
      : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    auto he = [](int fan_in) { return std::sqrt(2.0 / fan_in); };
    stem_ = nn::Conv2d<Scalar>("ie.stem", 3, cfg_.stem_channels, {3, 1, 1}, true, rng, he(27));
    int in = cfg_.stem_channels;
    for (std::size_t s = 0; s < cfg_.stage_channels.size(); ++s) {
      const int out = cfg_.stage_channels[s];
      const std::string name = "ie.stage" + std::to_string(s);
      blocks_.push_back(Residual{
          nn::Conv2d<Scalar>(name + ".conv1", in, out, {3, 2, 1}, true, rng, he(in * 9)),
          nn::Relu<Scalar>(),
          nn::Conv2d<Scalar>(name + ".conv2", out, out, {3, 1, 1}, true, rng, 0.5 * he(out * 9)),
          nn::Conv2d<Scalar>(name + ".short", in, out, {1, 2, 0}, true, rng, he(in)),
          nn::Relu<Scalar>()});
      in = out;
    }
    head_ = nn::Linear<Scalar>("ie.embed", in, cfg_.embedding_dim, rng, 1.0 / std::sqrt(in));
  }

  /// (N, 3, S, S) -> (N, embedding_dim, 1, 1)
  Tensor<Scalar> forward(const Tensor<Scalar>& image) {
    if (image.channels() != 3 || image.height() != cfg_.input_size ||
        image.width() != cfg_.input_size) {
      throw ShapeError("identity extractor expects [N,3," + std::to_string(cfg_.input_size) +
                       "," + std::to_string(cfg_.input_size) + "], got " + image.shape_string());
    }
    Tensor<Scalar> h = stem_act_.forward(stem_.forward(image));
    for (auto& b : blocks_) {
      Tensor<Scalar> main = b.conv2.forward(b.act1.forward(b.conv1.forward(h)));
      main += b.shortcut.forward(h);
      h = b.act2.forward(main);
    }
    return head_.forward(pool_.forward(h));
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad_embedding) {
    Tensor<Scalar> g = pool_.backward(head_.backward(grad_embedding));
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
      g = it->act2.backward(g);
      Tensor<Scalar> gm = it->conv1.backward(it->act1.backward(it->conv2.backward(g)));
      gm += it->shortcut.backward(g);
      g = std::move(gm);
    }
    return stem_.backward(stem_act_.backward(g));
  }

  nn::ParameterList<Scalar> parameters() {
    nn::ParameterList<Scalar> out;
    stem_.parameters(out);
    for (auto& b : blocks_) {
      b.conv1.parameters(out);
      b.conv2.parameters(out);
      b.shortcut.parameters(out);
    }
    head_.parameters(out);
    return out;
  }

  void set_requires_grad(bool on) {
    stem_.accumulate_grads = on;
    for (auto& b : blocks_) {
      b.conv1.accumulate_grads = on;
      b.conv2.accumulate_grads = on;
      b.shortcut.accumulate_grads = on;
    }
    head_.accumulate_grads = on;
  }

  const IdentityExtractorConfig& config() const { return cfg_; }

 private:
  struct Residual {
    nn::Conv2d<Scalar> conv1;
    nn::Relu<Scalar> act1;
    nn::Conv2d<Scalar> conv2;
    nn::Conv2d<Scalar> shortcut;
    nn::Relu<Scalar> act2;
  };

  IdentityExtractorConfig cfg_;
  nn::Conv2d<Scalar> stem_;
  nn::Relu<Scalar> stem_act_;
  std::vector<Residual> blocks_;
  nn::GlobalAvgPool<Scalar> pool_;
  nn::Linear<Scalar> head_;
};

/// Embedding of sample `n` from an extractor output.
template <typename Scalar>
Vector<Scalar> embedding_of(const Tensor<Scalar>& batch, int n) {
  return batch.sample(n).col(0);
}

/// Additive angular margin scores: scale * cos(theta_i + margin * [i == target])
/// where theta_i is the angle between the embedding and class row i. A negative
/// target applies no margin.
template <typename Scalar>
Vector<Scalar> arcface_logits(const Vector<Scalar>& embedding, const RowMatrix<Scalar>& class_weights,
                              int target, Scalar margin, Scalar scale) {
  const Scalar norm = embedding.norm();
  if (!(norm > Scalar(0))) throw std::domain_error("arcface_logits: zero-norm embedding");
  if (class_weights.cols() != embedding.size()) throw ShapeError("arcface_logits: dimension mismatch");
  Vector<Scalar> out(class_weights.rows());
  for (Eigen::Index i = 0; i < class_weights.rows(); ++i) {
    const Scalar wn = class_weights.row(i).norm();
    if (!(wn > Scalar(0))) throw std::domain_error("arcface_logits: zero-norm class weight");
    Scalar c = class_weights.row(i).dot(embedding) / (wn * norm);
    c = std::clamp(c, Scalar(-1), Scalar(1));
    out[i] = i == target ? scale * std::cos(std::acos(c) + margin) : scale * c;
  }
  return out;
}

/// Classification head used to pretrain the identity extractor: arcface
/// logits followed by softmax cross entropy.
template <typename Scalar>
class ArcFaceHead {
 public:
  ArcFaceHead(int classes, int dim, Scalar margin, Scalar scale, std::uint64_t seed)
      : margin_(margin), scale_(scale), weight_("arcface.weight", {classes, dim}) {
    Rng rng(seed);
    weight_.init_normal(rng, 1.0 / std::sqrt(double(dim)));
  }

  /// Mean cross entropy over the batch. Writes d loss / d embedding into
  /// `grad_embeddings` and accumulates the class-weight gradient.
  Scalar loss(const Tensor<Scalar>& embeddings, const std::vector<int>& targets,
              Tensor<Scalar>& grad_embeddings) {
    const int n = embeddings.batch(), dim = int(embeddings.sample_size());
    const int classes = int(weight_.shape[0]);
    MatrixMap<Scalar> w(weight_.value.data(), classes, dim);
    MatrixMap<Scalar> gw(weight_.grad.data(), classes, dim);
    grad_embeddings = Tensor<Scalar>(n, dim, 1, 1);
    Scalar total = 0;
    const Scalar eps = Scalar(1e-6);
    for (int s = 0; s < n; ++s) {
      Vector<Scalar> e = embedding_of(embeddings, s);
      const Scalar en = std::max(e.norm(), Scalar(1e-12));
      const Vector<Scalar> eh = e / en;
      Vector<Scalar> logits(classes), dlogit_dc(classes), cosines(classes);
      std::vector<Scalar> wn(classes);
      for (int k = 0; k < classes; ++k) {
        wn[k] = std::max(w.row(k).norm(), Scalar(1e-12));
        const Scalar c = std::clamp(Scalar(w.row(k).dot(eh) / wn[k]), Scalar(-1) + eps, Scalar(1) - eps);
        cosines[k] = c;
        if (k == targets[s]) {
          logits[k] = scale_ * std::cos(std::acos(c) + margin_);
          dlogit_dc[k] = scale_ * (std::cos(margin_) + std::sin(margin_) * c / std::sqrt(1 - c * c));
        } else {
          logits[k] = scale_ * c;
          dlogit_dc[k] = scale_;
        }
      }
      const Scalar mx = logits.maxCoeff();
      Vector<Scalar> p = (logits.array() - mx).exp();
      const Scalar z = p.sum();
      p /= z;
      total += -(logits[targets[s]] - mx - std::log(z));
      Vector<Scalar> dl = p;
      dl[targets[s]] -= 1;
      dl /= Scalar(n);
      Vector<Scalar> ge = Vector<Scalar>::Zero(dim);
      for (int k = 0; k < classes; ++k) {
        const Scalar dc = dl[k] * dlogit_dc[k];
        if (dc == Scalar(0)) continue;
        const Vector<Scalar> wh = w.row(k).transpose() / wn[k];
        ge += dc * (wh - cosines[k] * eh) / en;
        gw.row(k) += dc * ((eh - cosines[k] * wh) / wn[k]).transpose();
      }
      grad_embeddings.sample(s).col(0) = ge;
    }
    return total / Scalar(n);
  }

  RowMatrix<Scalar> weights() const {
    return ConstMatrixMap<Scalar>(weight_.value.data(), weight_.shape[0], weight_.shape[1]);
  }
  nn::ParameterList<Scalar> parameters() { return {&weight_}; }

 private:
  Scalar margin_, scale_;
  nn::Parameter<Scalar> weight_;
};

}  // namespace unglass
