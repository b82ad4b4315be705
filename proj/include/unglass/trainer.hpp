#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iosfwd>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "unglass/image.hpp"
#include "unglass/losses.hpp"
#include "unglass/netarch.hpp"
#include "unglass/nn/adam.hpp"
#include "unglass/synthkit.hpp"

namespace unglass {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline GeneratorConfig desk_generator_config() {
  GeneratorConfig g;
  g.depth = 4;
  g.base_channels = 32;
  g.input_size = 64;
  return g;
}

inline DiscriminatorConfig desk_discriminator_config() {
  DiscriminatorConfig d;
  d.base_channels = 32;
  return d;
}

struct TrainConfig {
  GeneratorConfig generator = desk_generator_config();
  DiscriminatorConfig discriminator = desk_discriminator_config();
  IdentityExtractorConfig identity;
  nn::AdamOptions adam;
  int batch_size = 4;
  long steps = 3000;
  LossWeights loss_weights;
  IdDistance id_distance = IdDistance::kMeanSquare;

  bool disable_sd_fd_skips = false;
  bool glasses_mask_only = false;
  bool disable_id_loss = false;

  // Identity extractor pretraining before it is frozen.
  int ie_pretrain_steps = 300;
  int ie_batch_size = 8;
  double ie_learning_rate = 1e-3;
  double arcface_margin = 0.5;
  double arcface_scale = 32;

  long checkpoint_every = 1000;
  std::uint64_t seed = 0;

  void validate() const;
  GeneratorConfig effective_generator() const;
  IdentityExtractorConfig effective_identity() const;
  LossWeights effective_weights() const;
};

std::string train_config_to_json(const TrainConfig& cfg, int indent = 2);
TrainConfig train_config_from_json(const std::string& text);

/// Network-ready batch: x, y in [-1, 1], m with 2 binary channels.
template <typename Scalar>
struct TrainBatch {
  Tensor<Scalar> x, y, m;
  std::vector<int> identity_ids;
  long batch_id = 0;
};

template <typename Scalar>
TrainBatch<Scalar> make_batch(const std::vector<PairedSample>& samples, const std::vector<int>& indices,
                              long batch_id = 0) {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  const auto& first = samples.at(std::size_t(indices[0]));
  const int n = int(indices.size()), h = first.x.height(), w = first.x.width();
  TrainBatch<Scalar> b;
  b.x = Tensor<Scalar>(n, 3, h, w);
  b.y = Tensor<Scalar>(n, 3, h, w);
  b.m = Tensor<Scalar>(n, 2, h, w);
  b.batch_id = batch_id;
  for (int i = 0; i < n; ++i) {
    const auto& s = samples.at(std::size_t(indices[std::size_t(i)]));
    if (s.x.height() != h || s.x.width() != w) throw ShapeError("samples in a batch differ in size");
    b.x.set_sample(i, s.x.cast<Scalar>());
    b.y.set_sample(i, s.y.cast<Scalar>());
    b.m.set_sample(i, s.m.cast<Scalar>());
    b.identity_ids.push_back(s.identity_id);
  }
  return b;
}

/// Every trainable piece of a run. Optimizers hold pointers into the models,
/// so a state is pinned in memory once built.
template <typename Scalar>
class TrainState {
 public:
  explicit TrainState(const TrainConfig& cfg)
      : config(checked(cfg)),
        generator(config.effective_generator(), mix_seed(config.seed, 1)),
        d_global(config.discriminator, "d_global", mix_seed(config.seed, 2)),
        d_local(config.discriminator, "d_local", mix_seed(config.seed, 3)),
        identity(config.effective_identity(), mix_seed(config.seed, 4)),
        opt_g(generator.parameters(), config.adam),
        opt_dg(d_global.parameters(), config.adam),
        opt_dl(d_local.parameters(), config.adam),
        rng(mix_seed(config.seed, 5)) {
    identity.set_requires_grad(false);
  }
  TrainState(const TrainState&) = delete;
  TrainState& operator=(const TrainState&) = delete;

  TrainConfig config;
  long step = 0;
  Generator<Scalar> generator;
  PatchDiscriminator<Scalar> d_global, d_local;
  IdentityExtractor<Scalar> identity;
  nn::Adam<Scalar> opt_g, opt_dg, opt_dl;
  Rng rng;
  // Data order of the current epoch and the position inside it.
  std::vector<int> order;
  std::size_t cursor = 0;

 private:
  static const TrainConfig& checked(const TrainConfig& cfg) {
    cfg.validate();
    return cfg;
  }
};

namespace detail {

/// One least-squares critic update on real and fake batches stacked together
/// (instance normalization keeps samples independent).
template <typename Scalar>
double discriminator_update(PatchDiscriminator<Scalar>& d, nn::Adam<Scalar>& opt, const Tensor<Scalar>& real,
                            const Tensor<Scalar>& fake) {
  const int n = real.batch();
  const Tensor<Scalar> scores = d.forward(concat_batch({&real, &fake}));
  auto lg = lsgan_d_loss_grad(scores.slice(0, n), scores.slice(n, fake.batch()));
  opt.zero_grad();
  d.backward(concat_batch({&lg.grad_real, &lg.grad_fake}));
  opt.step();
  return double(lg.value);
}

/// Gradient of weight * lsgan_g_loss(d(input)) w.r.t. input; leaves d's
/// parameter gradients untouched.
template <typename Scalar>
Tensor<Scalar> adversarial_grad(PatchDiscriminator<Scalar>& d, const Tensor<Scalar>& input, double weight,
                                double& term) {
  d.set_requires_grad(false);
  auto lg = lsgan_g_loss_grad(d.forward(input));
  term = double(lg.value);
  lg.grad.values() *= Scalar(weight);
  Tensor<Scalar> g = d.backward(lg.grad);
  d.set_requires_grad(true);
  return g;
}

template <typename Scalar>
void add_scaled(Tensor<Scalar>& dst, const Tensor<Scalar>& src, double weight) {
  dst.require_same(src, "gradient accumulation");
  dst.values() += Scalar(weight) * src.values();
}

template <typename Scalar>
LossReport train_step_impl(TrainState<Scalar>& st, const TrainBatch<Scalar>& b) {
  const LossWeights w = st.config.effective_weights();
  const int mask_channels = st.generator.config().mask_channels;
  const Tensor<Scalar> m_g = split_channels(b.m, {1, b.m.channels() - 1})[0];
  const Tensor<Scalar>& m_target = mask_channels == 2 ? b.m : m_g;

  const GeneratorOutput<Scalar> out = st.generator.forward(b.x);
  const Tensor<Scalar>& y_hat = out.y_hat;
  const Tensor<Scalar> y_local = masked(b.y, m_g);
  const Tensor<Scalar> y_hat_local = masked(y_hat, m_g);

  LossReport report;
  const double d_global = discriminator_update(st.d_global, st.opt_dg, b.y, y_hat);
  const double d_local = discriminator_update(st.d_local, st.opt_dl, y_local, y_hat_local);

  LossTerms terms;
  Tensor<Scalar> grad_y = Tensor<Scalar>(y_hat.batch(), 3, y_hat.height(), y_hat.width());
  grad_y += adversarial_grad(st.d_global, y_hat, w.gan_global, terms.g_gan_global);
  grad_y += masked(adversarial_grad(st.d_local, y_hat_local, w.gan_local, terms.g_gan_local), m_g);

  const auto l1 = l1_loss_grad(y_hat, b.y);
  terms.l1_global = double(l1.value);
  add_scaled(grad_y, l1.grad, w.l1_global);

  const auto l1_local = l1_local_loss_grad(y_hat, b.y, m_g);
  terms.l1_local = double(l1_local.value);
  add_scaled(grad_y, l1_local.grad, w.l1_local);

  auto seg = seg_bce_grad(out.m_hat, m_target);
  terms.seg = double(seg.value);
  seg.grad.values() *= Scalar(w.seg);

  if (w.id > 0) {
    const Tensor<Scalar> emb_true = st.identity.forward(b.y);
    const Tensor<Scalar> emb_hat = st.identity.forward(y_hat);
    auto id = id_loss_grad(emb_hat, emb_true, st.config.id_distance);
    terms.id = double(id.value);
    id.grad.values() *= Scalar(w.id);
    grad_y += st.identity.backward(id.grad);
  }

  st.opt_g.zero_grad();
  st.generator.backward(grad_y, seg.grad);
  st.opt_g.step();
  ++st.step;

  report = total_g_loss(terms, w);
  report.d_global = d_global;
  report.d_local = d_local;
  if (!std::isfinite(report.total) || !std::isfinite(d_global) || !std::isfinite(d_local)) {
    throw NonFiniteError("non-finite loss");
  }
  return report;
}

}  // namespace detail

/// Critic updates (global, then local on ground-truth glasses masks), then
/// one generator update against the refreshed critics.
template <typename Scalar>
LossReport train_step(TrainState<Scalar>& st, const TrainBatch<Scalar>& batch) {
  try {
    return detail::train_step_impl(st, batch);
  } catch (const NonFiniteError& e) {
    throw NonFiniteError("step " + std::to_string(st.step) + ", batch " + std::to_string(batch.batch_id) + ": " +
                         e.what());
  }
}

/// Indices of the next batch; reshuffles with the state's generator at each
/// epoch boundary.
template <typename Scalar>
std::vector<int> next_batch_indices(TrainState<Scalar>& st, int dataset_size) {
  if (dataset_size < 1) throw std::invalid_argument("empty training set");
  std::vector<int> out;
  while (int(out.size()) < std::min(st.config.batch_size, dataset_size)) {
    if (st.cursor >= st.order.size() || int(st.order.size()) != dataset_size) {
      st.order.resize(std::size_t(dataset_size));
      std::iota(st.order.begin(), st.order.end(), 0);
      for (int i = dataset_size - 1; i > 0; --i) std::swap(st.order[std::size_t(i)], st.order[std::size_t(st.rng.integer(0, i))]);
      st.cursor = 0;
      // A batch never straddles two epochs.
      if (!out.empty()) break;
    }
    out.push_back(st.order[st.cursor++]);
  }
  return out;
}

/// ArcFace pretraining of the identity extractor on labelled images, after
/// which it is frozen. Returns the loss per step.
template <typename Scalar>
std::vector<double> pretrain_identity(IdentityExtractor<Scalar>& ie, const Tensor<Scalar>& images,
                                      const std::vector<int>& identity_ids, const TrainConfig& cfg) {
  if (images.batch() != int(identity_ids.size()) || images.batch() == 0) {
    throw std::invalid_argument("pretrain_identity: images and labels differ in count");
  }
  std::vector<int> classes(identity_ids);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  std::vector<int> labels;
  for (int id : identity_ids) {
    labels.push_back(int(std::lower_bound(classes.begin(), classes.end(), id) - classes.begin()));
  }
  ArcFaceHead<Scalar> head(int(classes.size()), ie.config().embedding_dim, Scalar(cfg.arcface_margin),
                           Scalar(cfg.arcface_scale), mix_seed(cfg.seed, 6));
  nn::ParameterList<Scalar> params = ie.parameters();
  for (auto* p : head.parameters()) params.push_back(p);
  nn::AdamOptions opts;
  opts.learning_rate = cfg.ie_learning_rate;
  opts.beta1 = 0.9;
  nn::Adam<Scalar> opt(params, opts);
  Rng rng(mix_seed(cfg.seed, 7));
  ie.set_requires_grad(true);
  std::vector<double> history;
  const int n = images.batch(), bs = std::min(cfg.ie_batch_size, n);
  std::vector<int> order(static_cast<std::size_t>(n));
  std::size_t cursor = order.size();
  for (int step = 0; step < cfg.ie_pretrain_steps; ++step) {
    Tensor<Scalar> batch(bs, 3, images.height(), images.width());
    std::vector<int> targets;
    for (int i = 0; i < bs; ++i) {
      if (cursor >= order.size()) {
        std::iota(order.begin(), order.end(), 0);
        for (int k = n - 1; k > 0; --k) std::swap(order[std::size_t(k)], order[std::size_t(rng.integer(0, k))]);
        cursor = 0;
      }
      const int idx = order[cursor++];
      batch.set_sample(i, images, idx);
      targets.push_back(labels[std::size_t(idx)]);
    }
    opt.zero_grad();
    Tensor<Scalar> grad;
    const Tensor<Scalar> emb = ie.forward(batch);
    history.push_back(double(head.loss(emb, targets, grad)));
    ie.backward(grad);
    opt.step();
  }
  ie.set_requires_grad(false);
  return history;
}

struct RemovalOptions {
  bool composite = false;  // keep y_hat only inside dilate(m_hat_g > 0.5, radius)
  int composite_radius = 2;
};

/// (y_hat, m_hat) for one [-1, 1] image at the generator's input size.
template <typename Scalar>
std::pair<Image, Image> remove_glasses(Generator<Scalar>& g, const Image& x, const RemovalOptions& opts = {}) {
  const int s = g.config().input_size;
  if (x.channels() != 3 || x.height() != s || x.width() != s) {
    throw ConfigError("input image is " + std::to_string(x.width()) + "x" + std::to_string(x.height()) + " with " +
                      std::to_string(x.channels()) + " channels but the model expects " + std::to_string(s) + "x" +
                      std::to_string(s) + " RGB; align/resize the face first");
  }
  const auto out = g.forward(x.cast<Scalar>());
  Image y_hat = out.y_hat.template cast<float>();
  Image m_hat = out.m_hat.template cast<float>();
  if (opts.composite) y_hat = paste_inside_mask(x, y_hat, channel_slice(m_hat, 0), opts.composite_radius);
  return {y_hat, m_hat};
}

/// Jointly over all mask channels: |a & b| / |a | b| with a = m_hat > 0.5.
double mask_iou(const Tensor<float>& m_hat, const Tensor<float>& m);

// ---- checkpoints ------------------------------------------------------------

struct ArrayRecord {
  std::string name;
  std::vector<int> shape;
  long count = 0;
};

struct CheckpointHeader {
  int version = 1;
  std::string scalar;  // "float32" | "float64"
  long step = 0;
  bool final = false;
  TrainConfig config;
  std::vector<ArrayRecord> arrays;
  long adam_g = 0, adam_d_global = 0, adam_d_local = 0;
  std::string rng_state;
  std::vector<int> order;
  long cursor = 0;
};

void write_checkpoint_header(std::ostream& out, const CheckpointHeader& h);
CheckpointHeader read_checkpoint_header(std::istream& in);
CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

namespace detail {

template <typename Scalar>
struct NamedArray {
  std::string name;
  std::vector<int> shape;
  Vector<Scalar>* values;
};

template <typename Scalar>
std::vector<NamedArray<Scalar>> checkpoint_arrays(TrainState<Scalar>& st) {
  std::vector<NamedArray<Scalar>> out;
  auto add_params = [&](const nn::ParameterList<Scalar>& params) {
    for (auto* p : params) out.push_back({p->name, p->shape, &p->value});
  };
  add_params(st.generator.parameters());
  add_params(st.d_global.parameters());
  add_params(st.d_local.parameters());
  add_params(st.identity.parameters());
  auto add_moments = [&](nn::Adam<Scalar>& opt, const std::string& tag) {
    const auto& params = opt.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.push_back({"adam." + tag + ".m." + params[i]->name, params[i]->shape, &opt.first_moments()[i]});
      out.push_back({"adam." + tag + ".v." + params[i]->name, params[i]->shape, &opt.second_moments()[i]});
    }
  };
  add_moments(st.opt_g, "g");
  add_moments(st.opt_dg, "d_global");
  add_moments(st.opt_dl, "d_local");
  return out;
}

template <typename Scalar>
const char* scalar_name() {
  return sizeof(Scalar) == 8 ? "float64" : "float32";
}

template <typename Stored, typename Scalar>
void read_array(std::istream& in, Vector<Scalar>& dst) {
  std::vector<Stored> buf(std::size_t(dst.size()));
  in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * sizeof(Stored)));
  if (!in) throw CheckpointError("checkpoint is truncated");
  for (Eigen::Index i = 0; i < dst.size(); ++i) dst[i] = Scalar(buf[std::size_t(i)]);
}

}  // namespace detail

template <typename Scalar>
void save_checkpoint(TrainState<Scalar>& st, const std::filesystem::path& path, bool final = false) {
  CheckpointHeader h;
  h.scalar = detail::scalar_name<Scalar>();
  h.step = st.step;
  h.final = final;
  h.config = st.config;
  h.adam_g = st.opt_g.steps();
  h.adam_d_global = st.opt_dg.steps();
  h.adam_d_local = st.opt_dl.steps();
  h.rng_state = st.rng.state();
  h.order = st.order;
  h.cursor = long(st.cursor);
  const auto arrays = detail::checkpoint_arrays(st);
  for (const auto& a : arrays) h.arrays.push_back({a.name, a.shape, long(a.values->size())});
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    write_checkpoint_header(out, h);
    for (const auto& a : arrays) {
      out.write(reinterpret_cast<const char*>(a.values->data()), std::streamsize(a.values->size() * sizeof(Scalar)));
    }
    if (!out) throw CheckpointError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Rebuilds the full training state recorded in a checkpoint.
template <typename Scalar>
std::unique_ptr<TrainState<Scalar>> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const CheckpointHeader h = read_checkpoint_header(in);
  auto st = std::make_unique<TrainState<Scalar>>(h.config);
  const auto arrays = detail::checkpoint_arrays(*st);
  if (arrays.size() != h.arrays.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(h.arrays.size()) + " arrays but its config builds " +
                          std::to_string(arrays.size()));
  }
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    if (arrays[i].name != h.arrays[i].name || long(arrays[i].values->size()) != h.arrays[i].count) {
      throw CheckpointError("checkpoint array " + h.arrays[i].name + " does not match model array " + arrays[i].name);
    }
  }
  for (const auto& a : arrays) {
    if (h.scalar == "float64") detail::read_array<double>(in, *a.values);
    else if (h.scalar == "float32") detail::read_array<float>(in, *a.values);
    else throw CheckpointError("unknown checkpoint scalar type " + h.scalar);
  }
  st->step = h.step;
  st->opt_g.set_steps(h.adam_g);
  st->opt_dg.set_steps(h.adam_d_global);
  st->opt_dl.set_steps(h.adam_d_local);
  st->rng.set_state(h.rng_state);
  st->order = h.order;
  st->cursor = std::size_t(h.cursor);
  return st;
}

// ---- orchestration ----------------------------------------------------------

struct StepLog {
  long step = 0;
  LossReport report;
  double seconds = 0;
};

std::string step_log_json(const StepLog& log);

struct FitOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::function<void(const StepLog&)> on_step;
};

struct FitResult {
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path final_checkpoint;
  std::vector<double> ie_pretrain_loss;
  std::vector<StepLog> history;
};

/// Pretrains and freezes the identity extractor on the targets, then runs
/// `state.config.steps - state.step` generator steps. Writes metrics.jsonl
/// and checkpoints under opts.out_dir when it is set.
FitResult fit_samples(TrainState<float>& state, const std::vector<PairedSample>& samples, const FitOptions& opts,
                      bool pretrain_ie = true);

/// Loads every manifest record and trains a fresh state.
FitResult fit(const TrainConfig& cfg, const DatasetManifest& manifest, const std::filesystem::path& out_dir);

std::vector<PairedSample> load_all_samples(const DatasetManifest& manifest);

}  // namespace unglass
