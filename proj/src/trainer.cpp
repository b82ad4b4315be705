#include "unglass/trainer.hpp"

#include <chrono>
#include <cstring>
#include <iostream>

#include "json.hpp"

namespace unglass {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(adam.learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (ie_pretrain_steps < 0 || ie_batch_size < 1) throw ConfigError("invalid identity pretraining settings");
  if (!(ie_learning_rate > 0)) throw ConfigError("ie_learning_rate must be > 0");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  loss_weights.validate();
  effective_generator().validate();
  discriminator.validate();
  effective_identity().validate();
}

GeneratorConfig TrainConfig::effective_generator() const {
  GeneratorConfig g = generator;
  if (disable_sd_fd_skips) g.sd_fd_skips = false;
  if (glasses_mask_only) g.mask_channels = 1;
  return g;
}

IdentityExtractorConfig TrainConfig::effective_identity() const {
  IdentityExtractorConfig ie = identity;
  ie.input_size = generator.input_size;
  return ie;
}

LossWeights TrainConfig::effective_weights() const {
  LossWeights w = loss_weights;
  if (disable_id_loss) w.id = 0;
  return w;
}

namespace {

json to_json(const TrainConfig& c) {
  const auto& g = c.generator;
  const auto& d = c.discriminator;
  const auto& w = c.loss_weights;
  return {
      {"generator",
       {{"depth", g.depth},
        {"base_channels", g.base_channels},
        {"max_channels", g.max_channels},
        {"input_size", g.input_size},
        {"norm", g.norm},
        {"sd_fd_skips", g.sd_fd_skips},
        {"mask_channels", g.mask_channels}}},
      {"discriminator",
       {{"base_channels", d.base_channels}, {"max_channels", d.max_channels}, {"layers", d.layers}, {"norm", d.norm}}},
      {"identity",
       {{"stem_channels", c.identity.stem_channels},
        {"stage_channels", c.identity.stage_channels},
        {"embedding_dim", c.identity.embedding_dim}}},
      {"learning_rate", c.adam.learning_rate},
      {"adam_beta1", c.adam.beta1},
      {"adam_beta2", c.adam.beta2},
      {"adam_eps", c.adam.eps},
      {"batch_size", c.batch_size},
      {"steps", c.steps},
      {"loss_weights",
       {{"gan_global", w.gan_global},
        {"gan_local", w.gan_local},
        {"l1_global", w.l1_global},
        {"l1_local", w.l1_local},
        {"seg", w.seg},
        {"id", w.id}}},
      {"id_distance", c.id_distance == IdDistance::kMeanSquare ? "mean-square" : "l2-norm"},
      {"disable_sd_fd_skips", c.disable_sd_fd_skips},
      {"glasses_mask_only", c.glasses_mask_only},
      {"disable_id_loss", c.disable_id_loss},
      {"ie_pretrain_steps", c.ie_pretrain_steps},
      {"ie_batch_size", c.ie_batch_size},
      {"ie_learning_rate", c.ie_learning_rate},
      {"arcface_margin", c.arcface_margin},
      {"arcface_scale", c.arcface_scale},
      {"checkpoint_every", c.checkpoint_every},
      {"seed", c.seed},
  };
}

template <typename T>
void read_if(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

TrainConfig from_json(const json& j) {
  TrainConfig c;
  if (j.contains("generator")) {
    const auto& g = j.at("generator");
    read_if(g, "depth", c.generator.depth);
    read_if(g, "base_channels", c.generator.base_channels);
    read_if(g, "max_channels", c.generator.max_channels);
    read_if(g, "input_size", c.generator.input_size);
    read_if(g, "norm", c.generator.norm);
    read_if(g, "sd_fd_skips", c.generator.sd_fd_skips);
    read_if(g, "mask_channels", c.generator.mask_channels);
  }
  if (j.contains("discriminator")) {
    const auto& d = j.at("discriminator");
    read_if(d, "base_channels", c.discriminator.base_channels);
    read_if(d, "max_channels", c.discriminator.max_channels);
    read_if(d, "layers", c.discriminator.layers);
    read_if(d, "norm", c.discriminator.norm);
  }
  if (j.contains("identity")) {
    const auto& ie = j.at("identity");
    read_if(ie, "stem_channels", c.identity.stem_channels);
    read_if(ie, "stage_channels", c.identity.stage_channels);
    read_if(ie, "embedding_dim", c.identity.embedding_dim);
  }
  read_if(j, "learning_rate", c.adam.learning_rate);
  read_if(j, "adam_beta1", c.adam.beta1);
  read_if(j, "adam_beta2", c.adam.beta2);
  read_if(j, "adam_eps", c.adam.eps);
  read_if(j, "batch_size", c.batch_size);
  read_if(j, "steps", c.steps);
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    read_if(w, "gan_global", c.loss_weights.gan_global);
    read_if(w, "gan_local", c.loss_weights.gan_local);
    read_if(w, "l1_global", c.loss_weights.l1_global);
    read_if(w, "l1_local", c.loss_weights.l1_local);
    read_if(w, "seg", c.loss_weights.seg);
    read_if(w, "id", c.loss_weights.id);
  }
  if (j.contains("id_distance")) {
    const auto s = j.at("id_distance").get<std::string>();
    if (s == "mean-square") c.id_distance = IdDistance::kMeanSquare;
    else if (s == "l2-norm") c.id_distance = IdDistance::kL2Norm;
    else throw ConfigError("id_distance must be mean-square or l2-norm");
  }
  read_if(j, "disable_sd_fd_skips", c.disable_sd_fd_skips);
  read_if(j, "glasses_mask_only", c.glasses_mask_only);
  read_if(j, "disable_id_loss", c.disable_id_loss);
  read_if(j, "ie_pretrain_steps", c.ie_pretrain_steps);
  read_if(j, "ie_batch_size", c.ie_batch_size);
  read_if(j, "ie_learning_rate", c.ie_learning_rate);
  read_if(j, "arcface_margin", c.arcface_margin);
  read_if(j, "arcface_scale", c.arcface_scale);
  read_if(j, "checkpoint_every", c.checkpoint_every);
  read_if(j, "seed", c.seed);
  return c;
}

constexpr char kMagic[8] = {'U', 'N', 'G', 'L', 'A', 'S', 'S', 'C'};

}  // namespace

std::string train_config_to_json(const TrainConfig& cfg, int indent) { return to_json(cfg).dump(indent); }

TrainConfig train_config_from_json(const std::string& text) {
  try {
    TrainConfig c = from_json(json::parse(text));
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed training config: ") + e.what());
  }
}

void write_checkpoint_header(std::ostream& out, const CheckpointHeader& h) {
  json arrays = json::array();
  for (const auto& a : h.arrays) arrays.push_back({{"name", a.name}, {"shape", a.shape}, {"count", a.count}});
  const json j = {{"format", "unglass-checkpoint"},
                  {"version", h.version},
                  {"scalar", h.scalar},
                  {"step", h.step},
                  {"final", h.final},
                  {"config", to_json(h.config)},
                  {"arrays", arrays},
                  {"adam_steps", {{"g", h.adam_g}, {"d_global", h.adam_d_global}, {"d_local", h.adam_d_local}}},
                  {"rng_state", h.rng_state},
                  {"order", h.order},
                  {"cursor", h.cursor}};
  const std::string text = j.dump();
  const std::uint64_t len = text.size();
  out.write(kMagic, sizeof(kMagic));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), std::streamsize(text.size()));
}

CheckpointHeader read_checkpoint_header(std::istream& in) {
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw CheckpointError("not a checkpoint file");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (std::uint64_t(1) << 30)) throw CheckpointError("corrupt checkpoint header");
  std::string text(len, '\0');
  in.read(text.data(), std::streamsize(len));
  if (!in) throw CheckpointError("checkpoint header is truncated");
  try {
    const json j = json::parse(text);
    CheckpointHeader h;
    h.version = j.at("version");
    if (h.version != 1) throw CheckpointError("unsupported checkpoint version " + std::to_string(h.version));
    h.scalar = j.at("scalar");
    h.step = j.at("step");
    h.final = j.at("final");
    h.config = from_json(j.at("config"));
    for (const auto& a : j.at("arrays")) {
      h.arrays.push_back({a.at("name"), a.at("shape").get<std::vector<int>>(), a.at("count")});
    }
    h.adam_g = j.at("adam_steps").at("g");
    h.adam_d_global = j.at("adam_steps").at("d_global");
    h.adam_d_local = j.at("adam_steps").at("d_local");
    h.rng_state = j.at("rng_state");
    h.order = j.at("order").get<std::vector<int>>();
    h.cursor = j.at("cursor");
    return h;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  return read_checkpoint_header(in);
}

double mask_iou(const Tensor<float>& m_hat, const Tensor<float>& m) {
  m_hat.require_same(m, "mask_iou");
  const auto a = (m_hat.values().array() > 0.5f);
  const auto b = (m.values().array() >= 0.5f);
  const auto inter = (a && b).count();
  const auto uni = (a || b).count();
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

std::string step_log_json(const StepLog& log) {
  const auto& r = log.report;
  return json({{"step", log.step},
               {"g_gan_global", r.terms.g_gan_global},
               {"g_gan_local", r.terms.g_gan_local},
               {"l1_global", r.terms.l1_global},
               {"l1_local", r.terms.l1_local},
               {"seg", r.terms.seg},
               {"id", r.terms.id},
               {"total", r.total},
               {"d_global", r.d_global},
               {"d_local", r.d_local},
               {"seconds", log.seconds}})
      .dump();
}

std::vector<PairedSample> load_all_samples(const DatasetManifest& manifest) {
  std::vector<PairedSample> out;
  out.reserve(manifest.records.size());
  for (std::size_t i = 0; i < manifest.records.size(); ++i) out.push_back(load_sample(manifest, i));
  return out;
}

FitResult fit_samples(TrainState<float>& st, const std::vector<PairedSample>& samples, const FitOptions& opts,
                      bool pretrain_ie) {
  if (samples.empty()) throw DatasetError("no training samples");
  const int size = st.config.generator.input_size;
  for (const auto& s : samples) {
    if (s.x.height() != size || s.x.width() != size) {
      throw ConfigError("training images are " + std::to_string(s.x.width()) + "x" + std::to_string(s.x.height()) +
                        " but the generator expects " + std::to_string(size));
    }
  }
  FitResult result;
  if (pretrain_ie && st.config.ie_pretrain_steps > 0) {
    std::vector<int> all(samples.size());
    std::iota(all.begin(), all.end(), 0);
    const auto batch = make_batch<float>(samples, all);
    result.ie_pretrain_loss = pretrain_identity(st.identity, batch.y, batch.identity_ids, st.config);
  }
  std::ofstream log;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    log.open(opts.out_dir / "metrics.jsonl", st.step == 0 ? std::ios::trunc : std::ios::app);
    if (!log) throw std::runtime_error("cannot write metrics log in " + opts.out_dir.string());
  }
  const auto start = std::chrono::steady_clock::now();
  long batch_id = 0;
  while (st.step < st.config.steps) {
    const auto indices = next_batch_indices(st, int(samples.size()));
    const auto batch = make_batch<float>(samples, indices, batch_id++);
    StepLog entry;
    entry.report = train_step(st, batch);
    entry.step = st.step;
    entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (log.is_open()) log << step_log_json(entry) << "\n";
    if (opts.on_step) opts.on_step(entry);
    result.history.push_back(entry);
    if (!opts.out_dir.empty() && st.config.checkpoint_every > 0 && st.step % st.config.checkpoint_every == 0 &&
        st.step < st.config.steps) {
      const auto path = opts.out_dir / ("checkpoint_" + std::to_string(st.step) + ".ckpt");
      save_checkpoint(st, path);
      result.checkpoints.push_back(path);
    }
  }
  if (!opts.out_dir.empty()) {
    result.final_checkpoint = opts.out_dir / "final.ckpt";
    save_checkpoint(st, result.final_checkpoint, true);
    result.checkpoints.push_back(result.final_checkpoint);
  }
  return result;
}

FitResult fit(const TrainConfig& cfg, const DatasetManifest& manifest, const std::filesystem::path& out_dir) {
  auto state = std::make_unique<TrainState<float>>(cfg);
  FitOptions opts;
  opts.out_dir = out_dir;
  return fit_samples(*state, load_all_samples(manifest), opts);
}

}  // namespace unglass
