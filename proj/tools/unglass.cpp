#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "unglass/image_io.hpp"
#include "unglass/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace unglass;

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

fs::path default_out(const std::string& subcommand) {
  const char* root = std::getenv("UNGLASS_OUT_ROOT");
  return fs::path(root && *root ? root : "unglass-out") / subcommand;
}

/// Options of one subcommand, each bound to a JSON pointer into its
/// effective configuration. Precedence: defaults < --config file < flags.
class Settings {
 public:
  Settings(CLI::App* app, std::string name, json defaults) : app_(app), name_(std::move(name)), defaults_(std::move(defaults)) {
    app_->add_option("--config", config_path_, "JSON config; explicit flags override its values");
  }

  template <typename T>
  CLI::Option* option(const std::string& flag, const std::string& pointer, const std::string& help) {
    auto holder = std::make_shared<T>();
    auto* opt = app_->add_option(flag, *holder, help);
    bindings_.push_back({opt, pointer, [holder] { return json(*holder); }});
    return opt;
  }

  CLI::Option* flag(const std::string& flag, const std::string& pointer, const std::string& help) {
    auto* opt = app_->add_flag(flag, help);
    bindings_.push_back({opt, pointer, [] { return json(true); }});
    return opt;
  }

  json resolve() const {
    json eff = defaults_;
    if (!config_path_.empty()) eff.merge_patch(read_json_file(config_path_));
    for (const auto& b : bindings_) {
      if (b.opt->count() > 0) eff[json::json_pointer(b.pointer)] = b.value();
    }
    if (eff.value("out", std::string()).empty()) eff["out"] = default_out(name_).string();
    return eff;
  }

 private:
  struct Binding {
    CLI::Option* opt;
    std::string pointer;
    std::function<json()> value;
  };
  CLI::App* app_;
  std::string name_;
  json defaults_;
  std::string config_path_;
  std::vector<Binding> bindings_;
};

fs::path prepare_out(const json& eff) {
  const fs::path out = eff.at("out").get<std::string>();
  fs::create_directories(out);
  write_json_file(out / "effective_config.json", eff);
  return out;
}

// ---- synthesis settings ------------------------------------------------------

json synthesis_json(const SynthesisConfig& c) {
  return {{"image_size", c.image_size},
          {"tint_alpha_range", {c.tint_alpha_min, c.tint_alpha_max}},
          {"tint_probability", c.tint_probability},
          {"refraction_strength_range", {c.refraction_strength_min, c.refraction_strength_max}},
          {"glare_probability", c.glare_probability},
          {"glare_count_range", {c.glare_count_min, c.glare_count_max}},
          {"r_dilate", c.r_dilate},
          {"pose_tolerance", c.pose_tolerance}};
}

SynthesisConfig synthesis_from(const json& j, std::uint64_t seed) {
  SynthesisConfig c;
  c.image_size = j.at("image_size");
  c.tint_alpha_min = j.at("tint_alpha_range").at(0);
  c.tint_alpha_max = j.at("tint_alpha_range").at(1);
  c.tint_probability = j.at("tint_probability");
  c.refraction_strength_min = j.at("refraction_strength_range").at(0);
  c.refraction_strength_max = j.at("refraction_strength_range").at(1);
  c.glare_probability = j.at("glare_probability");
  c.glare_count_min = j.at("glare_count_range").at(0);
  c.glare_count_max = j.at("glare_count_range").at(1);
  c.r_dilate = j.at("r_dilate");
  c.pose_tolerance = j.at("pose_tolerance");
  c.rng_seed = seed;
  c.validate();
  return c;
}

std::vector<fs::path> png_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::invalid_argument(dir.string() + " is not a directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

Image read_rgb_signed(const fs::path& path) {
  Image img = read_png(path);
  if (img.channels() == 4) img = channel_slice(img, 0, 3);
  if (img.channels() == 1) img = concat_channels({&img, &img, &img});
  if (img.channels() != 3) throw std::invalid_argument(path.string() + " is not an RGB image");
  return to_signed(img);
}

std::unique_ptr<TrainState<float>> open_checkpoint(const std::string& path) {
  if (path.empty()) throw std::invalid_argument("--checkpoint is required");
  if (!fs::exists(path)) throw std::invalid_argument("checkpoint " + path + " does not exist");
  return load_checkpoint<float>(path);
}

// ---- subcommands -------------------------------------------------------------

int run_toy_faces(const json& eff) {
  const fs::path out = prepare_out(eff);
  const std::uint64_t seed = eff.at("seed");
  const int size = eff.at("image_size");
  const auto faces = procedural_toy_faces(eff.at("n"), seed, size, eff.at("faces_per_identity"));
  save_face_records(out / "faces", faces);
  const int glasses = eff.at("glasses");
  if (glasses > 0) save_template_pool(out / "glasses", procedural_glasses_pool(glasses, mix_seed(seed, 1), size));
  std::cout << "wrote " << faces.size() << " faces and " << glasses << " templates to " << out << "\n";
  return 0;
}

int run_synth_data(const json& eff) {
  const SynthesisConfig cfg = synthesis_from(eff.at("synthesis"), eff.at("seed"));
  const std::string faces_dir = eff.at("faces"), glasses_dir = eff.at("glasses");
  if (faces_dir.empty() || glasses_dir.empty()) throw std::invalid_argument("--faces and --glasses are required");
  const fs::path out = prepare_out(eff);
  auto faces = load_face_records(faces_dir);
  for (auto& f : faces) {
    if (f.image.height() != cfg.image_size || f.image.width() != cfg.image_size) f = align_record(f, cfg.image_size);
  }
  const auto pool = load_template_pool(glasses_dir);
  const auto manifest = emit_dataset(faces, pool, cfg, out);
  std::cout << "wrote " << manifest.records.size() << " pairs to " << out << "\n";
  return 0;
}

int run_train(const json& eff) {
  const std::string data = eff.at("data");
  if (data.empty()) throw std::invalid_argument("--data is required");
  const TrainConfig cfg = train_config_from_json(eff.at("train").dump());
  const fs::path out = prepare_out(eff);
  const auto manifest = load_manifest(fs::path(data) / "manifest.jsonl");
  const std::string resume = eff.value("resume", std::string());
  std::unique_ptr<TrainState<float>> state;
  if (resume.empty()) {
    state = std::make_unique<TrainState<float>>(cfg);
  } else {
    state = load_checkpoint<float>(resume);
    state->config.steps = cfg.steps;
    state->config.checkpoint_every = cfg.checkpoint_every;
  }
  FitOptions opts;
  opts.out_dir = out;
  const long every = std::max<long>(1, state->config.steps / 20);
  opts.on_step = [every](const StepLog& log) {
    if (log.step % every == 0) {
      std::cout << "step " << log.step << " total " << log.report.total << " l1 " << log.report.terms.l1_global
                << " seg " << log.report.terms.seg << "\n";
    }
  };
  const auto result = fit_samples(*state, load_all_samples(manifest), opts, state->step == 0);
  std::cout << "final checkpoint " << result.final_checkpoint << "\n";
  return 0;
}

int run_remove(const json& eff) {
  const auto inputs = eff.at("inputs").get<std::vector<std::string>>();
  if (inputs.empty()) throw std::invalid_argument("--input is required");
  auto state = open_checkpoint(eff.at("checkpoint"));
  const fs::path out = prepare_out(eff);
  RemovalOptions opts;
  opts.composite = eff.at("composite");
  opts.composite_radius = eff.at("composite_radius");
  json written = json::array();
  for (const auto& input : inputs) {
    const auto [y_hat, m_hat] = remove_glasses(state->generator, read_rgb_signed(input), opts);
    const std::string stem = fs::path(input).stem().string();
    const fs::path y_path = out / (stem + "_removed.png"), m_path = out / (stem + "_mask.png");
    write_png(y_path, to_unit(y_hat));
    write_png(m_path, m_hat);
    written.push_back({{"input", input}, {"y_hat", y_path.string()}, {"m_hat", m_path.string()}});
  }
  write_json_file(out / "outputs.json", written);
  return 0;
}

int run_eval_fid(const json& eff) {
  const std::string real = eff.at("real"), fake = eff.at("fake");
  if (real.empty() || fake.empty()) throw std::invalid_argument("--real and --fake are required");
  const fs::path out = prepare_out(eff);
  RandomProjectionEmbedder embedder(eff.at("embed_size"), eff.at("embed_dim"), eff.at("seed"));
  auto stats_of = [&](const std::string& dir) {
    std::vector<Image> images;
    for (const auto& p : png_files(dir)) images.push_back(read_rgb_signed(p));
    if (images.size() < 2) throw std::invalid_argument(dir + " needs at least two PNG images");
    return gaussian_stats(embed_images(images, embedder));
  };
  const auto a = stats_of(real), b = stats_of(fake);
  const double value = fid(a, b);
  auto summary = [](const GaussianStats<double>& s) {
    return json{{"n", s.n}, {"dim", s.dim()}, {"mean_norm", s.mean.norm()}, {"covariance_trace", s.covariance.trace()}};
  };
  write_json_file(out / "fid.json", {{"fid", value}, {"real", summary(a)}, {"fake", summary(b)}});
  std::cout << "fid " << value << "\n";
  return 0;
}

int run_eval_recog(const json& eff) {
  const std::string data = eff.at("data");
  if (data.empty()) throw std::invalid_argument("--data is required");
  auto state = open_checkpoint(eff.at("checkpoint"));
  const auto manifest = load_manifest(fs::path(data) / "manifest.jsonl");
  std::vector<ProtocolKind> kinds;
  const std::string protocol = eff.at("protocol");
  if (protocol == "all") kinds = all_protocols();
  else kinds.push_back(protocol_from_string(protocol));
  const auto far_targets = eff.at("far_targets").get<std::vector<double>>();
  const fs::path out = prepare_out(eff);

  IdentityEmbedder embedder(state->identity);
  const RemovalFn remove = removal_fn(state->generator);
  std::vector<VerificationResult> results;
  for (ProtocolKind k : kinds) {
    results.push_back(run_protocol(manifest, build_protocol(manifest, k), embedder, remove, far_targets));
  }
  json report = json::parse(report_json(results));

  std::vector<Image> xs, removed, ys;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const PairedSample s = load_sample(manifest, i);
    xs.push_back(s.x);
    removed.push_back(remove(s.x).first);
    ys.push_back(s.y);
  }
  const auto ex = embed_images(xs, embedder), er = embed_images(removed, embedder), ey = embed_images(ys, embedder);
  std::vector<EmbeddingTriple> triples;
  for (Eigen::Index i = 0; i < ex.rows(); ++i) {
    triples.push_back({ex.row(i).transpose(), er.row(i).transpose(), ey.row(i).transpose()});
  }
  const auto [improved, total] = cosine_improvement_count(triples);
  report["cosine_improvement"] = {{"improved", improved}, {"total", total}};
  write_json_file(out / "report.json", report);
  std::cout << report.dump(2) << "\n";
  return 0;
}

int run_extract_glasses(const json& eff) {
  const std::string input = eff.at("input");
  if (input.empty()) throw std::invalid_argument("--input is required");
  const double threshold = eff.at("threshold");
  if (!(threshold >= 0 && threshold <= 1)) throw std::invalid_argument("--threshold must lie in [0, 1]");
  const FacePose pose = pose_from_string(eff.at("pose"));
  auto state = open_checkpoint(eff.at("checkpoint"));
  const fs::path out = prepare_out(eff);
  const Image x = read_rgb_signed(input);
  const auto [y_hat, m_hat] = remove_glasses(state->generator, x);
  auto t = extract_glasses_template(x, y_hat, channel_slice(m_hat, 0), threshold, pose);
  if (!t) {
    std::cout << "no glasses region above threshold; nothing extracted\n";
    write_json_file(out / "result.json", {{"empty", true}});
    return 0;
  }
  t->name = fs::path(input).stem().string();
  std::size_t index = 0;
  while (fs::exists(out / ("glasses_" + std::string(6 - std::min<std::size_t>(6, std::to_string(index).size()), '0') +
                           std::to_string(index) + ".json"))) {
    ++index;
  }
  save_template(out, *t, index);
  write_json_file(out / "result.json", {{"empty", false}, {"index", index}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mask-guided eyeglasses removal: data synthesis, training, inference and evaluation"};
  app.require_subcommand(1);
  std::vector<std::pair<CLI::App*, std::function<int()>>> commands;
  std::vector<std::unique_ptr<Settings>> settings;
  auto add = [&](const std::string& name, const std::string& help, json defaults) {
    auto* sub = app.add_subcommand(name, help);
    settings.push_back(std::make_unique<Settings>(sub, name, std::move(defaults)));
    settings.back()->option<std::string>("--out", "/out", "Output directory (default $UNGLASS_OUT_ROOT/<command>)");
    settings.back()->option<std::uint64_t>("--seed", "/seed", "Seed for every random choice");
    return std::make_pair(sub, settings.back().get());
  };

  {
    auto [sub, s] = add("toy-faces", "Render procedural faces and an eyewear pool",
                        {{"n", 16}, {"seed", 0}, {"image_size", 64}, {"faces_per_identity", 2}, {"glasses", 9}, {"out", ""}});
    s->option<int>("--n", "/n", "Number of faces");
    s->option<int>("--image-size", "/image_size", "Side length in pixels");
    s->option<int>("--faces-per-identity", "/faces_per_identity", "Faces rendered per identity");
    s->option<int>("--glasses", "/glasses", "Number of eyewear templates (0 for none)");
    commands.push_back({sub, [s = s] { return run_toy_faces(s->resolve()); }});
  }
  {
    SynthesisConfig desk;
    desk.image_size = 64;
    auto [sub, s] = add("synth-data", "Composite eyewear onto faces and write a paired dataset",
                        {{"faces", ""}, {"glasses", ""}, {"seed", 0}, {"out", ""}, {"synthesis", synthesis_json(desk)}});
    s->option<std::string>("--faces", "/faces", "Directory written by toy-faces (faces.json)");
    s->option<std::string>("--glasses", "/glasses", "Template pool directory");
    s->option<int>("--image-size", "/synthesis/image_size", "Aligned output size");
    s->option<double>("--tint-alpha-min", "/synthesis/tint_alpha_range/0", "Lower tint opacity");
    s->option<double>("--tint-alpha-max", "/synthesis/tint_alpha_range/1", "Upper tint opacity");
    s->option<double>("--tint-probability", "/synthesis/tint_probability", "Chance of tinting a template");
    s->option<double>("--refraction-min", "/synthesis/refraction_strength_range/0", "Lower refraction strength (px)");
    s->option<double>("--refraction-max", "/synthesis/refraction_strength_range/1", "Upper refraction strength (px)");
    s->option<double>("--glare-probability", "/synthesis/glare_probability", "Chance of adding glare");
    s->option<int>("--glare-count-min", "/synthesis/glare_count_range/0", "Fewest glare spots");
    s->option<int>("--glare-count-max", "/synthesis/glare_count_range/1", "Most glare spots");
    s->option<int>("--r-dilate", "/synthesis/r_dilate", "Locality halo in pixels");
    commands.push_back({sub, [s = s] { return run_synth_data(s->resolve()); }});
  }
  {
    json defaults = {{"data", ""}, {"out", ""}, {"resume", ""}, {"seed", 0}};
    defaults["train"] = json::parse(train_config_to_json(TrainConfig{}));
    auto [sub, s] = add("train", "Train the generator and discriminators on a dataset", defaults);
    s->option<std::string>("--data", "/data", "Dataset directory with manifest.jsonl");
    s->option<std::string>("--resume", "/resume", "Checkpoint to continue from");
    s->option<long>("--steps", "/train/steps", "Total generator steps");
    s->option<int>("--batch-size", "/train/batch_size", "Pairs per step");
    s->option<double>("--lr", "/train/learning_rate", "Adam learning rate");
    s->option<double>("--beta1", "/train/adam_beta1", "Adam beta1");
    s->option<double>("--beta2", "/train/adam_beta2", "Adam beta2");
    s->option<int>("--depth", "/train/generator/depth", "Generator blocks");
    s->option<int>("--base-channels", "/train/generator/base_channels", "Generator width of the first block");
    s->option<int>("--image-size", "/train/generator/input_size", "Training image size");
    s->option<int>("--d-base-channels", "/train/discriminator/base_channels", "Discriminator width");
    s->option<int>("--ie-pretrain-steps", "/train/ie_pretrain_steps", "Identity extractor pretraining steps");
    s->option<long>("--checkpoint-every", "/train/checkpoint_every", "Steps between checkpoints (0 = final only)");
    s->option<std::string>("--id-distance", "/train/id_distance", "mean-square or l2-norm");
    s->flag("--disable-sd-fd-skips", "/train/disable_sd_fd_skips", "Drop the segmentation-to-face decoder skips");
    s->flag("--glasses-mask-only", "/train/glasses_mask_only", "Predict only the glasses mask channel");
    s->flag("--disable-id-loss", "/train/disable_id_loss", "Zero the identity term");
    commands.push_back({sub, [s = s] {
                          json eff = s->resolve();
                          eff["train"]["seed"] = eff["seed"];
                          return run_train(eff);
                        }});
  }
  {
    auto [sub, s] = add("remove", "Remove eyeglasses from aligned face images",
                        {{"checkpoint", ""}, {"inputs", json::array()}, {"out", ""}, {"seed", 0}, {"composite", false},
                         {"composite_radius", 2}});
    s->option<std::string>("--checkpoint", "/checkpoint", "Trained checkpoint");
    s->option<std::vector<std::string>>("--input", "/inputs", "Input PNG(s) at the model size");
    s->flag("--composite", "/composite", "Keep the output only inside the dilated predicted glasses mask");
    s->option<int>("--composite-radius", "/composite_radius", "Dilation for --composite");
    commands.push_back({sub, [s = s] { return run_remove(s->resolve()); }});
  }
  {
    auto [sub, s] = add("eval-fid", "Frechet distance between two image folders",
                        {{"real", ""}, {"fake", ""}, {"out", ""}, {"seed", 0}, {"embed_dim", 64}, {"embed_size", 32}});
    s->option<std::string>("--real", "/real", "Reference images");
    s->option<std::string>("--fake", "/fake", "Generated images");
    s->option<int>("--embed-dim", "/embed_dim", "Random projection width");
    s->option<int>("--embed-size", "/embed_size", "Images are resized to this side before projection");
    commands.push_back({sub, [s = s] { return run_eval_fid(s->resolve()); }});
  }
  {
    auto [sub, s] = add("eval-recog", "Verification and identification protocols",
                        {{"data", ""}, {"checkpoint", ""}, {"protocol", "all"}, {"out", ""}, {"seed", 0},
                         {"far_targets", kDefaultFarTargets}});
    s->option<std::string>("--data", "/data", "Dataset directory with manifest.jsonl");
    s->option<std::string>("--checkpoint", "/checkpoint", "Trained checkpoint (its identity extractor embeds faces)");
    s->option<std::string>("--protocol", "/protocol", "Protocol name or 'all'");
    s->option<std::vector<double>>("--far", "/far_targets", "False accept rate targets");
    commands.push_back({sub, [s = s] { return run_eval_recog(s->resolve()); }});
  }
  {
    auto [sub, s] = add("extract-glasses", "Cut an eyewear template out of a removal result",
                        {{"checkpoint", ""}, {"input", ""}, {"out", ""}, {"seed", 0}, {"threshold", 0.1},
                         {"pose", "frontal"}});
    s->option<std::string>("--checkpoint", "/checkpoint", "Trained checkpoint");
    s->option<std::string>("--input", "/input", "Face image with glasses at the model size");
    s->option<double>("--threshold", "/threshold", "Minimum per-pixel change on the [0,1] scale");
    s->option<std::string>("--pose", "/pose", "frontal, left-front or right-front");
    commands.push_back({sub, [s = s] { return run_extract_glasses(s->resolve()); }});
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  for (auto& [sub, run] : commands) {
    if (!sub->parsed()) continue;
    try {
      return run();
    } catch (const std::invalid_argument& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 1;
    } catch (const json::exception& e) {
      std::cerr << "error: bad configuration value: " << e.what() << "\n";
      return 1;
    } catch (const std::exception& e) {
      std::cerr << "failed: " << e.what() << "\n";
      return 2;
    }
  }
  return 1;
}
