#include "cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "safnet/checkpoint.hpp"
#include "safnet/datakit.hpp"
#include "safnet/image_io.hpp"
#include "safnet/metrics.hpp"
#include "safnet/trainer.hpp"

namespace safnet::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  std::string out;
  std::string format = "pfm";
  bool dump_flow = false;
  bool dump_masks = false;
  std::string variant;
  std::string half_res_io;
  std::vector<std::string> positional;

  // subcommand specific
  bool preview = false;
  std::string motion = "0,0";
  std::string exposures = "0,2,4";
  std::string size = "512";
  std::string texture = "blobs";
  std::string flows;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

// Keys understood besides the training configuration.
json tool_defaults() {
  return {{"train_data", ""},
          {"eval_data", ""},
          {"precision", ""},  // "" = double for inference, float for training
          {"saturation_threshold", kSaturationThreshold},
          {"log_every", 10}};
}

json default_config() {
  json j = json::parse(TrainConfig{}.to_json());
  j["model"] = {{"variant", "safnet"}};
  j.update(tool_defaults());
  return j;
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;
  }
}

// Merges `patch` into `base`, rejecting keys absent from the base. Model keys
// are validated later by ModelConfig.
void merge_checked(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, value] : patch.items()) {
    if (key == "model") {
      if (!value.is_object()) throw ConfigError(where + ": model must be an object");
      if (value.contains("variant")) base["model"] = json::object();
      base["model"].update(value);
    } else if (!base.contains(key)) {
      throw ConfigError(where + ": unknown key '" + key + "'");
    } else {
      base[key] = value;
    }
  }
}

struct Resolved {
  json all;
  TrainConfig train;
};

Resolved resolve_config(const Options& o) {
  json cfg = default_config();
  if (!o.config.empty()) {
    std::ifstream is(o.config);
    if (!is) throw ConfigError(o.config + ": cannot open config file");
    json file;
    try {
      file = json::parse(is);
    } catch (const json::exception& e) {
      throw ConfigError(o.config + ": " + e.what());
    }
    merge_checked(cfg, file, o.config);
  }
  for (const auto& kv : o.positional) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = kv.substr(0, eq);
    const json value = parse_value(kv.substr(eq + 1));
    if (key.rfind("model.", 0) == 0) {
      merge_checked(cfg, json{{"model", {{key.substr(6), value}}}}, "override " + key);
    } else {
      merge_checked(cfg, json{{key, value}}, "override " + key);
    }
  }
  if (o.seed) cfg["seed"] = *o.seed;
  if (!o.variant.empty()) cfg["model"]["variant"] = o.variant;
  if (!o.half_res_io.empty()) cfg["model"]["half_res_io"] = o.half_res_io == "on";

  json train = cfg;
  const json tool_keys = tool_defaults();
  for (const auto& [key, value] : tool_keys.items()) train.erase(key);
  Resolved r{cfg, TrainConfig::from_json(train.dump())};
  const std::string precision = cfg["precision"].get<std::string>();
  if (!precision.empty() && precision != "float" && precision != "double") {
    throw ConfigError("precision must be float or double");
  }
  if (!cfg["saturation_threshold"].is_number()) {
    throw ConfigError("saturation_threshold must be a number");
  }
  if (!cfg["log_every"].is_number_integer()) throw ConfigError("log_every must be an integer");
  return r;
}

std::vector<std::string> paths_of(const Options& o) {
  std::vector<std::string> out;
  for (const auto& p : o.positional) {
    if (p.find('=') == std::string::npos) out.push_back(p);
  }
  return out;
}

std::vector<double> parse_list(const std::string& text, std::size_t count, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(std::string(what) + ": '" + text + "' is not a number list");
    }
  }
  if (out.size() != count) {
    throw UsageError(std::string(what) + ": expected " + std::to_string(count) + " values");
  }
  return out;
}

int num_threads() {
  if (const char* env = std::getenv("SAFNET_NUM_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 1;
}

// Runs fn(i) for i in [0, n) on up to SAFNET_NUM_THREADS workers; the first
// exception is rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, num_threads());
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// Loads a checkpoint, applying the --half-res-io and --variant flags.
template <typename T>
SafNet<T> load_net(const Options& o) {
  if (o.checkpoint.empty()) throw UsageError("--checkpoint is required");
  SafNet<T> net = load_model<T>(o.checkpoint);
  ModelConfig cfg = net.config();
  if (!o.variant.empty() && parse_variant(o.variant) != cfg.variant()) {
    throw ConfigError("--variant " + o.variant + " does not match the checkpoint (" +
                      std::string(to_string(cfg.variant())) + ")");
  }
  if (o.half_res_io.empty()) return net;
  cfg.half_res_io = o.half_res_io == "on";
  return SafNet<T>(cfg, net.weights().clone());
}

template <typename T>
FusionResult fuse_scene(const Scene& s, const SafNet<T>& net) {
  return forward_full(s.ldr[0], s.ldr[1], s.ldr[2], net);
}

std::vector<fs::path> collect_scenes(const std::vector<std::string>& roots) {
  std::vector<fs::path> dirs;
  for (const auto& r : roots) {
    for (auto& d : list_scenes(r)) dirs.push_back(std::move(d));
  }
  if (dirs.empty()) throw LoadError("no scene directories found");
  return dirs;
}

std::vector<Scene> load_scenes(const std::string& root) {
  std::vector<Scene> out;
  if (root.empty()) return out;
  for (const auto& d : list_scenes(root)) out.push_back(load_scene(d));
  return out;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

void emit(const Options& o, std::ostream& out, const std::string& text) {
  if (o.out.empty() || o.out == "-") {
    out << text;
  } else {
    write_atomically(o.out, [&](std::ostream& os) { os << text; });
  }
}

// ---------------------------------------------------------------- commands

template <typename T>
int do_fuse(const Options& o, const Resolved& cfg, std::ostream& out, std::ostream& err) {
  const auto paths = paths_of(o);
  if (paths.size() != 1) throw UsageError("fuse takes exactly one scene directory");
  if (o.out.empty()) throw UsageError("--out is required");
  const HdrFormat format = parse_hdr_format(o.format);
  const SafNet<T> net = load_net<T>(o);
  const Scene scene = load_scene(paths[0]);
  const FusionResult r = fuse_scene(scene, net);

  const fs::path dir(o.out);
  fs::create_directories(dir);
  const fs::path hdr = dir / (std::string("fused") + extension(format));
  save_hdr(r.refined, hdr, format);
  if (o.preview) {
    io::write_png(dir / "preview.png", tonemap_mu(r.refined.pixels, net.config().mu), 8);
  }
  if (o.dump_flow) {
    io::write_pfm(dir / "flow_21.pfm", r.flow21.uv);
    io::write_pfm(dir / "flow_23.pfm", r.flow23.uv);
  }
  if (o.dump_masks) {
    io::write_png(dir / "mask_1.png", r.mask1.m, 16);
    io::write_png(dir / "mask_3.png", r.mask3.m, 16);
  }
  out << hdr.string() << '\n';
  return kOk;
}

template <typename T>
int do_eval(const Options& o, const Resolved& cfg, std::ostream& out, std::ostream& err) {
  const auto dirs = collect_scenes(paths_of(o));
  const SafNet<T> net = load_net<T>(o);
  struct Row {
    std::string id;
    MetricReport m;
  };
  std::vector<Row> rows(dirs.size());
  parallel_for(dirs.size(), [&](std::size_t i) {
    const Scene s = load_scene(dirs[i]);
    if (!s.gt) throw LoadError(dirs[i].string() + ": eval needs gt.hdr or gt.pfm");
    rows[i] = {s.id, evaluate(fuse_scene(s, net).refined, *s.gt, net.config().mu)};
  });
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.id < b.id; });
  std::ostringstream csv;
  csv << "scene_id,psnr_mu,psnr_l,ssim_mu,ssim_l\n";
  for (const auto& r : rows) {
    csv << r.id << ',' << fmt(r.m.psnr_mu) << ',' << fmt(r.m.psnr_l) << ',' << fmt(r.m.ssim_mu)
        << ',' << fmt(r.m.ssim_l) << '\n';
  }
  emit(o, out, csv.str());
  return kOk;
}

template <typename T>
int do_train(const Options& o, const Resolved& cfg, std::ostream& out, std::ostream& err) {
  if (o.out.empty()) throw UsageError("--out is required");
  const auto train = load_scenes(cfg.all["train_data"].get<std::string>());
  if (train.empty()) throw ConfigError("train_data must name a directory of scenes");
  const auto eval = load_scenes(cfg.all["eval_data"].get<std::string>());
  Trainer<T> trainer = o.checkpoint.empty() ? Trainer<T>(cfg.train) : Trainer<T>::resume(o.checkpoint);
  const long total = trainer.total_steps(train.size());
  const long log_every = std::max<long>(1, cfg.all["log_every"].get<long>());
  FitOptions fo;
  fo.out_dir = o.out;
  fo.on_step = [&](const StepRecord& r) {
    if ((r.step + 1) % log_every == 0 || r.step + 1 == total) {
      err << "step " << r.step + 1 << '/' << total << " lr " << fmt(r.lr) << " loss "
          << fmt(r.loss.total);
      if (r.eval_psnr_mu) err << " eval_psnr_mu " << fmt(*r.eval_psnr_mu);
      err << '\n';
    }
  };
  const FitResult res = fit(trainer, train, eval, fo);
  out << res.checkpoint.string() << '\n';
  return kOk;
}

int do_synth(const Options& o, const Resolved& cfg, std::ostream& out, std::ostream& err) {
  if (o.out.empty()) throw UsageError("--out is required");
  SynthOptions so;
  so.seed = cfg.train.seed;
  const auto x = o.size.find('x');
  try {
    so.height = std::stoi(o.size.substr(0, x));
    so.width = x == std::string::npos ? so.height : std::stoi(o.size.substr(x + 1));
  } catch (const std::exception&) {
    throw UsageError("--size expects N or HxW");
  }
  const auto motion = parse_list(o.motion, 2, "--motion");
  so.dx = motion[0];
  so.dy = motion[1];
  const auto e = parse_list(o.exposures, 3, "--exposures");
  so.exposures_log2 = {e[0], e[1], e[2]};
  so.texture = parse_texture(o.texture);
  so.gamma = cfg.train.model.gamma;
  try {
    write_scene(synth_scene(so), o.out, parse_hdr_format(o.format));
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  out << o.out << '\n';
  return kOk;
}

int do_stats(const Options& o, const Resolved& cfg, std::ostream& out, std::ostream& err) {
  const auto paths = paths_of(o);
  if (paths.size() != 1) throw UsageError("stats takes exactly one dataset root");
  std::optional<fs::path> flows;
  if (!o.flows.empty()) flows = o.flows;
  const auto rows = dataset_stats(paths[0], flows, cfg.all["saturation_threshold"].get<double>());
  std::ostringstream csv;
  csv << "scene_id,motion_magnitude,saturation_ratio\n";
  for (const auto& r : rows) {
    csv << r.scene_id << ',' << fmt(r.stats.motion_magnitude) << ','
        << fmt(r.stats.saturation_ratio) << '\n';
  }
  emit(o, out, csv.str());
  return kOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Selective-alignment HDR fusion: fuse, train, eval, synth, stats"};
  app.name(args.empty() ? "safnet" : fs::path(args[0]).filename().string());
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Global RNG seed");
    sub->add_option("--checkpoint", o.checkpoint, "Model or training checkpoint");
    sub->add_option("--out", o.out, "Output directory or file");
    sub->add_option("--format", o.format, "HDR output format")->check(CLI::IsMember({"hdr", "pfm"}));
    sub->add_option("--variant", o.variant, "Model variant")
        ->check(CLI::IsMember({"safnet", "safnet-s"}));
    sub->add_option("--half-res-io", o.half_res_io, "Estimate flow and masks at half resolution")
        ->check(CLI::IsMember({"on", "off"}));
    sub->add_option("args", o.positional, "Paths and key=value config overrides");
  };

  auto* fuse = app.add_subcommand("fuse", "Fuse one scene directory into an HDR image");
  add_common(fuse);
  fuse->add_flag("--dump-flow", o.dump_flow, "Also write flow_21.pfm and flow_23.pfm");
  fuse->add_flag("--dump-masks", o.dump_masks, "Also write mask_1.png and mask_3.png");
  fuse->add_flag("--preview", o.preview, "Also write a tonemapped preview.png");

  auto* eval = app.add_subcommand("eval", "Score scenes with ground truth; CSV output");
  add_common(eval);

  auto* train = app.add_subcommand("train", "Train from a config; writes checkpoints and metrics");
  add_common(train);

  auto* synth = app.add_subcommand("synth", "Generate a synthetic scene with exact flows");
  add_common(synth);
  synth->add_option("--size", o.size, "N or HxW");
  synth->add_option("--motion", o.motion, "Global motion dx,dy in pixels");
  synth->add_option("--exposures", o.exposures, "Three log2 exposures");
  synth->add_option("--texture", o.texture, "gradient or blobs")
      ->check(CLI::IsMember({"gradient", "blobs"}));

  auto* stats = app.add_subcommand("stats", "Motion and saturation statistics; CSV output");
  add_common(stats);
  stats->add_option("--flows", o.flows, "Root of per-scene flow_21.pfm/flow_23.pfm files");

  std::vector<std::string> argv_store = args.empty() ? std::vector<std::string>{"safnet"} : args;
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    const Resolved cfg = resolve_config(o);
    const std::string precision = cfg.all["precision"];
    const bool use_float = precision == "float";
    if (*fuse) return use_float ? do_fuse<float>(o, cfg, out, err) : do_fuse<double>(o, cfg, out, err);
    if (*eval) return use_float ? do_eval<float>(o, cfg, out, err) : do_eval<double>(o, cfg, out, err);
    if (*train) {
      return precision == "double" ? do_train<double>(o, cfg, out, err)
                                   : do_train<float>(o, cfg, out, err);
    }
    if (*synth) return do_synth(o, cfg, out, err);
    if (*stats) return do_stats(o, cfg, out, err);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kCheckpoint;
  } catch (const DivergenceError& e) {
    err << "training diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const LoadError& e) {
    err << "load error: " << e.what() << '\n';
    return kLoad;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << '\n';
    return kLoad;
  } catch (const InvalidExposure& e) {
    err << "load error: " << e.what() << '\n';
    return kLoad;
  } catch (const Error& e) {
    err << "invalid input: " << e.what() << '\n';
    return kInvalidInput;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kInternal;
  }
  return kInternal;
}

}  // namespace safnet::cli
