#include "safnet/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "json.hpp"
#include "safnet/checkpoint.hpp"
#include "safnet/metrics.hpp"

namespace safnet {

namespace fs = std::filesystem;
using ag::Var;
using nlohmann::json;

void TrainConfig::validate() const {
  model.validate();
  auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
  if (s1_crop <= 0 || s2_window <= 0) fail("s1_crop and s2_window must be positive");
  if (s1_crop % s2_window != 0) fail("s2_window must divide s1_crop");
  if (s1_crop % model.divisor() != 0) {
    fail("s1_crop must be a multiple of " + std::to_string(model.divisor()));
  }
  if (batch < 1) fail("batch must be >= 1");
  if (epochs < 0 || steps < 0) fail("epochs and steps must be >= 0");
  if (!(lr_min > 0 && lr_min < lr_max)) fail("need 0 < lr_min < lr_max");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must be in [0, 1)");
  if (!(eps > 0)) fail("eps must be positive");
  if (loss.alpha < 0 || loss.beta < 0) fail("loss weights must be nonnegative");
  if (census.patch < 1 || census.patch % 2 == 0) fail("census_patch must be odd");
  if (!(census.sign_eps > 0 && census.hamming_eps > 0)) fail("census epsilons must be positive");
  if (checkpoint_every < 0 || eval_every < 0) fail("intervals must be >= 0");
}

std::string TrainConfig::to_json() const {
  json j{{"model", json::parse(model.to_json())},
         {"s1_crop", s1_crop},
         {"s2_window", s2_window},
         {"batch", batch},
         {"epochs", epochs},
         {"steps", steps},
         {"lr_max", lr_max},
         {"lr_min", lr_min},
         {"beta1", beta1},
         {"beta2", beta2},
         {"eps", eps},
         {"seed", seed},
         {"alpha", loss.alpha},
         {"beta", loss.beta},
         {"census_patch", census.patch},
         {"census_sign_eps", census.sign_eps},
         {"census_hamming_eps", census.hamming_eps},
         {"perceptual_seed", perceptual_seed},
         {"detach", detach},
         {"checkpoint_every", checkpoint_every},
         {"eval_every", eval_every}};
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(std::string_view text) {
  TrainConfig cfg;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw ConfigError("train config must be a JSON object");
    const json probe = json::parse(cfg.to_json());
    for (const auto& [key, value] : j.items()) {
      if (!probe.contains(key)) throw ConfigError("train config: unknown key '" + key + "'");
    }
    if (j.contains("model")) cfg.model = ModelConfig::from_json(j["model"].dump());
    auto read = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
    };
    read("s1_crop", cfg.s1_crop);
    read("s2_window", cfg.s2_window);
    read("batch", cfg.batch);
    read("epochs", cfg.epochs);
    read("steps", cfg.steps);
    read("lr_max", cfg.lr_max);
    read("lr_min", cfg.lr_min);
    read("beta1", cfg.beta1);
    read("beta2", cfg.beta2);
    read("eps", cfg.eps);
    read("seed", cfg.seed);
    read("alpha", cfg.loss.alpha);
    read("beta", cfg.loss.beta);
    read("census_patch", cfg.census.patch);
    read("census_sign_eps", cfg.census.sign_eps);
    read("census_hamming_eps", cfg.census.hamming_eps);
    read("perceptual_seed", cfg.perceptual_seed);
    read("detach", cfg.detach);
    read("checkpoint_every", cfg.checkpoint_every);
    read("eval_every", cfg.eval_every);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

double cosine_lr(double lr_max, double lr_min, long step, long total_steps) {
  if (total_steps <= 1) return lr_max;
  const double s = std::clamp<double>(double(step) / double(total_steps - 1), 0.0, 1.0);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * s));
}

AugmentDraw AugmentDraw::sample(std::mt19937_64& rng, int height, int width, int crop) {
  AugmentDraw d;
  d.top = std::uniform_int_distribution<int>(0, std::max(0, height - crop))(rng);
  d.left = std::uniform_int_distribution<int>(0, std::max(0, width - crop))(rng);
  std::uniform_int_distribution<int> coin(0, 1);
  d.flip_h = coin(rng);
  d.flip_v = coin(rng);
  d.rot90 = std::uniform_int_distribution<int>(0, 3)(rng);
  d.reverse_channels = coin(rng);
  return d;
}

TensorD apply_augment(const TensorD& x, const AugmentDraw& d, int crop) {
  const Shape s = x.shape();
  if (d.top < 0 || d.left < 0 || d.top + crop > s.h || d.left + crop > s.w) {
    throw ShapeError("augment crop outside the image " + s.str());
  }
  const int n = crop;
  const int k = ((d.rot90 % 4) + 4) % 4;
  TensorD out({s.n, s.c, n, n});
  for (int b = 0; b < s.n; ++b) {
    for (int c = 0; c < s.c; ++c) {
      const int sc = d.reverse_channels ? s.c - 1 - c : c;
      for (int y = 0; y < n; ++y) {
        for (int xx = 0; xx < n; ++xx) {
          // Undo the rotation: a ccw quarter turn maps (y, x) <- (x, n-1-y).
          int ry = y, rx = xx;
          for (int r = 0; r < k; ++r) {
            const int ty = rx, tx = n - 1 - ry;
            ry = ty;
            rx = tx;
          }
          if (d.flip_v) ry = n - 1 - ry;
          if (d.flip_h) rx = n - 1 - rx;
          out.at(b, c, y, xx) = x.at(b, sc, d.top + ry, d.left + rx);
        }
      }
    }
  }
  return out;
}

TrainSample augment_sample(const Scene& scene, const AugmentDraw& draw, int crop) {
  if (!scene.gt) throw ContractError(scene.id + ": training scenes need ground truth");
  const int h = std::max(scene.height(), crop);
  const int w = std::max(scene.width(), crop);
  auto prep = [&](const TensorD& t) {
    return apply_augment(t.h() == h && t.w() == w ? t : reflect_pad(t, h, w), draw, crop);
  };
  TrainSample s;
  for (int i = 0; i < 3; ++i) {
    s.ldr[i] = prep(scene.ldr[i].pixels);
    s.exposure[i] = scene.ldr[i].exposure;
  }
  s.gt = prep(scene.gt->pixels);
  return s;
}

template <typename T>
void Adam<T>::step(Weights<T>& weights, double lr) {
  if (m_.empty()) {
    for (const auto& [name, p] : weights.entries()) {
      m_.emplace_back(name, Tensor<T>(p.shape()));
      v_.emplace_back(name, Tensor<T>(p.shape()));
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, double(t_));
  const double c2 = 1.0 - std::pow(beta2_, double(t_));
  auto& entries = weights.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Var<T>& p = entries[i].second;
    const Tensor<T>& g = p.grad();
    if (g.empty()) continue;
    Tensor<T>& m = m_[i].second;
    Tensor<T>& v = v_[i].second;
    Tensor<T>& w = p.mutable_value();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k];
      const double mk = beta1_ * m[k] + (1.0 - beta1_) * gk;
      const double vk = beta2_ * v[k] + (1.0 - beta2_) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      w[k] = static_cast<T>(w[k] - lr * (mk / c1) / (std::sqrt(vk / c2) + eps_));
    }
  }
}

template <typename T>
std::vector<std::pair<std::string, TensorD>> Adam<T>::state() const {
  std::vector<std::pair<std::string, TensorD>> out;
  for (const auto& [name, m] : m_) out.emplace_back("optim.m." + name, m.template cast<double>());
  for (const auto& [name, v] : v_) out.emplace_back("optim.v." + name, v.template cast<double>());
  return out;
}

template <typename T>
void Adam<T>::load_state(const std::vector<std::pair<std::string, TensorD>>& arrays, long t) {
  m_.clear();
  v_.clear();
  for (const auto& [name, a] : arrays) {
    if (name.rfind("optim.m.", 0) == 0) m_.emplace_back(name.substr(8), a.template cast<T>());
    if (name.rfind("optim.v.", 0) == 0) v_.emplace_back(name.substr(8), a.template cast<T>());
  }
  if (m_.size() != v_.size()) throw CheckpointError("optimizer state is incomplete");
  t_ = t;
}

void write_metrics_csv(const fs::path& path, const std::vector<StepRecord>& rows) {
  write_atomically(path, [&](std::ostream& os) {
    os.precision(9);
    os << "step,lr,l1_r,perc_r,l1_m,census_m,total,eval_psnr_mu\n";
    for (const auto& r : rows) {
      os << r.step << ',' << r.lr << ',' << r.loss.l1_r << ',' << r.loss.perc_r << ','
         << r.loss.l1_m << ',' << r.loss.census_m << ',' << r.loss.total << ',';
      if (r.eval_psnr_mu) os << *r.eval_psnr_mu;
      os << '\n';
    }
  });
}

template <typename T>
Trainer<T>::Trainer(TrainConfig cfg, Weights<T> weights)
    : cfg_((cfg.validate(), std::move(cfg))),
      net_(cfg_.model, std::move(weights)),
      adam_(cfg_.beta1, cfg_.beta2, cfg_.eps),
      features_(cfg_.perceptual_seed),
      rng_(cfg_.seed) {
  net_.weights().set_requires_grad(true);
}

template <typename T>
Trainer<T>::Trainer(TrainConfig cfg)
    : Trainer(cfg, Weights<T>::init((cfg.validate(), cfg.model), cfg.seed)) {}

template <typename T>
long Trainer<T>::total_steps(std::size_t dataset_size) const {
  if (cfg_.steps > 0) return cfg_.steps;
  const long per_epoch = (long(dataset_size) + cfg_.batch - 1) / cfg_.batch;
  return long(cfg_.epochs) * per_epoch;
}

template <typename T>
double Trainer<T>::lr_at(long step, long total) const {
  return cosine_lr(cfg_.lr_max, cfg_.lr_min, step, total);
}

template <typename T>
std::vector<TrainSample> Trainer<T>::next_batch(const std::vector<Scene>& scenes) {
  if (scenes.empty()) throw ContractError("training set is empty");
  std::vector<TrainSample> batch;
  for (int b = 0; b < cfg_.batch; ++b) {
    if (order_.size() != scenes.size() || cursor_ >= order_.size()) {
      order_.resize(scenes.size());
      for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    const Scene& s = scenes[order_[cursor_++]];
    const AugmentDraw d = AugmentDraw::sample(rng_, std::max(s.height(), cfg_.s1_crop),
                                              std::max(s.width(), cfg_.s1_crop), cfg_.s1_crop);
    batch.push_back(augment_sample(s, d, cfg_.s1_crop));
  }
  return batch;
}

template <typename T>
NetworkOutput<T> Trainer<T>::run(const std::vector<TrainSample>& batch) const {
  if (batch.empty()) throw ContractError("empty training batch");
  std::array<Tensor<T>, 3> ldr;
  std::array<std::vector<double>, 3> exposures;
  for (int i = 0; i < 3; ++i) {
    std::vector<Tensor<T>> parts;
    for (const auto& s : batch) {
      if (s.ldr[i].h() != cfg_.s1_crop || s.ldr[i].w() != cfg_.s1_crop) {
        throw ShapeError("training crops must be " + std::to_string(cfg_.s1_crop) + "^2");
      }
      parts.push_back(s.ldr[i].template cast<T>());
      exposures[i].push_back(s.exposure[i]);
    }
    ldr[i] = concat_batch<T>(parts);
  }
  const FrameBatch<T> fb = FrameBatch<T>::make(ldr, exposures, cfg_.model.gamma);
  return net_.forward_windowed(fb, cfg_.s2_window, cfg_.detach);
}

template <typename T>
LossTerms<T> Trainer<T>::losses(const NetworkOutput<T>& out,
                                const std::vector<TrainSample>& batch) const {
  std::vector<Tensor<T>> parts;
  for (const auto& s : batch) parts.push_back(s.gt.template cast<T>());
  const Var<T> gt(concat_batch<T>(parts));
  return total_loss(out.refined, out.merged, gt, features_, cfg_.model.mu, cfg_.loss,
                    cfg_.census);
}

template <typename T>
LossReport Trainer<T>::train_step(const std::vector<TrainSample>& batch, long total_steps) {
  net_.weights().zero_grads();
  const LossTerms<T> terms = losses(run(batch), batch);
  const LossReport report = terms.report();
  if (!std::isfinite(report.total)) {
    throw DivergenceError("non-finite loss at step " + std::to_string(step_));
  }
  ag::backward(terms.total);
  const double lr = lr_at(step_, total_steps);
  adam_.step(net_.weights(), lr);
  history_.push_back({step_, lr, report, std::nullopt});
  ++step_;
  return report;
}

template <typename T>
LossReport Trainer<T>::probe_loss(const std::vector<TrainSample>& batch) const {
  ag::NoGradGuard no_grad;
  return losses(run(batch), batch).report();
}

template <typename T>
double Trainer<T>::evaluate(const std::vector<Scene>& scenes) const {
  double acc = 0;
  int count = 0;
  for (const Scene& s : scenes) {
    if (!s.gt) continue;
    const FusionResult r = forward_full(s.ldr[0], s.ldr[1], s.ldr[2], net_);
    acc += psnr(r.refined.pixels, s.gt->pixels, Domain::Mu, cfg_.model.mu);
    ++count;
  }
  if (count == 0) throw ContractError("evaluation needs scenes with ground truth");
  return acc / count;
}

template <typename T>
void Trainer<T>::record_eval(double psnr_mu) {
  if (!history_.empty()) history_.back().eval_psnr_mu = psnr_mu;
}

template <typename T>
void Trainer<T>::save(const fs::path& checkpoint) const {
  Archive a;
  a.config_json = cfg_.model.to_json();
  std::ostringstream rng;
  rng << rng_;
  json hist = json::array();
  for (const auto& r : history_) {
    hist.push_back({r.step, r.lr, r.loss.l1_r, r.loss.perc_r, r.loss.l1_m, r.loss.census_m,
                    r.loss.total, r.eval_psnr_mu ? json(*r.eval_psnr_mu) : json(nullptr)});
  }
  const json extra{{"train_config", json::parse(cfg_.to_json())},
                   {"step", step_},
                   {"adam_t", adam_.t()},
                   {"rng", rng.str()},
                   {"order", order_},
                   {"cursor", cursor_},
                   {"history", hist}};
  a.extra_json = extra.dump();
  a.arrays = net_.weights().to_tensors();
  for (auto& entry : adam_.state()) a.arrays.push_back(std::move(entry));
  write_archive(checkpoint, a);
}

template <typename T>
Trainer<T> Trainer<T>::resume(const fs::path& checkpoint) {
  Archive a = read_archive(checkpoint);
  try {
    const json extra = json::parse(a.extra_json);
    if (!extra.contains("train_config")) {
      throw CheckpointError(checkpoint.string() + ": no training state (model-only checkpoint)");
    }
    TrainConfig cfg = TrainConfig::from_json(extra["train_config"].dump());
    std::vector<std::pair<std::string, TensorD>> params, optim;
    for (auto& entry : a.arrays) {
      (entry.first.rfind("optim.", 0) == 0 ? optim : params).push_back(std::move(entry));
    }
    Trainer t(cfg, Weights<T>::from_tensors(cfg.model, params));
    t.adam_.load_state(optim, extra.at("adam_t").get<long>());
    std::istringstream rng(extra.at("rng").get<std::string>());
    rng >> t.rng_;
    if (!rng) throw CheckpointError(checkpoint.string() + ": bad RNG state");
    t.step_ = extra.at("step").get<long>();
    t.order_ = extra.at("order").get<std::vector<std::size_t>>();
    t.cursor_ = extra.at("cursor").get<std::size_t>();
    for (const auto& h : extra.at("history")) {
      StepRecord r;
      r.step = h[0].get<long>();
      r.lr = h[1].get<double>();
      r.loss = {h[2].get<double>(), h[3].get<double>(), h[4].get<double>(), h[5].get<double>(),
                h[6].get<double>()};
      if (!h[7].is_null()) r.eval_psnr_mu = h[7].get<double>();
      t.history_.push_back(r);
    }
    return t;
  } catch (const json::exception& e) {
    throw CheckpointError(checkpoint.string() + ": bad training state: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(checkpoint.string() + ": " + e.what());
  }
}

template <typename T>
FitResult fit(Trainer<T>& trainer, const std::vector<Scene>& train,
              const std::vector<Scene>& eval, const FitOptions& options) {
  if (train.empty()) throw ContractError("training set is empty");
  const TrainConfig& cfg = trainer.config();
  const long total = trainer.total_steps(train.size());
  const bool persist = !options.out_dir.empty();
  const fs::path ckpt = persist ? options.out_dir / "last.ckpt" : fs::path();
  auto flush = [&]() {
    if (!persist) return;
    trainer.save(ckpt);
    write_metrics_csv(options.out_dir / "metrics.csv", trainer.history());
  };
  if (persist) fs::create_directories(options.out_dir);

  while (trainer.step_count() < total) {
    const auto batch = trainer.next_batch(train);
    try {
      trainer.train_step(batch, total);
    } catch (const DivergenceError& e) {
      flush();
      throw DivergenceError(std::string(e.what()) +
                            (persist ? "; last good state kept in " + ckpt.string() : ""));
    }
    const long done = trainer.step_count();
    const bool last = done == total;
    if (!eval.empty() && (last || (cfg.eval_every > 0 && done % cfg.eval_every == 0))) {
      trainer.record_eval(trainer.evaluate(eval));
    }
    if (!last && cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) flush();
    if (options.on_step) options.on_step(trainer.history().back());
  }
  flush();
  return {trainer.history(), ckpt};
}

template class Adam<float>;
template class Adam<double>;
template class Trainer<float>;
template class Trainer<double>;
template FitResult fit(Trainer<float>&, const std::vector<Scene>&, const std::vector<Scene>&,
                       const FitOptions&);
template FitResult fit(Trainer<double>&, const std::vector<Scene>&, const std::vector<Scene>&,
                       const FitOptions&);

}  // namespace safnet
