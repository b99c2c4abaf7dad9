#include "safnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "json.hpp"
#include "safnet/ops.hpp"
#include "safnet/warpgrid.hpp"

namespace safnet {

using ag::Var;
using nlohmann::json;

std::string_view to_string(Variant v) {
  return v == Variant::SafNet ? "safnet" : "safnet-s";
}

Variant parse_variant(std::string_view name) {
  if (name == "safnet") return Variant::SafNet;
  if (name == "safnet-s") return Variant::SafNetS;
  throw ConfigError("unknown variant '" + std::string(name) +
                    "' (expected safnet or safnet-s)");
}

ModelConfig ModelConfig::for_variant(Variant v) {
  ModelConfig cfg;
  if (v == Variant::SafNetS) {
    cfg.refine_channels = 32;
    cfg.refine_blocks = RefineBlock::Plain;
  }
  return cfg;
}

Variant ModelConfig::variant() const {
  return refine_blocks == RefineBlock::Residual ? Variant::SafNet : Variant::SafNetS;
}

void ModelConfig::validate() const {
  if (levels != 4) throw ConfigError("levels must be 4");
  if (enc_channels <= 0 || dec_channels <= 0 || refine_channels <= 0) {
    throw ConfigError("channel counts must be positive");
  }
  if (dec_groups <= 0 || dec_channels % dec_groups != 0) {
    throw ConfigError("dec_channels must be divisible by dec_groups");
  }
  if (refine_dilations.empty()) throw ConfigError("refine_dilations is empty");
  for (int d : refine_dilations) {
    if (d <= 0) throw ConfigError("refine dilations must be positive");
  }
  if (!(gamma > 0) || !(mu > 0)) throw ConfigError("gamma and mu must be positive");
}

int ModelConfig::divisor() const { return (1 << levels) * (half_res_io ? 2 : 1); }

std::string ModelConfig::to_json() const {
  json j{{"enc_channels", enc_channels},
         {"dec_channels", dec_channels},
         {"dec_groups", dec_groups},
         {"levels", levels},
         {"refine_channels", refine_channels},
         {"refine_blocks",
          refine_blocks == RefineBlock::Residual ? "residual" : "plain"},
         {"refine_dilations", refine_dilations},
         {"half_res_io", half_res_io},
         {"gamma", gamma},
         {"mu", mu}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
  static const std::set<std::string> known{
      "variant", "enc_channels", "dec_channels", "dec_groups", "levels", "refine_channels",
      "refine_blocks", "refine_dilations", "half_res_io", "gamma", "mu"};
  ModelConfig cfg;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (!known.count(key)) throw ConfigError("model config: unknown key '" + key + "'");
    }
    if (j.contains("variant")) cfg = for_variant(parse_variant(j["variant"].get<std::string>()));
    auto read = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
    };
    read("enc_channels", cfg.enc_channels);
    read("dec_channels", cfg.dec_channels);
    read("dec_groups", cfg.dec_groups);
    read("levels", cfg.levels);
    read("refine_channels", cfg.refine_channels);
    if (j.contains("refine_blocks")) {
      const auto blocks = j["refine_blocks"].get<std::string>();
      if (blocks != "residual" && blocks != "plain") {
        throw ConfigError("refine_blocks must be residual or plain");
      }
      cfg.refine_blocks = blocks == "residual" ? RefineBlock::Residual : RefineBlock::Plain;
    }
    read("refine_dilations", cfg.refine_dilations);
    read("half_res_io", cfg.half_res_io);
    read("gamma", cfg.gamma);
    read("mu", cfg.mu);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> out;
  auto conv = [&](const std::string& name, int cin, int cout, int k, int groups,
                  bool with_prelu) {
    out.push_back({name + ".weight", {cout, cin / groups, k, k}, ParamKind::ConvWeight});
    out.push_back({name + ".bias", {1, cout, 1, 1}, ParamKind::Bias});
    if (with_prelu) out.push_back({name + ".prelu", {1, cout, 1, 1}, ParamKind::PreluSlope});
  };

  const int c = cfg.enc_channels;
  for (int l = 1; l <= cfg.levels; ++l) {
    const std::string p = "encoder.level" + std::to_string(l);
    conv(p + ".conv0", l == 1 ? 6 : c, c, 3, 1, true);
    conv(p + ".conv1", c, c, 3, 1, true);
  }

  const int d = cfg.dec_channels;
  conv("decoder.conv0", 6 + 3 * c, d, 3, 1, true);
  conv("decoder.conv1", d, d, 3, cfg.dec_groups, true);
  conv("decoder.conv2", d, d, 3, cfg.dec_groups, true);
  conv("decoder.conv3", d, d, 3, cfg.dec_groups, true);
  conv("decoder.conv4", d, d, 3, 1, true);
  out.push_back({"decoder.deconv.weight", {d, 6, 4, 4}, ParamKind::DeconvWeight});
  out.push_back({"decoder.deconv.bias", {1, 6, 1, 1}, ParamKind::Bias});

  const int r = cfg.refine_channels;
  const int extract_in[3] = {6, 6 + 2 + 2 + 1 + 1 + 3, 6};
  for (int i = 0; i < 3; ++i) {
    const std::string p = "refine.extract" + std::to_string(i + 1);
    conv(p + ".conv0", extract_in[i], r, 3, 1, true);
    conv(p + ".conv1", r, r, 3, 1, true);
  }
  conv("refine.fuse", 3 * r, r, 3, 1, true);
  for (std::size_t i = 0; i < cfg.refine_dilations.size(); ++i) {
    conv("refine.block" + std::to_string(i + 1), r, r, 3, 1, true);
  }
  conv("refine.out", r, 3, 3, 1, false);
  return out;
}

template <typename T>
void Weights<T>::add(std::string name, Tensor<T> value) {
  index_[name] = params_.size();
  params_.emplace_back(std::move(name), Var<T>(std::move(value), true));
}

template <typename T>
Weights<T> Weights<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Weights w;
  for (const auto& spec : parameter_layout(cfg)) {
    Tensor<T> t(spec.shape);
    switch (spec.kind) {
      case ParamKind::ConvWeight:
      case ParamKind::DeconvWeight: {
        // Deconv inputs reach each output through (K/stride)^2 taps.
        const double fan_in = spec.kind == ParamKind::ConvWeight
                                  ? double(spec.shape.c) * spec.shape.h * spec.shape.w
                                  : double(spec.shape.n) * 4.0;
        const double std = std::sqrt(2.0 / fan_in);
        for (auto& v : t.values()) v = static_cast<T>(normal(rng) * std);
        break;
      }
      case ParamKind::Bias:
        break;
      case ParamKind::PreluSlope:
        t.fill(T(0.25));
        break;
    }
    w.add(spec.name, std::move(t));
  }
  return w;
}

template <typename T>
Weights<T> Weights<T>::zeros(const ModelConfig& cfg) {
  Weights w;
  for (const auto& spec : parameter_layout(cfg)) {
    Tensor<T> t(spec.shape);
    if (spec.kind == ParamKind::PreluSlope) t.fill(T(0.25));
    w.add(spec.name, std::move(t));
  }
  return w;
}

template <typename T>
Weights<T> Weights<T>::from_tensors(
    const ModelConfig& cfg, const std::vector<std::pair<std::string, TensorD>>& tensors) {
  std::unordered_map<std::string, const TensorD*> by_name;
  for (const auto& [name, t] : tensors) by_name[name] = &t;
  Weights w;
  for (const auto& spec : parameter_layout(cfg)) {
    auto it = by_name.find(spec.name);
    if (it == by_name.end()) {
      throw CheckpointError("missing parameter '" + spec.name + "'");
    }
    if (it->second->shape() != spec.shape) {
      throw CheckpointError("parameter '" + spec.name + "' has shape " +
                            it->second->shape().str() + ", expected " + spec.shape.str());
    }
    w.add(spec.name, it->second->template cast<T>());
    by_name.erase(it);
  }
  if (!by_name.empty()) {
    throw CheckpointError("unexpected parameter '" + by_name.begin()->first + "'");
  }
  return w;
}

template <typename T>
const Var<T>& Weights<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("no parameter named '" + name + "'");
  return params_[it->second].second;
}

template <typename T>
Var<T>& Weights<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("no parameter named '" + name + "'");
  return params_[it->second].second;
}

template <typename T>
std::size_t Weights<T>::parameter_count() const {
  return parameter_count("");
}

template <typename T>
std::size_t Weights<T>::parameter_count(std::string_view prefix) const {
  std::size_t total = 0;
  for (const auto& [name, v] : params_) {
    if (std::string_view(name).substr(0, prefix.size()) == prefix) total += v.value().size();
  }
  return total;
}

template <typename T>
Weights<T> Weights<T>::clone() const {
  return cast<T>();
}

template <typename T>
template <typename U>
Weights<U> Weights<T>::cast() const {
  Weights<U> out;
  for (const auto& [name, v] : params_) {
    out.add(name, v.value().template cast<U>());
    out.params_.back().second.node()->requires_grad = v.requires_grad();
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, TensorD>> Weights<T>::to_tensors() const {
  std::vector<std::pair<std::string, TensorD>> out;
  out.reserve(params_.size());
  for (const auto& [name, v] : params_) {
    out.emplace_back(name, v.value().template cast<double>());
  }
  return out;
}

template <typename T>
void Weights<T>::zero_grads() {
  for (auto& [name, v] : params_) v.zero_grad();
}

template <typename T>
void Weights<T>::set_requires_grad(bool on) {
  for (auto& [name, v] : params_) v.node()->requires_grad = on;
}

template <typename T>
DecoderState<T> DecoderState<T>::initial(int batch, int height, int width, int level) {
  return {Var<T>(Tensor<T>({batch, 2, height, width})),
          Var<T>(Tensor<T>({batch, 2, height, width})),
          Var<T>(Tensor<T>({batch, 1, height, width})),
          Var<T>(Tensor<T>({batch, 1, height, width})), level};
}

template <typename T>
FrameBatch<T> FrameBatch<T>::make(const std::array<Tensor<T>, 3>& ldr,
                                  const std::array<std::vector<double>, 3>& exposures,
                                  double gamma) {
  FrameBatch b;
  for (int i = 0; i < 3; ++i) {
    require_same_shape(ldr[i].shape(), ldr[0].shape(), "frame batch");
    if (ldr[i].c() != 3) throw ShapeError("frames must be RGB, got " + ldr[i].shape().str());
    b.ldr[i] = Var<T>(ldr[i]);
    b.linear[i] = Var<T>(ldr_to_linear(ldr[i], exposures[i], gamma));
    const std::array<Tensor<T>, 2> parts{ldr[i], b.linear[i].value()};
    b.input[i] = Var<T>(concat_channels<T>(parts));
  }
  b.coefficients = initial_coefficients(ldr[1]);
  return b;
}

template <typename T>
SafNet<T>::SafNet(ModelConfig cfg, Weights<T> weights)
    : cfg_(std::move(cfg)), weights_(std::move(weights)) {
  cfg_.validate();
  for (const auto& spec : parameter_layout(cfg_)) {
    if (!weights_.contains(spec.name) ||
        weights_.get(spec.name).shape() != spec.shape) {
      throw ConfigError("weights do not match the model config at '" + spec.name + "'");
    }
  }
}

template <typename T>
Var<T> SafNet<T>::conv(const std::string& name, const Var<T>& x, int stride, int pad,
                       int dilation, int groups) const {
  return ops::conv2d(x, weights_.get(name + ".weight"), weights_.get(name + ".bias"),
                     {stride, pad, dilation, groups});
}

template <typename T>
Var<T> SafNet<T>::conv_prelu(const std::string& name, const Var<T>& x, int stride,
                             int pad, int dilation, int groups) const {
  return ops::prelu(conv(name, x, stride, pad, dilation, groups),
                    weights_.get(name + ".prelu"));
}

template <typename T>
FeaturePyramid<T> SafNet<T>::encode(const Var<T>& x) const {
  const int div = 1 << cfg_.levels;
  if (x.shape().h % div != 0 || x.shape().w % div != 0) {
    throw ShapeError("encoder input " + x.shape().str() + " must be divisible by " +
                     std::to_string(div) + "; pad the frames to a multiple of " +
                     std::to_string(cfg_.divisor()));
  }
  FeaturePyramid<T> pyr;
  Var<T> h = x;
  for (int l = 1; l <= cfg_.levels; ++l) {
    const std::string p = "encoder.level" + std::to_string(l);
    h = conv_prelu(p + ".conv0", h, 2);
    h = conv_prelu(p + ".conv1", h, 1);
    pyr.levels.push_back(h);
  }
  return pyr;
}

template <typename T>
DecoderState<T> SafNet<T>::decode_step(const DecoderState<T>& state, const Var<T>& phi1,
                                       const Var<T>& phi2, const Var<T>& phi3) const {
  if (state.level < 1 || state.level > cfg_.levels) {
    throw ContractError("decode_step called with level " + std::to_string(state.level));
  }
  const int g = cfg_.dec_groups;
  const Var<T> warped1 = backward_warp(phi1, state.flow21);
  const Var<T> warped3 = backward_warp(phi3, state.flow23);
  Var<T> x = ops::concat<T>(
      {state.flow21, state.flow23, state.mask1, state.mask3, warped1, phi2, warped3});
  x = conv_prelu("decoder.conv0", x, 1);
  x = ops::channel_shuffle(conv_prelu("decoder.conv1", x, 1, 1, 1, g), g);
  x = ops::channel_shuffle(conv_prelu("decoder.conv2", x, 1, 1, 1, g), g);
  x = conv_prelu("decoder.conv3", x, 1, 1, 1, g);
  x = conv_prelu("decoder.conv4", x, 1);
  const Var<T> out = ops::conv_transpose2d(x, weights_.get("decoder.deconv.weight"),
                                           weights_.get("decoder.deconv.bias"), 2, 1);
  DecoderState<T> next;
  next.flow21 = ops::add(upsample_flow2x(state.flow21), ops::slice(out, 0, 2));
  next.flow23 = ops::add(upsample_flow2x(state.flow23), ops::slice(out, 2, 2));
  next.mask1 = ops::sigmoid(ops::slice(out, 4, 1));
  next.mask3 = ops::sigmoid(ops::slice(out, 5, 1));
  next.level = state.level - 1;
  return next;
}

template <typename T>
FlowMaskOutput<T> SafNet<T>::run_decoder(const FeaturePyramid<T>& p1,
                                         const FeaturePyramid<T>& p2,
                                         const FeaturePyramid<T>& p3) const {
  const int levels = cfg_.levels;
  if (static_cast<int>(p1.levels.size()) != levels ||
      static_cast<int>(p2.levels.size()) != levels ||
      static_cast<int>(p3.levels.size()) != levels) {
    throw ShapeError("run_decoder: pyramids must have " + std::to_string(levels) +
                     " levels");
  }
  const Shape coarse = p2.levels.back().shape();
  DecoderState<T> state = DecoderState<T>::initial(coarse.n, coarse.h, coarse.w, levels);
  for (int k = levels; k >= 1; --k) {
    require_same_shape(p1.levels[k - 1].shape(), p2.levels[k - 1].shape(), "pyramid");
    require_same_shape(p3.levels[k - 1].shape(), p2.levels[k - 1].shape(), "pyramid");
    state = decode_step(state, p1.levels[k - 1], p2.levels[k - 1], p3.levels[k - 1]);
  }
  return {state.flow21, state.flow23, state.mask1, state.mask3};
}

template <typename T>
NetworkOutput<T> SafNet<T>::stage1(const FrameBatch<T>& batch) const {
  const int div = cfg_.divisor();
  if (batch.height() % div != 0 || batch.width() % div != 0) {
    throw ShapeError("frame size " + std::to_string(batch.height()) + "x" +
                     std::to_string(batch.width()) + " must be a multiple of " +
                     std::to_string(div) + "; pad the input");
  }
  std::array<FeaturePyramid<T>, 3> pyr;
  for (int i = 0; i < 3; ++i) {
    const Var<T> x = cfg_.half_res_io ? ops::avg_pool2x(batch.input[i]) : batch.input[i];
    pyr[i] = encode(x);
  }
  FlowMaskOutput<T> fm = run_decoder(pyr[0], pyr[1], pyr[2]);
  if (cfg_.half_res_io) {
    fm.flow21 = upsample_flow2x(fm.flow21);
    fm.flow23 = upsample_flow2x(fm.flow23);
    fm.mask1 = ops::upsample2x(fm.mask1);
    fm.mask3 = ops::upsample2x(fm.mask3);
  }
  NetworkOutput<T> out;
  out.flow21 = fm.flow21;
  out.flow23 = fm.flow23;
  out.mask1 = fm.mask1;
  out.mask3 = fm.mask3;
  const Var<T> h1w = backward_warp(batch.linear[0], fm.flow21);
  const Var<T> h3w = backward_warp(batch.linear[2], fm.flow23);
  out.merged = merge_hdr(h1w, batch.linear[1], h3w, fm.mask1, fm.mask3, batch.coefficients);
  return out;
}

template <typename T>
Var<T> SafNet<T>::refine(const std::array<Var<T>, 3>& inputs, const Var<T>& flow21,
                         const Var<T>& flow23, const Var<T>& mask1, const Var<T>& mask3,
                         const Var<T>& merged) const {
  const Shape s = merged.shape();
  for (const auto& x : inputs) {
    if (x.shape().h != s.h || x.shape().w != s.w || x.shape().n != s.n) {
      throw ShapeError("refine: input " + x.shape().str() + " vs merged " + s.str());
    }
  }
  auto extract = [&](int i, const Var<T>& x) {
    const std::string p = "refine.extract" + std::to_string(i);
    return conv_prelu(p + ".conv1", conv_prelu(p + ".conv0", x, 1), 1);
  };
  const Var<T> y1 = backward_warp(extract(1, inputs[0]), flow21);
  const Var<T> y2 =
      extract(2, ops::concat<T>({inputs[1], flow21, flow23, mask1, mask3, merged}));
  const Var<T> y3 = backward_warp(extract(3, inputs[2]), flow23);
  Var<T> z = conv_prelu("refine.fuse", ops::concat<T>({y1, y2, y3}), 1);
  for (std::size_t i = 0; i < cfg_.refine_dilations.size(); ++i) {
    const int d = cfg_.refine_dilations[i];
    const Var<T> h = conv_prelu("refine.block" + std::to_string(i + 1), z, 1, d, d);
    z = cfg_.refine_blocks == RefineBlock::Residual ? ops::add(z, h) : h;
  }
  const Var<T> residual = conv("refine.out", z, 1, 1, 1, 1);
  return ops::relu(ops::add(merged, residual));
}

template <typename T>
NetworkOutput<T> SafNet<T>::forward(const FrameBatch<T>& batch) const {
  NetworkOutput<T> out = stage1(batch);
  out.refined =
      refine(batch.input, out.flow21, out.flow23, out.mask1, out.mask3, out.merged);
  return out;
}

template <typename T>
NetworkOutput<T> SafNet<T>::forward_windowed(const FrameBatch<T>& batch, int window,
                                             bool detach) const {
  NetworkOutput<T> out = stage1(batch);
  const WindowGrid grid = WindowGrid::make(batch.height(), batch.width(), window, window);
  auto part = [&](const Var<T>& v) {
    return window_partition(detach ? v.detach() : v, grid);
  };
  const std::array<Var<T>, 3> tiles{part(batch.input[0]), part(batch.input[1]),
                                    part(batch.input[2])};
  const Var<T> refined = refine(tiles, part(out.flow21), part(out.flow23),
                                part(out.mask1), part(out.mask3), part(out.merged));
  out.refined = window_reverse(refined, grid);
  return out;
}

template <typename T>
Tensor<T> reflect_pad(const Tensor<T>& x, int height, int width) {
  const Shape s = x.shape();
  if (height < s.h || width < s.w) throw ShapeError("reflect_pad cannot shrink");
  auto mirror = [](int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
  };
  Tensor<T> out({s.n, s.c, height, width});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* src = x.plane(n, c);
      T* dst = out.plane(n, c);
      for (int y = 0; y < height; ++y) {
        const int sy = mirror(y, s.h);
        for (int xx = 0; xx < width; ++xx) dst[y * width + xx] = src[sy * s.w + mirror(xx, s.w)];
      }
    }
  }
  return out;
}

namespace {

template <typename T>
TensorD crop_to_double(const Var<T>& v, int height, int width) {
  return ops::crop(v, 0, 0, height, width).value().template cast<double>();
}

}  // namespace

template <typename T>
FusionResult forward_full(const LdrImage& l1, const LdrImage& l2, const LdrImage& l3,
                          const SafNet<T>& net) {
  l1.validate();
  l2.validate();
  l3.validate();
  require_same_shape(l1.pixels.shape(), l2.pixels.shape(), "forward_full frame 1");
  require_same_shape(l3.pixels.shape(), l2.pixels.shape(), "forward_full frame 3");
  const int h = l2.height();
  const int w = l2.width();
  const int div = net.config().divisor();
  const int ph = (h + div - 1) / div * div;
  const int pw = (w + div - 1) / div * div;

  ag::NoGradGuard no_grad;
  std::array<Tensor<T>, 3> frames;
  const LdrImage* src[3] = {&l1, &l2, &l3};
  std::array<std::vector<double>, 3> exposures;
  for (int i = 0; i < 3; ++i) {
    frames[i] = reflect_pad(src[i]->pixels.template cast<T>(), ph, pw);
    exposures[i] = {src[i]->exposure};
  }
  const FrameBatch<T> batch = FrameBatch<T>::make(frames, exposures, net.config().gamma);
  const NetworkOutput<T> out = net.forward(batch);
  FusionResult r;
  r.flow21.uv = crop_to_double(out.flow21, h, w);
  r.flow23.uv = crop_to_double(out.flow23, h, w);
  r.mask1.m = crop_to_double(out.mask1, h, w);
  r.mask3.m = crop_to_double(out.mask3, h, w);
  r.merged.pixels = crop_to_double(out.merged, h, w);
  r.refined.pixels = crop_to_double(out.refined, h, w);
  return r;
}

template class Weights<float>;
template class Weights<double>;
template Weights<float> Weights<double>::cast<float>() const;
template Weights<double> Weights<float>::cast<double>() const;
template struct DecoderState<float>;
template struct DecoderState<double>;
template struct FrameBatch<float>;
template struct FrameBatch<double>;
template class SafNet<float>;
template class SafNet<double>;
template FusionResult forward_full(const LdrImage&, const LdrImage&, const LdrImage&,
                                   const SafNet<float>&);
template FusionResult forward_full(const LdrImage&, const LdrImage&, const LdrImage&,
                                   const SafNet<double>&);
template Tensor<float> reflect_pad(const Tensor<float>&, int, int);
template Tensor<double> reflect_pad(const Tensor<double>&, int, int);

}  // namespace safnet
