// SPDX-License-Identifier: Apache-2.0
#include "tips/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace tips {

namespace {

std::string layer_name(std::size_t layer, std::string_view leaf) {
  return "layer" + std::to_string(layer) + "." + std::string(leaf);
}

// Expected parameter layout for a (config, prior) pair, in storage order.
std::vector<std::pair<std::string, Shape>> layout(const ModelConfig& cfg, const PriorSpec& prior) {
  const std::size_t d = cfg.d_model;
  const std::size_t in = prior.kind == PriorKind::patch ? prior.patch_len * cfg.features : cfg.features;
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("embed.weight", Shape{in, d});
  out.emplace_back("embed.bias", Shape{d});
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    for (const char* proj : {"q", "k", "v", "o"}) {
      out.emplace_back(layer_name(l, std::string("attn.w") + proj), Shape{d, d});
      out.emplace_back(layer_name(l, std::string("attn.b") + proj), Shape{d});
    }
    out.emplace_back(layer_name(l, "ln1.gamma"), Shape{d});
    out.emplace_back(layer_name(l, "ln1.beta"), Shape{d});
    out.emplace_back(layer_name(l, "ffn.w1"), Shape{d, cfg.d_ff});
    out.emplace_back(layer_name(l, "ffn.b1"), Shape{cfg.d_ff});
    out.emplace_back(layer_name(l, "ffn.w2"), Shape{cfg.d_ff, d});
    out.emplace_back(layer_name(l, "ffn.b2"), Shape{d});
    out.emplace_back(layer_name(l, "ln2.gamma"), Shape{d});
    out.emplace_back(layer_name(l, "ln2.beta"), Shape{d});
  }
  out.emplace_back("readout.weight", Shape{d, 1});
  out.emplace_back("readout.bias", Shape{1});
  if (prior.kind == PriorKind::learnable_rpb) {
    const std::size_t t = prior.tokens(cfg.lookback);
    out.emplace_back("rpb.table", Shape{2 * t - 1});
  }
  return out;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

void check_finite(const Tensor& t, int layer, const char* what) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw DivergenceError(layer, std::string("non-finite ") + what);
  }
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

void ModelConfig::validate() const {
  if (features == 0 || lookback == 0 || d_model == 0 || layers == 0 || d_ff == 0 || heads == 0) {
    throw ConfigError("model dimensions must all be positive");
  }
  if (d_model % heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by heads " +
                      std::to_string(heads));
  }
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
  j = nlohmann::json{{"features", cfg.features}, {"lookback", cfg.lookback},
                     {"d_model", cfg.d_model},   {"layers", cfg.layers},
                     {"d_ff", cfg.d_ff},         {"heads", cfg.heads},
                     {"dropout", cfg.dropout},   {"ln_eps", cfg.ln_eps}};
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
  ModelConfig d;
  cfg.features = j.value("features", d.features);
  cfg.lookback = j.value("lookback", d.lookback);
  cfg.d_model = j.value("d_model", d.d_model);
  cfg.layers = j.value("layers", d.layers);
  cfg.d_ff = j.value("d_ff", d.d_ff);
  cfg.heads = j.value("heads", d.heads);
  cfg.dropout = j.value("dropout", d.dropout);
  cfg.ln_eps = j.value("ln_eps", d.ln_eps);
}

std::uint64_t derive_seed(std::uint64_t seed, const PriorSpec& prior) {
  // FNV-1a over the serialized prior, mixed with the run seed.
  const std::string key = nlohmann::json(prior).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : key) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(seed ^ splitmix64(h));
}

ModelParams ModelParams::init(const ModelConfig& cfg, const PriorSpec& prior, std::uint64_t seed) {
  cfg.validate();
  ModelParams p;
  p.config_ = cfg;
  std::mt19937_64 rng(seed);
  for (auto& [name, shape] : layout(cfg, prior)) {
    Tensor t = Tensor::zeros(shape, true);
    if (ends_with(name, "gamma")) {
      std::fill(t.mutable_data().begin(), t.mutable_data().end(), 1.0);
    } else if (shape.size() == 2) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(shape[0]));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (double& v : t.mutable_data()) v = dist(rng);
    }
    p.tensors_.push_back({name, std::move(t)});
  }
  return p;
}

ModelParams ModelParams::from_tensors(const ModelConfig& cfg, const PriorSpec& prior,
                                      std::vector<NamedTensor> tensors) {
  cfg.validate();
  auto expected = layout(cfg, prior);
  if (expected.size() != tensors.size()) {
    throw DataError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, expected " +
                    std::to_string(expected.size()) + " for prior " + std::string(to_string(prior.kind)));
  }
  ModelParams p;
  p.config_ = cfg;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (tensors[i].name != expected[i].first || tensors[i].value.shape() != expected[i].second) {
      throw DataError("checkpoint tensor '" + tensors[i].name + "' " +
                      shape_str(tensors[i].value.shape()) + " does not match expected '" +
                      expected[i].first + "' " + shape_str(expected[i].second));
    }
    tensors[i].value.set_requires_grad(true);
  }
  p.tensors_ = std::move(tensors);
  return p;
}

ModelParams ModelParams::load(const std::filesystem::path& path, const ModelConfig& cfg,
                              const PriorSpec& prior) {
  return from_tensors(cfg, prior, load_checkpoint(path));
}

void ModelParams::save(const std::filesystem::path& path) const { save_checkpoint(path, tensors_); }

const Tensor& ModelParams::get(std::string_view name) const {
  for (const auto& entry : tensors_) {
    if (entry.name == name) return entry.value;
  }
  throw ConfigError("unknown parameter '" + std::string(name) + "'");
}

Tensor& ModelParams::get(std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this).get(name));
}

bool ModelParams::contains(std::string_view name) const {
  return std::any_of(tensors_.begin(), tensors_.end(),
                     [&](const NamedTensor& e) { return e.name == name; });
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : tensors_) n += e.value.numel();
  return n;
}

ModelParams ModelParams::clone() const {
  ModelParams p;
  p.config_ = config_;
  for (const auto& e : tensors_) {
    Tensor copy = e.value.detach();
    copy.set_requires_grad(true);
    p.tensors_.push_back({e.name, std::move(copy)});
  }
  return p;
}

void ModelParams::zero_grad() {
  for (auto& e : tensors_) e.value.zero_grad();
}

ForwardArtifacts forward(const ModelParams& params, const PriorContext& ctx, const Tensor& x,
                         const ForwardOptions& opts) {
  const ModelConfig& cfg = params.config();
  if (x.rank() != 3 || x.dim(1) != cfg.lookback || x.dim(2) != cfg.features) {
    throw ShapeError("forward expects X of shape [S x " + std::to_string(cfg.lookback) + " x " +
                     std::to_string(cfg.features) + "], got " + shape_str(x.shape()));
  }
  if (opts.training && cfg.dropout > 0.0 && opts.rng == nullptr) {
    throw ConfigError("dropout during training needs an rng");
  }
  const std::size_t stocks = x.dim(0);
  const std::size_t tokens = ctx.tokens;
  const std::size_t d = cfg.d_model;
  const std::size_t heads = cfg.heads;
  const std::size_t dh = cfg.head_dim();
  const double drop = opts.training ? cfg.dropout : 0.0;

  Tensor h;
  if (ctx.spec.kind == PriorKind::patch) {
    h = patch_embed(x, ctx.spec.patch_len, ctx.spec.patch_stride, params.get("embed.weight"),
                    params.get("embed.bias"));
  } else {
    h = linear(x, params.get("embed.weight"), params.get("embed.bias"));
  }

  const Tensor& mask = ctx.mask;
  const Tensor bias = ctx.bias(params.contains("rpb.table") ? params.get("rpb.table") : Tensor());

  ForwardArtifacts art;
  auto split_heads = [&](const Tensor& t) {
    return transpose(reshape(t, {stocks, tokens, heads, dh}), 1, 2);
  };
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto P = [&](std::string_view leaf) -> const Tensor& { return params.get(layer_name(l, leaf)); };
    Tensor q = split_heads(linear(h, P("attn.wq"), P("attn.bq")));
    Tensor k = split_heads(linear(h, P("attn.wk"), P("attn.bk")));
    Tensor v = split_heads(linear(h, P("attn.wv"), P("attn.bv")));
    // Every prior keeps the diagonal, so an all-masked row can only come from
    // non-finite scores.
    AttentionOutput att;
    try {
      att = masked_attention(q, k, v, mask, bias);
    } catch (const DegenerateRowError&) {
      throw DivergenceError(static_cast<int>(l), "non-finite attention scores");
    }
    if (opts.capture_attention) art.attention.push_back(att.weights.detach());

    Tensor merged = reshape(transpose(att.output, 1, 2), {stocks, tokens, d});
    Tensor o = linear(merged, P("attn.wo"), P("attn.bo"));
    if (drop > 0.0) o = dropout(o, drop, *opts.rng);
    h = layernorm(add(h, o), P("ln1.gamma"), P("ln1.beta"), cfg.ln_eps);

    Tensor f = linear(gelu(linear(h, P("ffn.w1"), P("ffn.b1"))), P("ffn.w2"), P("ffn.b2"));
    if (drop > 0.0) f = dropout(f, drop, *opts.rng);
    h = layernorm(add(h, f), P("ln2.gamma"), P("ln2.beta"), cfg.ln_eps);
    check_finite(h, static_cast<int>(l), "activations");
  }

  if (opts.capture_hidden) art.hidden = h;
  Tensor pooled = mean_dim(h, 1);
  art.logits = reshape(linear(pooled, params.get("readout.weight"), params.get("readout.bias")), {stocks});
  check_finite(art.logits, -1, "logits");
  return art;
}

Model Model::create(const ModelConfig& cfg, const PriorSpec& prior, std::uint64_t seed) {
  return wrap(prior, ModelParams::init(cfg, prior, seed));
}

Model Model::wrap(const PriorSpec& prior, ModelParams params) {
  Model m;
  const ModelConfig& cfg = params.config();
  m.prior = prior.resolved(cfg.heads);
  m.context = prior_context(m.prior, cfg.lookback, cfg.heads);
  m.params = std::move(params);
  return m;
}

ForwardArtifacts Model::forward(const Tensor& x, const ForwardOptions& opts) const {
  return tips::forward(params, *context, x, opts);
}

}  // namespace tips
