// SPDX-License-Identifier: Apache-2.0
#include "tips/priors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>

namespace tips {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct KindName {
  PriorKind kind;
  std::string_view name;
};

constexpr KindName kKindNames[] = {
    {PriorKind::vanilla, "vanilla"},
    {PriorKind::past, "past"},
    {PriorKind::future, "future"},
    {PriorKind::patch, "patch"},
    {PriorKind::alibi, "alibi"},
    {PriorKind::fixed_periodic, "fixed-periodic"},
    {PriorKind::learnable_rpb, "learnable-rpb"},
};

}  // namespace

std::string_view to_string(PriorKind kind) {
  for (const auto& entry : kKindNames) {
    if (entry.kind == kind) return entry.name;
  }
  return "unknown";
}

PriorKind prior_kind_from_string(std::string_view name) {
  for (const auto& entry : kKindNames) {
    if (entry.name == name) return entry.kind;
  }
  throw ConfigError("unknown prior kind '" + std::string(name) + "'");
}

PriorSpec PriorSpec::vanilla() { return {}; }

PriorSpec PriorSpec::past() {
  PriorSpec s;
  s.kind = PriorKind::past;
  return s;
}

PriorSpec PriorSpec::future() {
  PriorSpec s;
  s.kind = PriorKind::future;
  return s;
}

PriorSpec PriorSpec::patch(std::size_t len, std::size_t stride) {
  PriorSpec s;
  s.kind = PriorKind::patch;
  s.patch_len = len;
  s.patch_stride = stride;
  return s;
}

PriorSpec PriorSpec::alibi(std::size_t heads) {
  PriorSpec s;
  s.kind = PriorKind::alibi;
  s.slopes = alibi_slopes(heads);
  return s;
}

PriorSpec PriorSpec::fixed_periodic(std::vector<double> periods) {
  PriorSpec s;
  s.kind = PriorKind::fixed_periodic;
  s.periods = std::move(periods);
  return s;
}

PriorSpec PriorSpec::learnable_rpb() {
  PriorSpec s;
  s.kind = PriorKind::learnable_rpb;
  return s;
}

std::size_t PriorSpec::tokens(std::size_t lookback) const {
  if (kind != PriorKind::patch) return lookback;
  if (patch_len == 0 || patch_stride == 0) throw ConfigError("patch length and stride must be >= 1");
  if (patch_len > lookback) {
    throw ConfigError("patch length " + std::to_string(patch_len) + " exceeds lookback " +
                      std::to_string(lookback));
  }
  return (lookback - patch_len) / patch_stride + 1;
}

void PriorSpec::validate(std::size_t lookback, std::size_t heads) const {
  const std::size_t t = tokens(lookback);
  switch (kind) {
    case PriorKind::future:
      if (t < 2) throw ConfigError("future-only mask needs at least 2 tokens");
      break;
    case PriorKind::alibi:
      if (slopes.size() != heads) {
        throw ConfigError("alibi prior needs one slope per head (" + std::to_string(heads) +
                          "), got " + std::to_string(slopes.size()));
      }
      break;
    case PriorKind::fixed_periodic:
      if (periods.size() != heads) {
        throw ConfigError("fixed-periodic prior needs one period per head (" +
                          std::to_string(heads) + "), got " + std::to_string(periods.size()));
      }
      for (double p : periods) {
        if (!(p > 0.0)) throw ConfigError("periodic bias period must be positive");
      }
      break;
    default:
      break;
  }
}

void to_json(nlohmann::json& j, const PriorSpec& spec) {
  j = nlohmann::json{{"kind", std::string(to_string(spec.kind))}};
  switch (spec.kind) {
    case PriorKind::patch:
      j["patch_len"] = spec.patch_len;
      j["patch_stride"] = spec.patch_stride;
      break;
    case PriorKind::alibi:
      j["slopes"] = spec.slopes;
      break;
    case PriorKind::fixed_periodic:
      j["periods"] = spec.periods;
      break;
    default:
      break;
  }
}

void from_json(const nlohmann::json& j, PriorSpec& spec) {
  const auto kind = prior_kind_from_string(j.at("kind").get<std::string>());
  switch (kind) {
    case PriorKind::patch:
      spec = PriorSpec::patch(j.value("patch_len", std::size_t{2}), j.value("patch_stride", std::size_t{1}));
      break;
    case PriorKind::alibi:
      spec = PriorSpec{};
      spec.kind = PriorKind::alibi;
      if (j.contains("slopes")) spec.slopes = j.at("slopes").get<std::vector<double>>();
      break;
    case PriorKind::fixed_periodic:
      spec = PriorSpec::fixed_periodic();
      if (j.contains("periods")) spec.periods = j.at("periods").get<std::vector<double>>();
      break;
    default:
      spec = PriorSpec{};
      spec.kind = kind;
      break;
  }
}

std::string_view to_string(BiasGroup group) {
  switch (group) {
    case BiasGroup::causality: return "causality";
    case BiasGroup::locality: return "locality";
    case BiasGroup::periodicity: return "periodicity";
    case BiasGroup::vanilla: return "vanilla";
  }
  return "unknown";
}

BiasGroup bias_group_of(PriorKind kind) {
  switch (kind) {
    case PriorKind::past:
    case PriorKind::future: return BiasGroup::causality;
    case PriorKind::patch:
    case PriorKind::alibi: return BiasGroup::locality;
    case PriorKind::fixed_periodic:
    case PriorKind::learnable_rpb: return BiasGroup::periodicity;
    case PriorKind::vanilla: return BiasGroup::vanilla;
  }
  return BiasGroup::vanilla;
}

TeacherSetSpec TeacherSetSpec::full() {
  TeacherSetSpec set;
  set.teachers = {PriorSpec::past(),           PriorSpec::future(),
                  PriorSpec::patch(2, 1),      PriorSpec::alibi(4),
                  PriorSpec::fixed_periodic(), PriorSpec::learnable_rpb(),
                  PriorSpec::vanilla()};
  return set;
}

TeacherSetSpec TeacherSetSpec::subset(std::string_view groups) {
  if (groups == "all") return full();
  std::vector<BiasGroup> wanted;
  std::string token;
  std::istringstream in{std::string(groups)};
  while (std::getline(in, token, ',')) {
    if (token == "causality") wanted.push_back(BiasGroup::causality);
    else if (token == "locality") wanted.push_back(BiasGroup::locality);
    else if (token == "periodicity") wanted.push_back(BiasGroup::periodicity);
    else if (token == "vanilla") wanted.push_back(BiasGroup::vanilla);
    else if (token == "all") return full();
    else throw ConfigError("unknown teacher subset '" + token + "'");
  }
  TeacherSetSpec set;
  set.ablation_subset = true;
  for (const auto& spec : full().teachers) {
    if (std::find(wanted.begin(), wanted.end(), bias_group_of(spec.kind)) != wanted.end()) {
      set.teachers.push_back(spec);
    }
  }
  if (set.teachers.empty()) throw ConfigError("teacher subset '" + std::string(groups) + "' is empty");
  return set;
}

void TeacherSetSpec::validate() const {
  if (teachers.empty()) throw ConfigError("teacher set is empty");
  if (!ablation_subset && teachers.size() != 7) {
    throw ConfigError("the bias teacher ensemble needs exactly 7 teachers, got " +
                      std::to_string(teachers.size()));
  }
}

std::vector<double> alibi_slopes(std::size_t heads) {
  std::vector<double> slopes(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    slopes[h] = std::pow(2.0, -8.0 / static_cast<double>(h + 1));
  }
  return slopes;
}

Tensor causal_mask(std::size_t length) {
  if (length == 0) throw ConfigError("causal_mask: length must be >= 1");
  std::vector<double> m(length * length, 0.0);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = i + 1; j < length; ++j) m[i * length + j] = kNegInf;
  }
  return Tensor::from({length, length}, std::move(m));
}

Tensor reverse_mask(std::size_t length) {
  if (length < 2) throw ConfigError("reverse_mask: length must be >= 2");
  std::vector<double> m(length * length, kNegInf);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = i + 1; j < length; ++j) m[i * length + j] = 0.0;
  }
  m[(length - 1) * length + (length - 1)] = 0.0;
  return Tensor::from({length, length}, std::move(m));
}

Tensor alibi_bias(std::size_t length, std::span<const double> slopes) {
  const std::size_t heads = slopes.size();
  std::vector<double> b(heads * length * length);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < length; ++i) {
      for (std::size_t j = 0; j < length; ++j) {
        const double dist = i > j ? static_cast<double>(i - j) : static_cast<double>(j - i);
        // avoid -0.0 on the diagonal
        b[(h * length + i) * length + j] = dist == 0.0 ? 0.0 : -slopes[h] * dist;
      }
    }
  }
  return Tensor::from({heads, length, length}, std::move(b));
}

Tensor alibi_bias(std::size_t length, std::size_t heads) {
  auto slopes = alibi_slopes(heads);
  return alibi_bias(length, slopes);
}

double periodic_bias_value(std::size_t distance, double period) {
  if (!(period > 0.0)) throw ConfigError("periodic bias period must be positive");
  const double beta = std::fmod(static_cast<double>(distance), period);
  return beta < period / 2.0 ? beta : period - beta;
}

Tensor fixed_periodic_bias(std::size_t length, std::span<const double> periods) {
  const std::size_t heads = periods.size();
  std::vector<double> b(heads * length * length);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < length; ++i) {
      for (std::size_t j = 0; j < length; ++j) {
        const std::size_t dist = i > j ? i - j : j - i;
        b[(h * length + i) * length + j] = periodic_bias_value(dist, periods[h]);
      }
    }
  }
  return Tensor::from({heads, length, length}, std::move(b));
}

namespace {

std::vector<std::size_t> rpb_indices(std::size_t length) {
  std::vector<std::size_t> idx(length * length);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = 0; j < length; ++j) idx[i * length + j] = i + (length - 1) - j;
  }
  return idx;
}

}  // namespace

Tensor rpb_bias(std::size_t length, const Tensor& table) {
  if (table.numel() != 2 * length - 1) {
    throw ShapeError("rpb_bias: table holds " + std::to_string(table.numel()) +
                     " offsets, sequence length " + std::to_string(length) + " needs " +
                     std::to_string(2 * length - 1));
  }
  auto idx = rpb_indices(length);
  return gather(table, idx, {length, length});
}

Tensor patch_embed(const Tensor& x, std::size_t patch, std::size_t stride, const Tensor& w_proj,
                   const Tensor& b_proj) {
  Tensor windows = unfold(x, patch, stride);
  Tensor out = matmul(windows, w_proj);
  if (b_proj.defined()) out = add(out, b_proj);
  return out;
}

AttentionOutput masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                 const Tensor& mask, const Tensor& bias) {
  if (q.rank() < 2) throw ShapeError("masked_attention: Q must be at least 2-D");
  const std::size_t r = q.rank();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.shape().back()));
  Tensor scores = scale(matmul(q, transpose(k, r - 2, r - 1)), inv_sqrt_d);
  if (mask.defined()) scores = add(scores, mask);
  if (bias.defined()) scores = add(scores, bias);
  Tensor weights = softmax_lastdim(scores);
  return {matmul(weights, v), weights};
}

Tensor PriorContext::bias(const Tensor& rpb_table) const {
  if (spec.kind == PriorKind::learnable_rpb) {
    if (!rpb_table.defined()) throw ConfigError("learnable-rpb prior requires an rpb table");
    return gather(rpb_table, rpb_index, {tokens, tokens});
  }
  return fixed_bias;
}

PriorSpec PriorSpec::resolved(std::size_t heads) const {
  PriorSpec out = *this;
  if (out.kind == PriorKind::alibi && out.slopes.empty()) out.slopes = alibi_slopes(heads);
  return out;
}

std::shared_ptr<const PriorContext> prior_context(const PriorSpec& requested, std::size_t lookback,
                                                  std::size_t heads) {
  const PriorSpec spec = requested.resolved(heads);
  static std::mutex mu;
  static std::map<std::string, std::shared_ptr<const PriorContext>> cache;
  spec.validate(lookback, heads);
  const std::string key = nlohmann::json(spec).dump() + "|" + std::to_string(lookback) + "|" +
                          std::to_string(heads);
  std::lock_guard lock(mu);
  if (auto it = cache.find(key); it != cache.end()) return it->second;

  auto ctx = std::make_shared<PriorContext>();
  ctx->spec = spec;
  ctx->tokens = spec.tokens(lookback);
  switch (spec.kind) {
    case PriorKind::past: ctx->mask = causal_mask(ctx->tokens); break;
    case PriorKind::future: ctx->mask = reverse_mask(ctx->tokens); break;
    case PriorKind::alibi: ctx->fixed_bias = alibi_bias(ctx->tokens, spec.slopes); break;
    case PriorKind::fixed_periodic:
      ctx->fixed_bias = fixed_periodic_bias(ctx->tokens, spec.periods);
      break;
    case PriorKind::learnable_rpb: ctx->rpb_index = rpb_indices(ctx->tokens); break;
    case PriorKind::vanilla:
    case PriorKind::patch: break;
  }
  cache.emplace(key, ctx);
  return ctx;
}

}  // namespace tips
