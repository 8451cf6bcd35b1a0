// SPDX-License-Identifier: Apache-2.0
//
// The shared L-layer Transformer ranking backbone. Teachers and the student
// differ only in the PriorSpec; every stock is encoded independently along
// its lookback window, mean-pooled over tokens and read out to one logit.

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tips/checkpoint.hpp"
#include "tips/priors.hpp"
#include "tips/tensor.hpp"

namespace tips {

struct ModelConfig {
  std::size_t features = 8;
  std::size_t lookback = 20;
  std::size_t d_model = 64;
  std::size_t layers = 2;
  std::size_t d_ff = 256;
  std::size_t heads = 4;
  double dropout = 0.0;
  double ln_eps = 1e-5;

  void validate() const;
  std::size_t head_dim() const { return d_model / heads; }
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

class ModelParams {
 public:
  ModelParams() = default;

  // Fresh parameters for `prior`: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
  // weights, zero biases, unit layernorm gains, zero RPB table.
  static ModelParams init(const ModelConfig& cfg, const PriorSpec& prior, std::uint64_t seed);
  // Wraps loaded tensors after checking names and shapes against `cfg`/`prior`.
  static ModelParams from_tensors(const ModelConfig& cfg, const PriorSpec& prior,
                                  std::vector<NamedTensor> tensors);
  static ModelParams load(const std::filesystem::path& path, const ModelConfig& cfg,
                          const PriorSpec& prior);
  void save(const std::filesystem::path& path) const;

  const ModelConfig& config() const { return config_; }
  const Tensor& get(std::string_view name) const;
  Tensor& get(std::string_view name);
  bool contains(std::string_view name) const;
  const std::vector<NamedTensor>& tensors() const { return tensors_; }
  std::vector<NamedTensor>& tensors() { return tensors_; }

  std::size_t parameter_count() const;
  ModelParams clone() const;
  void zero_grad();

 private:
  ModelConfig config_;
  std::vector<NamedTensor> tensors_;
};

struct ForwardOptions {
  bool capture_attention = false;
  // Keeps the final-layer token states (before pooling).
  bool capture_hidden = false;
  // Enables dropout; requires rng when the configured rate is nonzero.
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

struct ForwardArtifacts {
  Tensor logits;                 // [S]
  std::vector<Tensor> attention; // per layer [S, H, T', T'], detached copies
  Tensor hidden;                 // [S, T', d] when requested
};

// A prior, its parameters and the cached mask/bias context.
struct Model {
  PriorSpec prior;
  ModelParams params;
  std::shared_ptr<const PriorContext> context;

  static Model create(const ModelConfig& cfg, const PriorSpec& prior, std::uint64_t seed);
  static Model wrap(const PriorSpec& prior, ModelParams params);

  const ModelConfig& config() const { return params.config(); }
  ForwardArtifacts forward(const Tensor& x, const ForwardOptions& opts = {}) const;
};

// x[S, T, F] -> logits[S] (+ attention maps when requested).
ForwardArtifacts forward(const ModelParams& params, const PriorContext& ctx, const Tensor& x,
                         const ForwardOptions& opts = {});

// Deterministic per-teacher seed: a function of the run seed and the prior.
std::uint64_t derive_seed(std::uint64_t seed, const PriorSpec& prior);

}  // namespace tips
