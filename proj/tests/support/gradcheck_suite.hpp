// SPDX-License-Identifier: Apache-2.0
//
// Randomised finite-difference checks over every differentiable operation
// and the full backbone under each prior.

#pragma once

#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "tips/model.hpp"
#include "tips/objectives.hpp"
#include "tips/priors.hpp"
#include "tips/tensor.hpp"

namespace gradcheck {

struct Case {
  std::string name;
  // Builds inputs for a given seed and returns (loss_fn, inputs).
  std::function<std::pair<std::function<tips::Tensor()>, std::vector<tips::Tensor>>(std::uint64_t)> make;
};

struct Outcome {
  std::string name;
  std::uint64_t seed = 0;
  double worst_rel = 0.0;
};

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline std::vector<Case> op_cases() {
  using namespace tips;
  using oracle::random_projection;
  using oracle::random_tensor;
  std::vector<Case> cases;

  cases.push_back({"matmul", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
                     Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
                     return std::make_pair(std::function<Tensor()>([=] { return random_projection(matmul(a, b), seed); }),
                                           std::vector<Tensor>{a, b});
                   }});
  cases.push_back({"matmul-batched", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::size_t bt = pick(rng, 1, 3), m = pick(rng, 1, 3), k = pick(rng, 1, 3), n = pick(rng, 1, 3);
                     Tensor a = random_tensor({bt, 2, m, k}, rng), b = random_tensor({bt, 2, k, n}, rng);
                     return std::make_pair(std::function<Tensor()>([=] { return random_projection(matmul(a, b), seed); }),
                                           std::vector<Tensor>{a, b});
                   }});
  cases.push_back({"matmul-shared", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::size_t m = pick(rng, 1, 3), k = pick(rng, 1, 4), n = pick(rng, 1, 3);
                     Tensor a = random_tensor({2, m, k}, rng), b = random_tensor({k, n}, rng);
                     return std::make_pair(std::function<Tensor()>([=] { return random_projection(matmul(a, b), seed); }),
                                           std::vector<Tensor>{a, b});
                   }});
  for (const char* op : {"add", "sub", "mul"}) {
    cases.push_back({std::string(op) + "-broadcast", [op = std::string(op)](std::uint64_t seed) {
                       std::mt19937_64 rng(seed);
                       const std::size_t r = pick(rng, 1, 3), c = pick(rng, 1, 4);
                       Tensor a = random_tensor({r, 2, c}, rng);
                       Tensor b = pick(rng, 0, 1) ? random_tensor({c}, rng) : random_tensor({2, c}, rng);
                       auto fn = [=]() {
                         Tensor y = op == "add" ? add(a, b) : op == "sub" ? sub(a, b) : mul(a, b);
                         return random_projection(y, seed);
                       };
                       return std::make_pair(std::function<Tensor()>(fn), std::vector<Tensor>{a, b});
                     }});
  }
  cases.push_back({"scale+add_scalar", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     Tensor a = random_tensor({pick(rng, 1, 5)}, rng);
                     return std::make_pair(std::function<Tensor()>([=] { return random_projection(add_scalar(scale(a, -1.7), 0.3), seed); }),
                                           std::vector<Tensor>{a});
                   }});
  cases.push_back({"softmax-masked", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::size_t r = pick(rng, 1, 3), c = pick(rng, 2, 5);
                     Tensor a = random_tensor({r, c}, rng);
                     Tensor mask = Tensor::zeros({r, c});
                     for (std::size_t i = 0; i < r; ++i) {
                       mask.mutable_data()[i * c + pick(rng, 0, c - 1)] = -std::numeric_limits<double>::infinity();
                       mask.mutable_data()[i * c + ((pick(rng, 0, c - 1) + 1) % c)] = 0.0;
                     }
                     // keep at least one open entry per row
                     for (std::size_t i = 0; i < r; ++i) mask.mutable_data()[i * c + (seed % c)] = 0.0;
                     return std::make_pair(std::function<Tensor()>([=] { return random_projection(softmax_lastdim(add(a, mask)), seed); }),
                                           std::vector<Tensor>{a});
                   }});
  cases.push_back({"log_softmax", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     Tensor a = random_tensor({pick(rng, 1, 3), pick(rng, 1, 5)}, rng);
                     return std::make_pair(std::function<Tensor()>([=] { return random_projection(log_softmax_lastdim(a), seed); }),
                                           std::vector<Tensor>{a});
                   }});
  cases.push_back({"layernorm", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::size_t c = pick(rng, 2, 6);
                     Tensor a = random_tensor({pick(rng, 1, 3), c}, rng);
                     Tensor g = random_tensor({c}, rng), b = random_tensor({c}, rng);
                     return std::make_pair(std::function<Tensor()>([=] { return random_projection(layernorm(a, g, b, 1e-5), seed); }),
                                           std::vector<Tensor>{a, g, b});
                   }});
  cases.push_back({"relu", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     Tensor a = random_tensor({pick(rng, 1, 8)}, rng);
                     return std::make_pair(std::function<Tensor()>([=] { return random_projection(relu(a), seed); }),
                                           std::vector<Tensor>{a});
                   }});
  cases.push_back({"gelu", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     Tensor a = random_tensor({pick(rng, 1, 8)}, rng, 2.0);
                     return std::make_pair(std::function<Tensor()>([=] { return random_projection(gelu(a), seed); }),
                                           std::vector<Tensor>{a});
                   }});
  cases.push_back({"log", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     Tensor a = random_tensor({pick(rng, 1, 6)}, rng);
                     for (double& v : a.mutable_data()) v = 0.5 + std::abs(v);
                     return std::make_pair(std::function<Tensor()>([=] { return random_projection(log(a), seed); }),
                                           std::vector<Tensor>{a});
                   }});
  cases.push_back({"transpose+reshape", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::size_t a0 = pick(rng, 1, 3), a1 = pick(rng, 1, 3), a2 = pick(rng, 1, 3);
                     Tensor a = random_tensor({a0, a1, a2}, rng);
                     const std::size_t d0 = pick(rng, 0, 2), d1 = pick(rng, 0, 2);
                     return std::make_pair(std::function<Tensor()>([=] {
                                             return random_projection(reshape(transpose(a, d0, d1), {a0 * a1 * a2}), seed);
                                           }),
                                           std::vector<Tensor>{a});
                   }});
  cases.push_back({"unfold", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::size_t t = pick(rng, 2, 6), p = pick(rng, 1, t), s = pick(rng, 1, 2);
                     Tensor a = random_tensor({2, t, pick(rng, 1, 3)}, rng);
                     return std::make_pair(std::function<Tensor()>([=] { return random_projection(unfold(a, p, s), seed); }),
                                           std::vector<Tensor>{a});
                   }});
  cases.push_back({"gather", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::size_t n = pick(rng, 2, 6);
                     Tensor table = random_tensor({n}, rng);
                     std::vector<std::size_t> idx(6);
                     for (auto& i : idx) i = pick(rng, 0, n - 1);
                     return std::make_pair(std::function<Tensor()>([=] { return random_projection(gather(table, idx, {2, 3}), seed); }),
                                           std::vector<Tensor>{table});
                   }});
  cases.push_back({"sum+mean+mean_dim", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     Tensor a = random_tensor({pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 3)}, rng);
                     const std::size_t axis = pick(rng, 0, 2);
                     return std::make_pair(std::function<Tensor()>([=] {
                                             return add(add(scale(sum(a), 0.3), mean(a)), random_projection(mean_dim(a, axis), seed));
                                           }),
                                           std::vector<Tensor>{a});
                   }});
  cases.push_back({"dropout", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     Tensor a = random_tensor({pick(rng, 2, 10)}, rng);
                     return std::make_pair(std::function<Tensor()>([=] {
                                             std::mt19937_64 mask_rng(seed);  // same mask on every evaluation
                                             return random_projection(dropout(a, 0.3, mask_rng), seed);
                                           }),
                                           std::vector<Tensor>{a});
                   }});
  cases.push_back({"soft_spearman", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::size_t n = pick(rng, 3, 8);
                     Tensor r = random_tensor({n}, rng);
                     auto y = random_tensor({n}, rng, 1.0, false);
                     std::vector<double> yv(y.data().begin(), y.data().end());
                     return std::make_pair(std::function<Tensor()>([=] { return soft_spearman(r, yv, 2.0); }),
                                           std::vector<Tensor>{r});
                   }});
  cases.push_back({"distill_loss", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::size_t n = pick(rng, 2, 7);
                     Tensor r = random_tensor({n}, rng);
                     Tensor target = smooth_target(softmax_lastdim(random_tensor({n}, rng, 1.0, false)), 0.3);
                     return std::make_pair(std::function<Tensor()>([=] { return distill_loss(r, target); }),
                                           std::vector<Tensor>{r});
                   }});
  cases.push_back({"masked_attention", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::size_t t = pick(rng, 2, 5), dh = pick(rng, 1, 3);
                     Tensor q = random_tensor({2, t, dh}, rng), k = random_tensor({2, t, dh}, rng),
                            v = random_tensor({2, t, dh}, rng);
                     Tensor mask = causal_mask(t);
                     Tensor bias = alibi_bias(t, 2);
                     return std::make_pair(std::function<Tensor()>([=] {
                                             return random_projection(masked_attention(q, k, v, mask, bias).output, seed);
                                           }),
                                           std::vector<Tensor>{q, k, v});
                   }});
  cases.push_back({"rpb_bias", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::size_t t = pick(rng, 1, 5);
                     Tensor table = random_tensor({2 * t - 1}, rng);
                     return std::make_pair(std::function<Tensor()>([=] { return random_projection(rpb_bias(t, table), seed); }),
                                           std::vector<Tensor>{table});
                   }});
  cases.push_back({"patch_embed", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::size_t t = pick(rng, 2, 5), f = pick(rng, 1, 3), p = pick(rng, 1, t), d = pick(rng, 1, 3);
                     Tensor x = random_tensor({2, t, f}, rng), w = random_tensor({p * f, d}, rng), b = random_tensor({d}, rng);
                     return std::make_pair(std::function<Tensor()>([=] { return random_projection(patch_embed(x, p, 1, w, b), seed); }),
                                           std::vector<Tensor>{x, w, b});
                   }});
  return cases;
}

// A tiny two-layer backbone for each prior; every parameter and the input are checked.
inline std::vector<Case> backbone_cases() {
  using namespace tips;
  std::vector<Case> cases;
  const std::vector<PriorSpec> priors = {PriorSpec::vanilla(), PriorSpec::past(),          PriorSpec::future(),
                                         PriorSpec::patch(),   PriorSpec::alibi(2),        PriorSpec::fixed_periodic({2, 3}),
                                         PriorSpec::learnable_rpb()};
  for (const auto& prior : priors) {
    cases.push_back({"backbone-" + std::string(to_string(prior.kind)), [prior](std::uint64_t seed) {
                       std::mt19937_64 rng(seed);
                       ModelConfig cfg;
                       cfg.features = 2;
                       cfg.lookback = 4;
                       cfg.d_model = 4;
                       cfg.d_ff = 6;
                       cfg.heads = 2;
                       cfg.layers = 2;
                       Model model = Model::create(cfg, prior, seed);
                       // Randomise the otherwise zero biases and the RPB table so every path is exercised.
                       std::normal_distribution<double> n(0.0, 0.3);
                       for (auto& e : model.params.tensors()) {
                         if (e.value.rank() == 1) {
                           for (double& v : e.value.mutable_data()) v += n(rng);
                         }
                       }
                       Tensor x = oracle::random_tensor({3, 4, 2}, rng);
                       std::vector<Tensor> inputs{x};
                       for (auto& e : model.params.tensors()) inputs.push_back(e.value);
                       auto fn = [model, x, seed]() { return oracle::random_projection(model.forward(x).logits, seed); };
                       return std::make_pair(std::function<Tensor()>(fn), inputs);
                     }});
  }
  return cases;
}

inline std::vector<Outcome> run(const std::vector<Case>& cases, std::size_t seeds_per_case,
                                std::uint64_t base_seed = 1000) {
  std::vector<Outcome> out;
  for (const auto& c : cases) {
    for (std::size_t i = 0; i < seeds_per_case; ++i) {
      const std::uint64_t seed = base_seed + i;
      auto [fn, inputs] = c.make(seed);
      out.push_back({c.name, seed, oracle::check_gradients(fn, inputs).worst_rel});
    }
  }
  return out;
}

}  // namespace gradcheck
