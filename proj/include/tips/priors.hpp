// SPDX-License-Identifier: Apache-2.0
//
// Structural attention priors: masks M, additive biases B and input patching.
// A teacher differs from the vanilla backbone only through its PriorSpec.

#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tips/tensor.hpp"

namespace tips {

enum class PriorKind { vanilla, past, future, patch, alibi, fixed_periodic, learnable_rpb };

std::string_view to_string(PriorKind kind);
PriorKind prior_kind_from_string(std::string_view name);

struct PriorSpec {
  PriorKind kind = PriorKind::vanilla;
  std::size_t patch_len = 2;
  std::size_t patch_stride = 1;
  std::vector<double> slopes;   // alibi, one per head
  std::vector<double> periods;  // fixed_periodic, one per head

  static PriorSpec vanilla();
  static PriorSpec past();
  static PriorSpec future();
  static PriorSpec patch(std::size_t len = 2, std::size_t stride = 1);
  static PriorSpec alibi(std::size_t heads = 4);
  static PriorSpec fixed_periodic(std::vector<double> periods = {5, 10, 15, 20});
  static PriorSpec learnable_rpb();

  // Sequence length seen by attention after any patching.
  std::size_t tokens(std::size_t lookback) const;
  void validate(std::size_t lookback, std::size_t heads) const;
  // Fills per-head defaults left empty (alibi slopes).
  PriorSpec resolved(std::size_t heads) const;

  bool operator==(const PriorSpec&) const = default;
};

void to_json(nlohmann::json& j, const PriorSpec& spec);
void from_json(const nlohmann::json& j, PriorSpec& spec);

// Teacher groups used for ablation subsets and attention alignment.
enum class BiasGroup { causality, locality, periodicity, vanilla };
std::string_view to_string(BiasGroup group);
BiasGroup bias_group_of(PriorKind kind);

struct TeacherSetSpec {
  std::vector<PriorSpec> teachers;
  // Set when built from a named subset; the full set must hold exactly 7.
  bool ablation_subset = false;

  // past, future, patch, alibi, fixed, learn, vanilla
  static TeacherSetSpec full();
  // "all", "causality", "locality", "periodicity" (comma separated allowed).
  static TeacherSetSpec subset(std::string_view groups);

  void validate() const;
  std::size_t size() const { return teachers.size(); }
};

// m_h = 2^(-8/h) for h = 1..heads.
std::vector<double> alibi_slopes(std::size_t heads);

// M_ij = 0 if i >= j else -inf.
Tensor causal_mask(std::size_t length);
// M_ij = 0 if i < j else -inf, with (T-1, T-1) opened so the last row is not empty.
Tensor reverse_mask(std::size_t length);
// [H, T, T] with B^h_ij = -m_h |i - j|.
Tensor alibi_bias(std::size_t length, std::span<const double> slopes);
Tensor alibi_bias(std::size_t length, std::size_t heads);
// [H, T, T] triangular wave: beta = |i-j| mod p_h; beta if beta < p_h/2 else p_h - beta.
Tensor fixed_periodic_bias(std::size_t length, std::span<const double> periods);
double periodic_bias_value(std::size_t distance, double period);
// [T, T] with B_ij = table[(i - j) + T - 1]; gradients flow to the table.
Tensor rpb_bias(std::size_t length, const Tensor& table);

// Unfold X[S,T,F] into windows and project: [S, T', d].
Tensor patch_embed(const Tensor& x, std::size_t patch, std::size_t stride, const Tensor& w_proj,
                   const Tensor& b_proj = Tensor());

struct AttentionOutput {
  Tensor output;   // [..., T', d_head]
  Tensor weights;  // [..., T', T']
};

// softmax(Q K^T / sqrt(d_head) + M + B) V. Undefined M or B are skipped.
AttentionOutput masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                 const Tensor& mask, const Tensor& bias);

// Mask and fixed bias for one (prior, T') pair, built once and shared.
struct PriorContext {
  PriorSpec spec;
  std::size_t tokens = 0;
  Tensor mask;                          // [T', T'] or undefined
  Tensor fixed_bias;                    // [H, T', T'] or undefined
  std::vector<std::size_t> rpb_index;   // T'*T' offsets into the RPB table

  Tensor bias(const Tensor& rpb_table) const;
};

std::shared_ptr<const PriorContext> prior_context(const PriorSpec& spec, std::size_t lookback,
                                                  std::size_t heads);

}  // namespace tips
