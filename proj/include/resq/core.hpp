#pragma once

// Recursive sub-query construction.
//
// Each round k builds a soft selection over the query words,
//
//   h(k)     = 1 - min(sum_{i<k} alpha(i), 1)
//   alpha(k) = softmax_n[ W_a1 tanh(W_a0 (h_n(k) * (vbar(k-1) . s_n)) + b_a0) + b_a1 ],
//
// where vbar is the spatially averaged current feature map, turns it into a
// sub-query q(k) = sum_n alpha_n(k) s_n, and uses q(k) to modulate the map:
//
//   gamma = tanh(W_g q + b_g), beta = tanh(W_b q + b_b)
//   v(k)  = f2( relu( f1(v(k-1)) * gamma + beta ) + v(k-1) ).
//
// All batched operations take S as [B, Nmax, C] with per-sample `lengths`;
// padded word positions get zero attention and never enter any sum.

#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "resq/config.hpp"
#include "resq/layers.hpp"

namespace resq::core {

/// Two-layer word scorer: C -> hidden -> 1.
struct AttentionScorer {
  Linear w0;
  Linear w1;

  AttentionScorer() = default;
  AttentionScorer(ParamRegistry& reg, const std::string& name, int dim, int hidden, Rng& rng);
};

/// Parameters of one round. f1 = 1x1 conv + instance norm; f2 = 3x3 conv +
/// batch norm + ReLU.
struct RoundParameters {
  AttentionScorer attention;
  Linear gamma;
  Linear beta;
  Conv2d f1;
  Conv2d f2;
  std::unique_ptr<BatchNorm2d> f2_bn;
  /// Replaces f1 and f2 by the identity (test configuration).
  bool identity_maps = false;

  RoundParameters(ParamRegistry& reg, const std::string& name, int dim, int hidden, Rng& rng);
};

// ---------------------------------------------------------------- batched ops

/// [B, C, H, W] -> [B, C], mean over all spatial locations.
ag::Var pool_visual(const ag::Var& v);

/// 1 - min(sum of previous alphas, 1); all-ones for the first round. [B, Nmax].
ag::Var compute_history(const std::vector<ag::Var>& previous_alphas, int batch, int max_len);

/// Word attention conditioned on the pooled visual feature and the history.
/// Throws NumericError on non-finite inputs.
ag::Var subquery_attention(const ag::Var& S, const ag::Var& vbar, const ag::Var& history,
                           const std::vector<int>& lengths, const AttentionScorer& scorer);

/// Text-only variant of the scorer (no visual or history input).
ag::Var text_attention(const ag::Var& S, const std::vector<int>& lengths,
                       const AttentionScorer& scorer);

/// Softmax over the first lengths[b] entries of each row; padding gets 0.
ag::Var masked_softmax(const ag::Var& scores, const std::vector<int>& lengths);

/// q = sum_n alpha_n s_n. [B, C].
ag::Var subquery_embed(const ag::Var& S, const ag::Var& alpha);

struct Modulation {
  ag::Var gamma;  // [B, C]
  ag::Var beta;   // [B, C]
};
Modulation modulation_params(const ag::Var& q, const RoundParameters& p);

ag::Var modulate(const ag::Var& v_prev, const Modulation& mods, RoundParameters& p, bool training);

struct RoundRecord {
  ag::Var alpha;    // [B, Nmax], null for attention-free strategies
  ag::Var history;  // [B, Nmax], null unless recursive
  ag::Var q;        // [B, C]
  ag::Var gamma;
  ag::Var beta;
  ag::Var v;        // [B, C, H, W]
};

struct RoundsResult {
  ag::Var v;
  std::vector<RoundRecord> trace;
};

/// K recursive rounds; `params` holds K entries (possibly aliasing one set).
RoundsResult run_rounds(const ag::Var& S, const std::vector<int>& lengths, const ag::Var& v0,
                        std::span<RoundParameters* const> params, int rounds, bool training);

/// || (A^T A) . (1 - I) ||_F^2 per sample, A = [alpha(1) ... alpha(K)]. [B].
ag::Var reg_diversity(const std::vector<ag::Var>& alphas, const std::vector<int>& lengths);
/// || 1 - min(sum_k alpha(k), 1) ||_1 over valid words, per sample. [B].
ag::Var reg_coverage(const std::vector<ag::Var>& alphas, const std::vector<int>& lengths);

/// Mean of the valid word rows. [B, C].
ag::Var mean_words(const ag::Var& S, const std::vector<int>& lengths);
/// Row `index` of each sample, zero where index >= lengths[b]. [B, C].
ag::Var word_at(const ag::Var& S, const std::vector<int>& lengths, int index);

struct SubqueryResult {
  std::vector<ag::Var> queries;   // one [B, C] per round
  std::vector<ag::Var> alphas;    // distinct attention vectors, regularized
  std::vector<ag::Var> round_alphas;  // attention shown for each round (may repeat)
  std::optional<RoundsResult> rounds;  // set for the recursive strategy
};

/// Sub-queries of the ablation strategies. average_vector and single_head
/// repeat one vector K times; per_word yields max_len rounds; multi_head uses
/// K independent text-only scorers; recursive delegates to run_rounds.
SubqueryResult variant_subqueries(const ag::Var& S, const std::vector<int>& lengths,
                                  const ag::Var& v0, Strategy strategy,
                                  std::span<RoundParameters* const> round_params,
                                  std::span<const AttentionScorer> scorers, int rounds,
                                  bool training);

// ---------------------------------------------------------------- plain helpers

/// Single-sample history from a list of equally long alpha vectors.
std::vector<double> compute_history(const std::vector<std::vector<double>>& previous_alphas,
                                    int length);
/// A is [N, K] with one attention column per round.
double reg_diversity(const Tensor& A);
double reg_coverage(const Tensor& A);

}  // namespace resq::core
