#pragma once

// Full grounding network: encoders, query-modeling strategy, modulation
// rounds, optional ConvLSTM, anchor head.

#include <memory>
#include <span>
#include <vector>

#include "resq/core.hpp"
#include "resq/datagen.hpp"
#include "resq/encoders.hpp"
#include "resq/grounding.hpp"

namespace resq {

struct Batch {
  ag::Var images;  // [B, 3, H, W]
  enc::QueryBatch queries;
  std::vector<data::Box> boxes;
  std::vector<grounding::TargetAssignment> targets;
  std::vector<const data::GroundingSample*> samples;

  int size() const { return queries.batch(); }
};

struct ForwardResult {
  ag::Var head_out;                 // [B, 45, H_f, W_f]
  ag::Var v0;
  std::vector<core::RoundRecord> rounds;  // one per applied round
  std::vector<ag::Var> reg_alphas;  // distinct attention vectors
  ag::Var div;                      // [B] or null
  ag::Var cover;                    // [B] or null
};

class GroundingModel {
 public:
  GroundingModel(const ModelConfig& cfg, enc::TokenVocabulary vocab, grounding::AnchorSet anchors,
                 std::uint64_t seed);
  GroundingModel(const GroundingModel&) = delete;
  GroundingModel& operator=(const GroundingModel&) = delete;

  ForwardResult forward(const Batch& batch, bool training);

  /// Builds a batch; targets are assigned from the anchors.
  Batch make_batch(std::span<const data::GroundingSample* const> samples) const;

  const ModelConfig& config() const { return cfg_; }
  const enc::TokenVocabulary& vocab() const { return vocab_; }
  const grounding::AnchorSet& anchors() const { return anchors_; }
  ParamRegistry& registry() { return reg_; }
  const ParamRegistry& registry() const { return reg_; }
  const grounding::GroundingHead& head() const { return head_; }
  int stride() const { return image_->stride(); }
  int grid_size() const { return cfg_.feature_size(); }

 private:
  ModelConfig cfg_;
  enc::TokenVocabulary vocab_;
  grounding::AnchorSet anchors_;
  ParamRegistry reg_;
  std::unique_ptr<enc::TextEncoder> text_;
  std::unique_ptr<enc::ImageEncoder> image_;
  std::vector<std::unique_ptr<core::RoundParameters>> round_params_;
  std::vector<core::AttentionScorer> scorers_;
  grounding::GroundingHead head_;
  std::unique_ptr<grounding::ConvLSTM> convlstm_;

  std::vector<core::RoundParameters*> round_pointers(int rounds) const;
};

}  // namespace resq
