#include "resq/model.hpp"

#include "resq/errors.hpp"

namespace resq {

using ag::Var;

GroundingModel::GroundingModel(const ModelConfig& cfg, enc::TokenVocabulary vocab,
                               grounding::AnchorSet anchors, std::uint64_t seed)
    : cfg_(cfg), vocab_(std::move(vocab)), anchors_(std::move(anchors)) {
  cfg_.validate();
  if (static_cast<int>(anchors_.size()) != grounding::kNumAnchors) {
    throw ConfigError("model needs exactly 9 anchors");
  }
  Rng rng(seed);
  const int C = cfg_.dim;
  text_ = std::make_unique<enc::TextEncoder>(reg_, vocab_.size(), cfg_.embed_dim, C, rng);
  image_ = std::make_unique<enc::ImageEncoder>(reg_, cfg_, rng);

  const bool single_set = cfg_.share_round_weights || cfg_.strategy == Strategy::per_word;
  const int sets = single_set ? 1 : cfg_.rounds;
  for (int k = 0; k < sets; ++k) {
    round_params_.push_back(std::make_unique<core::RoundParameters>(
        reg_, "round" + std::to_string(k), C, cfg_.attention_hidden(), rng));
  }
  if (cfg_.strategy == Strategy::single_head) {
    scorers_.emplace_back(reg_, "scorer0", C, cfg_.attention_hidden(), rng);
  } else if (cfg_.strategy == Strategy::multi_head) {
    for (int k = 0; k < cfg_.rounds; ++k)
      scorers_.emplace_back(reg_, "scorer" + std::to_string(k), C, cfg_.attention_hidden(), rng);
  }
  if (cfg_.convlstm) convlstm_ = std::make_unique<grounding::ConvLSTM>(reg_, "convlstm", C, rng);
  head_ = grounding::GroundingHead(reg_, "head", C, cfg_.grounding_hidden(), rng);
}

std::vector<core::RoundParameters*> GroundingModel::round_pointers(int rounds) const {
  std::vector<core::RoundParameters*> ptrs;
  for (int k = 0; k < rounds; ++k)
    ptrs.push_back(round_params_[round_params_.size() == 1 ? 0 : static_cast<std::size_t>(k)].get());
  return ptrs;
}

Batch GroundingModel::make_batch(std::span<const data::GroundingSample* const> samples) const {
  Batch b;
  std::vector<const Image*> images;
  std::vector<std::vector<std::string>> tokens;
  const int G = grid_size();
  for (const auto* s : samples) {
    images.push_back(&s->image);
    tokens.push_back(s->tokens);
    b.boxes.push_back(s->bbox);
    b.targets.push_back(grounding::assign_anchor(s->bbox, anchors_, stride(), G, G));
    b.samples.push_back(s);
  }
  b.images = ag::constant(enc::images_to_tensor(images));
  b.queries = enc::make_query_batch(vocab_, tokens);
  if (b.queries.max_len > cfg_.max_query_len) {
    throw EncodingError("query longer than max_query_len (" + std::to_string(b.queries.max_len) + ")");
  }
  return b;
}

ForwardResult GroundingModel::forward(const Batch& batch, bool training) {
  ForwardResult r;
  const auto& lengths = batch.queries.lengths;
  Var S = text_->forward(batch.queries);
  r.v0 = image_->forward(batch.images, training);

  const int K = cfg_.strategy == Strategy::per_word ? batch.queries.max_len : cfg_.rounds;
  const auto ptrs = round_pointers(K);
  core::SubqueryResult sub = core::variant_subqueries(S, lengths, r.v0, cfg_.strategy, ptrs,
                                                      scorers_, K, training);
  Var v = r.v0;
  if (sub.rounds) {
    r.rounds = sub.rounds->trace;
    v = sub.rounds->v;
  } else {
    const int B = batch.size();
    for (int k = 0; k < K; ++k) {
      core::RoundRecord rec;
      rec.q = sub.queries[static_cast<std::size_t>(k)];
      if (!sub.round_alphas.empty()) rec.alpha = sub.round_alphas[static_cast<std::size_t>(k)];
      const core::Modulation mods = core::modulation_params(rec.q, *ptrs[k]);
      rec.gamma = mods.gamma;
      rec.beta = mods.beta;
      Var next = core::modulate(v, mods, *ptrs[k], training);
      if (cfg_.strategy == Strategy::per_word) {
        std::vector<char> active(static_cast<std::size_t>(B));
        bool all = true;
        for (int b = 0; b < B; ++b) {
          active[b] = k < lengths[b];
          all = all && active[b];
        }
        if (!all) next = ag::select_batch(active, next, v);
      }
      rec.v = v = next;
      r.rounds.push_back(rec);
    }
  }
  if (convlstm_) {
    std::vector<Var> seq;
    for (const auto& rec : r.rounds) seq.push_back(rec.v);
    v = convlstm_->aggregate(seq);
  }
  r.head_out = head_(v);
  r.reg_alphas = sub.alphas;
  if (!r.reg_alphas.empty()) {
    r.div = core::reg_diversity(r.reg_alphas, lengths);
    r.cover = core::reg_coverage(r.reg_alphas, lengths);
  }
  return r;
}

}  // namespace resq
