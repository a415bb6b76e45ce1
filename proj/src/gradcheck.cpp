#include <cmath>

#include "resq/errors.hpp"
#include "resq/harness.hpp"

namespace resq {

using json = nlohmann::ordered_json;

TrainConfig tiny_config(Strategy strategy, bool convlstm) {
  TrainConfig c;
  c.model.image_size = 16;
  c.model.backbone_channels = {4, 4, 4, 4};
  c.model.backbone_strides = {2, 2, 2, 1};
  c.model.embed_dim = 4;
  c.model.dim = 4;
  c.model.attn_hidden = 3;
  c.model.head_hidden = 3;
  c.model.rounds = 3;
  c.model.strategy = strategy;
  c.model.convlstm = convlstm;
  c.batch_size = 2;
  return c;
}

namespace {

std::vector<data::GroundingSample> random_samples(const TrainConfig& cfg, Rng& rng) {
  const auto words = data::vocabulary_words();
  const int S = cfg.model.image_size;
  std::vector<data::GroundingSample> out;
  const int lengths[] = {4, 5};
  for (int b = 0; b < cfg.batch_size; ++b) {
    data::GroundingSample s;
    s.id = "gradcheck_" + std::to_string(b);
    s.image.height = s.image.width = S;
    s.image.rgb.resize(static_cast<std::size_t>(S) * S * 3);
    for (auto& v : s.image.rgb) v = rng.uniform();
    const int n = std::min(lengths[b % 2], cfg.model.max_query_len);
    for (int i = 0; i < n; ++i) s.tokens.push_back(words[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(words.size()) - 1))]);
    const double w = rng.uniform(2.0, S / 2.0), h = rng.uniform(2.0, S / 2.0);
    s.bbox = {rng.uniform(0.0, S - w), rng.uniform(0.0, S - h), w, h};
    s.meta.query_length = n;
    out.push_back(std::move(s));
  }
  return out;
}

grounding::AnchorSet tiny_anchors(int image_size) {
  grounding::AnchorSet a;
  const double base = image_size / 8.0;
  for (int i = 0; i < grounding::kNumAnchors; ++i) a.push_back({base * (1 + i % 3), base * (1 + i / 3)});
  return a;
}

bool selected(const std::string& name, const std::vector<std::string>& include) {
  if (include.empty()) return true;
  for (const auto& p : include)
    if (name.compare(0, p.size(), p) == 0) return true;
  return false;
}

}  // namespace

GradcheckReport gradcheck(const TrainConfig& cfg, const GradcheckOptions& opt) {
  cfg.validate();
  Rng rng(mix_seed(opt.seed, 0x67c));
  const auto samples = random_samples(cfg, rng);
  GroundingModel model(cfg.model, enc::TokenVocabulary::synthetic(), tiny_anchors(cfg.model.image_size), opt.seed);
  std::vector<const data::GroundingSample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  const Batch batch = model.make_batch(ptrs);
  const grounding::LossOptions loss_opt{cfg.coord_weight, cfg.reg_weight, cfg.regression};

  auto loss_value = [&]() {
    ag::NoGradGuard guard;
    auto fwd = model.forward(batch, true);
    return grounding::loss_total(fwd.head_out, batch.targets, fwd.div, fwd.cover, loss_opt, nullptr)->value[0];
  };

  ParamRegistry& reg = model.registry();
  reg.zero_grad();
  {
    auto fwd = model.forward(batch, true);
    auto loss = grounding::loss_total(fwd.head_out, batch.targets, fwd.div, fwd.cover, loss_opt, nullptr);
    ag::backward(loss);
  }
  if (opt.corrupt) opt.corrupt(reg);

  GradcheckReport report;
  report.threshold = opt.threshold;
  for (const auto& p : reg.params()) {
    if (!selected(p.name, opt.include)) continue;
    GradcheckEntry e;
    e.name = p.name;
    Tensor& value = p.var->value;
    const Tensor& grad = p.var->grad_buffer();
    const std::size_t n = value.size();
    const std::size_t count = opt.max_elements > 0 ? std::min<std::size_t>(n, opt.max_elements) : n;
    for (std::size_t c = 0; c < count; ++c) {
      const std::size_t i = count == n ? c : c * n / count;
      const double orig = value[i];
      const double analytic = grad[i];
      auto at = [&](double delta) {
        value[i] = orig + delta;
        return loss_value();
      };
      // A kink of ReLU or min(., 1) closer than the step spoils the stencil;
      // retry with smaller steps before reporting a mismatch.
      double rel = 0.0;
      double h = opt.step;
      for (int attempt = 0; attempt < std::max(1, opt.step_attempts); ++attempt, h *= 0.1) {
        const double numeric = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
        const double denom = std::max({std::abs(numeric), std::abs(analytic), opt.scale_floor});
        const double r = std::abs(numeric - analytic) / denom;
        rel = attempt == 0 ? r : std::min(rel, r);
        if (rel < opt.threshold) break;
      }
      value[i] = orig;
      e.max_rel_error = std::max(e.max_rel_error, std::isfinite(rel) ? rel : 1e300);
      ++e.checked;
    }
    e.pass = e.max_rel_error < opt.threshold;
    report.pass = report.pass && e.pass;
    report.entries.push_back(std::move(e));
  }
  return report;
}

json to_json(const GradcheckReport& r) {
  json entries = json::array();
  for (const auto& e : r.entries) {
    entries.push_back({{"name", e.name}, {"checked", e.checked}, {"max_rel_error", e.max_rel_error}, {"pass", e.pass}});
  }
  return {{"pass", r.pass}, {"threshold", r.threshold}, {"entries", entries}};
}

}  // namespace resq
