#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "resq/errors.hpp"
#include "resq/harness.hpp"

namespace fs = std::filesystem;

namespace resq {

using json = nlohmann::ordered_json;

RmsProp::RmsProp(const ParamRegistry& reg, double alpha, double eps) : alpha_(alpha), eps_(eps) {
  for (const auto& p : reg.params()) {
    params_.push_back(p.var);
    square_avg_.emplace_back(p.var->value.shape, 0.0);
  }
}

void RmsProp::step(double lr) {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    if (p.grad.size() != p.value.size()) continue;
    Tensor& s = square_avg_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      s[i] = alpha_ * s[i] + (1.0 - alpha_) * g * g;
      p.value[i] -= lr * g / (std::sqrt(s[i]) + eps_);
    }
  }
}

grounding::AnchorSet anchors_for(const std::vector<data::GroundingSample>& train, std::uint64_t seed) {
  std::vector<data::Box> boxes;
  boxes.reserve(train.size());
  for (const auto& s : train) boxes.push_back(s.bbox);
  return grounding::compute_anchors(boxes, seed);
}

namespace {

void write_nan_dump(const TrainConfig& cfg, const StepLog& log, const Batch& batch) {
  json dump;
  dump["epoch"] = log.epoch;
  dump["step"] = log.step;
  dump["learning_rate"] = log.lr;
  dump["loss"] = {{"total", log.loss.total}, {"cls", log.loss.cls}, {"reg", log.loss.reg},
                  {"div", log.loss.div}, {"cover", log.loss.cover}};
  json samples = json::array();
  for (const auto* s : batch.samples) {
    samples.push_back({{"id", s->id},
                       {"tokens", s->tokens},
                       {"bbox", {s->bbox.x, s->bbox.y, s->bbox.w, s->bbox.h}}});
  }
  dump["batch"] = samples;
  const fs::path dir = cfg.out_dir.empty() ? fs::current_path() : fs::path(cfg.out_dir);
  fs::create_directories(dir);
  std::ofstream out(dir / "nan_dump.json");
  out << dump.dump(2) << '\n';
}

json step_json(const StepLog& s) {
  return {{"epoch", s.epoch}, {"step", s.step}, {"lr", s.lr}, {"total", s.loss.total},
          {"cls", s.loss.cls}, {"reg", s.loss.reg}, {"div", s.loss.div}, {"cover", s.loss.cover}};
}

}  // namespace

TrainResult train_model(GroundingModel& model, const TrainConfig& cfg,
                        const std::vector<data::GroundingSample>& train,
                        const std::function<void(const StepLog&)>& on_step) {
  cfg.validate();
  if (train.empty()) throw ConfigError("empty training set");
  std::vector<const data::GroundingSample*> pool;
  const std::size_t n = cfg.train_subset > 0 ? std::min<std::size_t>(train.size(), cfg.train_subset)
                                              : train.size();
  for (std::size_t i = 0; i < n; ++i) pool.push_back(&train[i]);

  RmsProp opt(model.registry(), cfg.rmsprop_alpha, cfg.rmsprop_eps);
  Rng order(mix_seed(cfg.seed, 0x5eed));
  const grounding::LossOptions loss_opt{cfg.coord_weight, cfg.reg_weight, cfg.regression};

  TrainResult result;
  result.meta.config = cfg;
  result.meta.vocab = model.vocab();
  result.meta.anchors = model.anchors();
  result.meta.model_seed = cfg.seed;
  if (!cfg.out_dir.empty()) fs::create_directories(cfg.out_dir);
  std::ofstream curve;
  if (!cfg.out_dir.empty()) curve.open(fs::path(cfg.out_dir) / "loss_curve.jsonl");

  int step = 0;
  bool done = false;
  for (int epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    const double lr = cfg.learning_rate_at(epoch);
    order.shuffle(pool);
    for (std::size_t start = 0; start < pool.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(pool.size(), start + cfg.batch_size);
      std::vector<const data::GroundingSample*> members(pool.begin() + static_cast<std::ptrdiff_t>(start),
                                                        pool.begin() + static_cast<std::ptrdiff_t>(end));
      const Batch batch = model.make_batch(members);
      model.registry().zero_grad();
      auto fwd = model.forward(batch, true);
      StepLog log{epoch, step, lr, {}};
      auto loss = grounding::loss_total(fwd.head_out, batch.targets, fwd.div, fwd.cover, loss_opt, &log.loss);
      if (!std::isfinite(log.loss.total) || !std::isfinite(log.loss.div) || !std::isfinite(log.loss.cover)) {
        write_nan_dump(cfg, log, batch);
        throw NumericError("non-finite loss at step " + std::to_string(step));
      }
      ag::backward(loss);
      opt.step(lr);
      result.curve.push_back(log);
      if (curve.is_open()) curve << step_json(log).dump() << '\n';
      if (on_step) on_step(log);
      ++step;
      if (cfg.max_steps > 0 && step >= cfg.max_steps) {
        done = true;
        break;
      }
    }
    result.meta.epoch = epoch + 1;
    result.meta.step = step;
    if (!cfg.out_dir.empty() && cfg.checkpoint_every_epoch) {
      result.last_checkpoint = (fs::path(cfg.out_dir) / "model.ckpt").string();
      save_checkpoint(result.last_checkpoint, result.meta, model, &opt);
    }
  }
  if (!cfg.out_dir.empty() && !cfg.checkpoint_every_epoch) {
    result.last_checkpoint = (fs::path(cfg.out_dir) / "model.ckpt").string();
    save_checkpoint(result.last_checkpoint, result.meta, model, &opt);
  }
  return result;
}

TrainedModel train(const TrainConfig& cfg, const std::vector<data::GroundingSample>& samples,
                   const std::function<void(const StepLog&)>& on_step) {
  TrainedModel t;
  t.model = std::make_unique<GroundingModel>(cfg.model, enc::TokenVocabulary::synthetic(),
                                             anchors_for(samples, cfg.seed), cfg.seed);
  t.result = train_model(*t.model, cfg, samples, on_step);
  return t;
}

TrainedModel train(const TrainConfig& cfg, const std::function<void(const StepLog&)>& on_step) {
  if (cfg.data_dir.empty()) throw ConfigError("data_dir is not set");
  const auto samples = data::read_dataset((fs::path(cfg.data_dir) / "train.jsonl").string());
  return train(cfg, samples, on_step);
}

}  // namespace resq
