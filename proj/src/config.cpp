#include "resq/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "resq/errors.hpp"

using nlohmann::json;

namespace resq {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::average_vector: return "average_vector";
    case Strategy::per_word: return "per_word";
    case Strategy::single_head: return "single_head";
    case Strategy::multi_head: return "multi_head";
    case Strategy::recursive: return "recursive";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  for (auto s : {Strategy::average_vector, Strategy::per_word, Strategy::single_head,
                 Strategy::multi_head, Strategy::recursive}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown strategy '" + name + "'");
}

int ModelConfig::stride() const {
  int s = 1;
  for (int v : backbone_strides) s *= v;
  return s;
}

void ModelConfig::validate() const {
  if (backbone_channels.empty() || backbone_channels.size() != backbone_strides.size()) {
    throw ConfigError("backbone_channels and backbone_strides must be non-empty and equally long");
  }
  for (int v : backbone_channels)
    if (v <= 0) throw ConfigError("backbone channels must be positive");
  for (int v : backbone_strides)
    if (v <= 0) throw ConfigError("backbone strides must be positive");
  if (image_size <= 0 || image_size % stride() != 0) {
    throw ConfigError("image size " + std::to_string(image_size) +
                      " is not divisible by the total stride " + std::to_string(stride()));
  }
  if (embed_dim <= 0 || dim <= 0) throw ConfigError("embed_dim and dim must be positive");
  if (rounds < 1) throw ConfigError("rounds must be >= 1");
  if (max_query_len < 1) throw ConfigError("max_query_len must be >= 1");
}

double TrainConfig::learning_rate_at(int epoch) const {
  return learning_rate * std::pow(lr_decay, epoch / decay_every);
}

void TrainConfig::validate() const {
  model.validate();
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (!(lr_decay > 0)) throw ConfigError("lr_decay must be positive");
  if (decay_every < 1) throw ConfigError("decay_every must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (max_steps < 0 || train_subset < 0) throw ConfigError("max_steps/train_subset must be >= 0");
  if (reg_weight < 0 || coord_weight < 0) throw ConfigError("loss weights must be >= 0");
}

json to_json(const ModelConfig& c) {
  return json{{"image_size", c.image_size},
              {"backbone_channels", c.backbone_channels},
              {"backbone_strides", c.backbone_strides},
              {"embed_dim", c.embed_dim},
              {"dim", c.dim},
              {"attn_hidden", c.attn_hidden},
              {"head_hidden", c.head_hidden},
              {"rounds", c.rounds},
              {"strategy", to_string(c.strategy)},
              {"share_round_weights", c.share_round_weights},
              {"convlstm", c.convlstm},
              {"max_query_len", c.max_query_len}};
}

json to_json(const TrainConfig& c) {
  return json{{"model", to_json(c.model)},
              {"data_dir", c.data_dir},
              {"out_dir", c.out_dir},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"lr_decay", c.lr_decay},
              {"decay_every", c.decay_every},
              {"epochs", c.epochs},
              {"max_steps", c.max_steps},
              {"train_subset", c.train_subset},
              {"reg_weight", c.reg_weight},
              {"coord_weight", c.coord_weight},
              {"regression", c.regression == RegressionLoss::mse ? "mse" : "smooth_l1"},
              {"rmsprop_alpha", c.rmsprop_alpha},
              {"rmsprop_eps", c.rmsprop_eps},
              {"seed", c.seed},
              {"checkpoint_every_epoch", c.checkpoint_every_epoch},
              {"log_every", c.log_every}};
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) {
      throw ConfigError(std::string("unknown key '") + it.key() + "' in " + where);
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace

ModelConfig model_config_from_json(const json& j) {
  reject_unknown(j,
                 {"image_size", "backbone_channels", "backbone_strides", "embed_dim", "dim",
                  "attn_hidden", "head_hidden", "rounds", "strategy", "share_round_weights",
                  "convlstm", "max_query_len"},
                 "model config");
  ModelConfig c;
  read(j, "image_size", c.image_size);
  read(j, "backbone_channels", c.backbone_channels);
  read(j, "backbone_strides", c.backbone_strides);
  read(j, "embed_dim", c.embed_dim);
  read(j, "dim", c.dim);
  read(j, "attn_hidden", c.attn_hidden);
  read(j, "head_hidden", c.head_hidden);
  read(j, "rounds", c.rounds);
  std::string strategy = to_string(c.strategy);
  read(j, "strategy", strategy);
  c.strategy = parse_strategy(strategy);
  read(j, "share_round_weights", c.share_round_weights);
  read(j, "convlstm", c.convlstm);
  read(j, "max_query_len", c.max_query_len);
  c.validate();
  return c;
}

TrainConfig train_config_from_json(const json& j) {
  reject_unknown(j,
                 {"model", "data_dir", "out_dir", "batch_size", "learning_rate", "lr_decay",
                  "decay_every", "epochs", "max_steps", "train_subset", "reg_weight",
                  "coord_weight", "regression", "rmsprop_alpha", "rmsprop_eps", "seed",
                  "checkpoint_every_epoch", "log_every"},
                 "train config");
  TrainConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  read(j, "data_dir", c.data_dir);
  read(j, "out_dir", c.out_dir);
  read(j, "batch_size", c.batch_size);
  read(j, "learning_rate", c.learning_rate);
  read(j, "lr_decay", c.lr_decay);
  read(j, "decay_every", c.decay_every);
  read(j, "epochs", c.epochs);
  read(j, "max_steps", c.max_steps);
  read(j, "train_subset", c.train_subset);
  read(j, "reg_weight", c.reg_weight);
  read(j, "coord_weight", c.coord_weight);
  std::string regression = "mse";
  read(j, "regression", regression);
  if (regression == "mse") {
    c.regression = RegressionLoss::mse;
  } else if (regression == "smooth_l1") {
    c.regression = RegressionLoss::smooth_l1;
  } else {
    throw ConfigError("unknown regression loss '" + regression + "'");
  }
  read(j, "rmsprop_alpha", c.rmsprop_alpha);
  read(j, "rmsprop_eps", c.rmsprop_eps);
  read(j, "seed", c.seed);
  read(j, "checkpoint_every_epoch", c.checkpoint_every_epoch);
  read(j, "log_every", c.log_every);
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse config " + path + ": " + e.what());
  }
  return train_config_from_json(j);
}

}  // namespace resq
