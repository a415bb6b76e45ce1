#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace resq {

/// Query-modeling strategy feeding the modulation rounds.
enum class Strategy { average_vector, per_word, single_head, multi_head, recursive };

std::string to_string(Strategy s);
/// Throws ConfigError for unknown names.
Strategy parse_strategy(const std::string& name);

enum class RegressionLoss { mse, smooth_l1 };

struct ModelConfig {
  int image_size = 64;
  std::vector<int> backbone_channels{16, 32, 64, 64};
  std::vector<int> backbone_strides{2, 2, 2, 1};
  int embed_dim = 64;
  int dim = 64;          // shared feature dimension C
  int attn_hidden = 0;   // 0 means dim / 2
  int head_hidden = 0;   // 0 means dim / 2
  int rounds = 3;        // K
  Strategy strategy = Strategy::recursive;
  bool share_round_weights = false;
  bool convlstm = false;
  int max_query_len = 16;

  int stride() const;
  int feature_size() const { return image_size / stride(); }
  int attention_hidden() const { return attn_hidden > 0 ? attn_hidden : std::max(1, dim / 2); }
  int grounding_hidden() const { return head_hidden > 0 ? head_hidden : std::max(1, dim / 2); }
  /// Throws ConfigError when inconsistent.
  void validate() const;
};

struct TrainConfig {
  ModelConfig model;
  std::string data_dir;
  std::string out_dir;         // checkpoints and curves; empty disables writing
  int batch_size = 8;
  double learning_rate = 1e-4;
  double lr_decay = 0.5;
  int decay_every = 10;        // epochs
  int epochs = 40;
  int max_steps = 0;           // 0 means unlimited
  int train_subset = 0;        // 0 means the full training split
  double reg_weight = 1.0;     // lambda for L_div and L_cover
  double coord_weight = 1.0;
  RegressionLoss regression = RegressionLoss::mse;
  double rmsprop_alpha = 0.99;
  double rmsprop_eps = 1e-8;
  std::uint64_t seed = 0;
  bool checkpoint_every_epoch = true;
  int log_every = 0;           // steps; 0 disables progress logging

  /// Step size at a given (0-based) epoch.
  double learning_rate_at(int epoch) const;
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep their defaults; unknown keys raise ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::string& path);

}  // namespace resq
