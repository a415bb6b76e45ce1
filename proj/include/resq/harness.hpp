#pragma once

// Training, evaluation, checkpoints, ablation sweeps and gradient checks.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "resq/model.hpp"

namespace resq {

// ---------------------------------------------------------------- optimizer

/// RMSProp: s = alpha s + (1 - alpha) g^2; p -= lr g / (sqrt(s) + eps).
class RmsProp {
 public:
  RmsProp(const ParamRegistry& reg, double alpha, double eps);

  void step(double lr);
  std::vector<Tensor>& state() { return square_avg_; }
  const std::vector<Tensor>& state() const { return square_avg_; }

 private:
  std::vector<ag::Var> params_;
  std::vector<Tensor> square_avg_;
  double alpha_;
  double eps_;
};

// ---------------------------------------------------------------- checkpoints

constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig config;
  enc::TokenVocabulary vocab;
  grounding::AnchorSet anchors;
  std::uint64_t model_seed = 0;
  int epoch = 0;
  int step = 0;
};

/// Binary container: magic, version, JSON header, raw little-endian doubles
/// for parameters, buffers and optimizer state, trailing FNV-1a checksum.
void save_checkpoint(const std::string& path, const Checkpoint& meta, const GroundingModel& model,
                     const RmsProp* optimizer);

/// Reads the header only.
Checkpoint read_checkpoint_header(const std::string& path);

/// Restores parameters (and optimizer state when given). Throws VersionError,
/// IntegrityError or ShapeMismatchError.
Checkpoint load_checkpoint(const std::string& path, GroundingModel& model, RmsProp* optimizer);

/// Constructs a model matching the checkpoint and loads it.
std::unique_ptr<GroundingModel> load_model(const std::string& path, Checkpoint* meta = nullptr);

// ---------------------------------------------------------------- training

struct StepLog {
  int epoch = 0;
  int step = 0;
  double lr = 0;
  grounding::LossComponents loss;
};

struct TrainResult {
  std::vector<StepLog> curve;
  std::string last_checkpoint;
  Checkpoint meta;
};

/// Anchors from the training boxes (seeded).
grounding::AnchorSet anchors_for(const std::vector<data::GroundingSample>& train, std::uint64_t seed);

/// Trains `model` in place. Throws NumericError on a non-finite loss after
/// writing a diagnostic dump of the batch (into out_dir, or the working
/// directory when out_dir is empty).
TrainResult train_model(GroundingModel& model, const TrainConfig& cfg,
                        const std::vector<data::GroundingSample>& train,
                        const std::function<void(const StepLog&)>& on_step = {});

struct TrainedModel {
  std::unique_ptr<GroundingModel> model;
  TrainResult result;
};

/// Reads <data_dir>/train.jsonl, computes anchors, builds and trains a model.
TrainedModel train(const TrainConfig& cfg, const std::function<void(const StepLog&)>& on_step = {});
TrainedModel train(const TrainConfig& cfg, const std::vector<data::GroundingSample>& train,
                   const std::function<void(const StepLog&)>& on_step = {});

// ---------------------------------------------------------------- evaluation

struct PredictionRecord {
  std::string sample_id;
  data::Box predicted_box;
  double confidence = 0;
  data::Box gt_box;
  double iou = 0;
  int query_length = 0;
  std::vector<std::string> attribute_tags;
  std::optional<double> coverage;  // L_cover of the sample's attention, if any
};

struct BinStat {
  std::string name;
  int count = 0;
  int correct = 0;
  /// null when the bin is empty
  std::optional<double> accuracy;
};

struct EvalReport {
  double accuracy = 0;
  int count = 0;
  std::vector<BinStat> length_bins;
  std::vector<BinStat> attribute_bins;
  std::optional<double> mean_coverage;
};

constexpr double kIouThreshold = 0.5;

/// Length bin labels, "1-2", "3", "4-5", "6+".
const std::vector<std::string>& length_bin_names();
int length_bin_of(int query_length);

std::vector<PredictionRecord> predict(GroundingModel& model,
                                      const std::vector<data::GroundingSample>& samples,
                                      int batch_size = 32);
/// Predictions carry attribute tags recomputed from the query tokens, not
/// the manifest meta.
EvalReport make_report(const std::vector<PredictionRecord>& preds);
EvalReport evaluate(GroundingModel& model, const std::vector<data::GroundingSample>& samples,
                    std::vector<PredictionRecord>* predictions = nullptr);

void write_predictions(const std::vector<PredictionRecord>& preds, const std::string& path);
std::vector<PredictionRecord> read_predictions(const std::string& path);

nlohmann::ordered_json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);

struct RelativeGain {
  std::optional<double> overall;
  std::vector<std::pair<std::string, std::optional<double>>> bins;
};

/// (ours - base) / base per length bin; empty optional when base is 0 or
/// either bin is empty.
RelativeGain relative_gain(const EvalReport& ours, const EvalReport& base);
std::optional<double> relative_gain(double ours, double base);

// ---------------------------------------------------------------- ablation

struct SweepEntry {
  std::string name;
  TrainConfig config;
};

struct Sweep {
  std::vector<SweepEntry> entries;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string data_dir;
  std::string eval_split = "test";
};

/// JSON: {"data_dir", "seeds", "eval_split", "base": {...}, "configs": [{"name", ...overrides}]}.
Sweep load_sweep(const std::string& path);
Sweep sweep_from_json(const nlohmann::json& j);

struct SeedRun {
  std::uint64_t seed = 0;
  std::optional<EvalReport> report;
  std::string error;
};

struct AblationRow {
  std::string name;
  TrainConfig config;
  std::vector<SeedRun> runs;
  std::optional<double> mean;
  std::optional<double> stddev;  // sample standard deviation
  std::vector<std::pair<std::string, std::optional<double>>> bin_means;
  std::optional<double> mean_coverage;
};

struct AblationTable {
  std::vector<AblationRow> rows;
};

/// Trains every entry for every seed and evaluates it; failures are
/// recorded per run and do not stop the sweep. `runner` substitutes the
/// train+evaluate step (used by tests).
using SweepRunner = std::function<EvalReport(const TrainConfig&, std::uint64_t seed)>;
AblationTable ablate(const Sweep& sweep, const SweepRunner& runner = {},
                     const std::function<void(const std::string&)>& log = {});
void summarize_row(AblationRow& row);

nlohmann::ordered_json to_json(const AblationTable& t);
AblationTable ablation_table_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------- gradient check

struct GradcheckEntry {
  std::string name;
  int checked = 0;
  double max_rel_error = 0;
  bool pass = true;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  bool pass = true;
  double threshold = 1e-4;
};

/// Numeric derivatives use the fourth-order central stencil. The relative
/// error is |a - n| / max(|a|, |n|, scale_floor); the floor keeps rounding
/// noise on near-zero gradients from dominating.
struct GradcheckOptions {
  double step = 1e-5;
  double threshold = 1e-4;
  double scale_floor = 1e-5;
  /// Step sizes tried per element (step, step/10, ...) until one agrees.
  int step_attempts = 3;
  /// Elements checked per parameter tensor (evenly spaced; 0 = all).
  int max_elements = 0;
  /// Parameter-name prefixes to check; empty = all.
  std::vector<std::string> include;
  /// Test hook: called after backward to tamper with analytic gradients.
  std::function<void(ParamRegistry&)> corrupt;
  std::uint64_t seed = 0;
};

/// Tiny model configuration used by the gradient check.
TrainConfig tiny_config(Strategy strategy = Strategy::recursive, bool convlstm = false);

/// Central differences on loss_total for a small random batch.
GradcheckReport gradcheck(const TrainConfig& cfg, const GradcheckOptions& opt = {});

nlohmann::ordered_json to_json(const GradcheckReport& r);

}  // namespace resq
