#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "resq/errors.hpp"
#include "resq/harness.hpp"

using namespace resq;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("resq_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const std::vector<data::GroundingSample>& small_set() {
  static const auto samples = data::generate_split("train", 64, 11, {});
  return samples;
}

TrainConfig small_config() {
  TrainConfig c;
  c.model.dim = 16;
  c.model.embed_dim = 16;
  c.model.backbone_channels = {8, 16, 16, 16};
  c.batch_size = 8;
  return c;
}

std::unique_ptr<GroundingModel> small_model(const TrainConfig& c, std::uint64_t seed = 0) {
  return std::make_unique<GroundingModel>(c.model, enc::TokenVocabulary::synthetic(), anchors_for(small_set(), seed),
                                          seed);
}

PredictionRecord record(const std::string& id, double iou, int length) {
  PredictionRecord r;
  r.sample_id = id;
  r.iou = iou;
  r.query_length = length;
  r.predicted_box = {0, 0, 1, 1};
  r.gt_box = {0, 0, 1, 1};
  return r;
}

}  // namespace

// ---------------------------------------------------------------- optimizer and schedule

TEST(RmsProp, ZeroGradientLeavesParametersUnchanged) {
  auto model = small_model(small_config());
  auto& reg = model->registry();
  RmsProp opt(reg, 0.99, 1e-8);
  std::vector<Tensor> before;
  for (const auto& p : reg.params()) {
    before.push_back(p.var->value);
    p.var->grad_buffer().fill(0.0);
  }
  opt.step(1e-4);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(reg.params()[i].var->value.data, before[i].data);
}

TEST(RmsProp, StepMatchesUpdateRule) {
  ParamRegistry reg;
  auto p = reg.create("p", Tensor({3}, {1.0, -2.0, 0.5}));
  RmsProp opt(reg, 0.9, 1e-8);
  long double s[3] = {0, 0, 0}, w[3] = {1.0, -2.0, 0.5};
  const double grads[2][3] = {{0.3, -0.1, 2.0}, {-0.2, 0.4, 0.0}};
  for (const auto& g : grads) {
    for (int i = 0; i < 3; ++i) p->grad_buffer()[i] = g[i];
    opt.step(0.01);
    for (int i = 0; i < 3; ++i) {
      s[i] = 0.9L * s[i] + 0.1L * g[i] * g[i];
      w[i] -= 0.01L * g[i] / (std::sqrt(s[i]) + 1e-8L);
      EXPECT_NEAR(p->value[i], static_cast<double>(w[i]), 1e-15);
    }
  }
}

TEST(LearningRate, HalvesEveryTenEpochsExactly) {
  const TrainConfig c;
  for (int e = 0; e < 100; ++e) EXPECT_EQ(c.learning_rate_at(e), 1e-4 * std::pow(0.5, e / 10)) << e;
}

// ---------------------------------------------------------------- checkpoints

TEST(Checkpoint, SaveLoadIsBitIdentical) {
  const auto dir = scratch("ckpt");
  auto c = small_config();
  auto a = small_model(c, 1);
  RmsProp opt(a->registry(), 0.99, 1e-8);
  for (auto& s : opt.state()) s.fill(0.25);
  Checkpoint meta;
  meta.config = c;
  meta.vocab = a->vocab();
  meta.anchors = a->anchors();
  meta.model_seed = 1;
  meta.epoch = 3;
  save_checkpoint((dir / "m.ckpt").string(), meta, *a, &opt);

  auto b = small_model(c, 2);
  RmsProp opt2(b->registry(), 0.99, 1e-8);
  const auto loaded = load_checkpoint((dir / "m.ckpt").string(), *b, &opt2);
  EXPECT_EQ(loaded.epoch, 3);
  for (std::size_t i = 0; i < a->registry().params().size(); ++i)
    EXPECT_EQ(a->registry().params()[i].var->value.data, b->registry().params()[i].var->value.data);
  for (std::size_t i = 0; i < a->registry().buffers().size(); ++i)
    EXPECT_EQ(a->registry().buffers()[i].tensor->data, b->registry().buffers()[i].tensor->data);
  for (const auto& s : opt2.state())
    for (double v : s.data) EXPECT_EQ(v, 0.25);

  Checkpoint meta2;
  auto c2 = load_model((dir / "m.ckpt").string(), &meta2);
  EXPECT_EQ(c2->anchors(), a->anchors());
  EXPECT_EQ(meta2.vocab, a->vocab());
}

TEST(Checkpoint, TruncatedFileIsAnIntegrityError) {
  const auto dir = scratch("trunc");
  auto c = small_config();
  auto a = small_model(c);
  Checkpoint meta;
  meta.config = c;
  meta.vocab = a->vocab();
  meta.anchors = a->anchors();
  const auto path = dir / "m.ckpt";
  save_checkpoint(path.string(), meta, *a, nullptr);
  fs::resize_file(path, fs::file_size(path) - 100);
  EXPECT_THROW(load_checkpoint(path.string(), *a, nullptr), IntegrityError);
  fs::resize_file(path, 10);
  EXPECT_THROW(load_checkpoint(path.string(), *a, nullptr), IntegrityError);
}

TEST(Checkpoint, FlippedByteFailsTheChecksum) {
  const auto dir = scratch("flip");
  auto c = small_config();
  auto a = small_model(c);
  Checkpoint meta;
  meta.config = c;
  meta.vocab = a->vocab();
  meta.anchors = a->anchors();
  const auto path = dir / "m.ckpt";
  save_checkpoint(path.string(), meta, *a, nullptr);
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(static_cast<std::streamoff>(fs::file_size(path) / 2));
  f.put('\x7f');
  f.close();
  EXPECT_THROW(load_checkpoint(path.string(), *a, nullptr), IntegrityError);
}

TEST(Checkpoint, DifferentDimNamesTheField) {
  const auto dir = scratch("dim");
  auto c = small_config();
  auto a = small_model(c);
  Checkpoint meta;
  meta.config = c;
  meta.vocab = a->vocab();
  meta.anchors = a->anchors();
  save_checkpoint((dir / "m.ckpt").string(), meta, *a, nullptr);
  auto c2 = c;
  c2.model.dim = 8;
  auto b = small_model(c2);
  try {
    load_checkpoint((dir / "m.ckpt").string(), *b, nullptr);
    FAIL() << "expected a shape mismatch";
  } catch (const ShapeMismatchError& e) {
    EXPECT_NE(std::string(e.what()).find("'dim'"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, VersionMismatchNamesBothVersions) {
  const auto dir = scratch("ver");
  auto c = small_config();
  auto a = small_model(c);
  Checkpoint meta;
  meta.config = c;
  meta.vocab = a->vocab();
  meta.anchors = a->anchors();
  const auto path = dir / "m.ckpt";
  save_checkpoint(path.string(), meta, *a, nullptr);
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(8);
  const std::uint32_t v = 7;
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
  f.close();
  try {
    load_checkpoint(path.string(), *a, nullptr);
    FAIL() << "expected a version error";
  } catch (const VersionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find('7'), std::string::npos) << msg;
    EXPECT_NE(msg.find(std::to_string(kCheckpointVersion)), std::string::npos) << msg;
  }
}

// ---------------------------------------------------------------- training

TEST(Training, SameSeedGivesIdenticalCurves) {
  auto c = small_config();
  c.max_steps = 12;
  auto a = train(c, small_set()), b = train(c, small_set());
  ASSERT_EQ(a.result.curve.size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(a.result.curve[i].loss.total, b.result.curve[i].loss.total);
}

TEST(Training, SmallSubsetLossHalvesWithin300Steps) {
  auto c = small_config();
  c.max_steps = 300;
  c.epochs = 1000;
  c.learning_rate = 1e-3;
  auto r = train(c, small_set());
  const auto& curve = r.result.curve;
  ASSERT_EQ(curve.size(), 300u);
  auto window = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 8; ++i) s += curve[i].loss.total;
    return s / 8;
  };
  // One epoch of 8 batches averages out the batch-to-batch spread.
  EXPECT_LT(window(curve.size() - 8), 0.5 * window(0));
}

TEST(Training, ZeroLambdaReportsButExcludesRegularizers) {
  auto c = small_config();
  c.reg_weight = 0.0;
  c.max_steps = 5;
  auto r = train(c, small_set());
  for (const auto& s : r.result.curve) {
    EXPECT_GT(s.loss.div + s.loss.cover, 0.0);
    EXPECT_NEAR(s.loss.total, s.loss.cls + c.coord_weight * s.loss.reg, 1e-12);
  }
}

TEST(Training, CheckpointIsOverwrittenEachEpoch) {
  const auto dir = scratch("epochs");
  auto c = small_config();
  c.epochs = 2;
  c.train_subset = 16;
  c.out_dir = dir.string();
  auto r = train(c, small_set());
  EXPECT_EQ(r.result.last_checkpoint, (dir / "model.ckpt").string());
  EXPECT_EQ(read_checkpoint_header(r.result.last_checkpoint).epoch, 2);
  int ckpts = 0;
  for (const auto& e : fs::directory_iterator(dir)) ckpts += e.path().extension() == ".ckpt";
  EXPECT_EQ(ckpts, 1);
  EXPECT_TRUE(fs::exists(dir / "loss_curve.jsonl"));
}

TEST(Training, NonFiniteLossWritesDumpAndThrows) {
  const auto dir = scratch("nan");
  auto c = small_config();
  c.out_dir = dir.string();
  auto model = small_model(c);
  for (const auto& p : model->registry().params())
    if (p.name == "head.c2.bias") p.var->value.fill(std::nan(""));
  EXPECT_THROW(train_model(*model, c, small_set()), NumericError);
  EXPECT_TRUE(fs::exists(dir / "nan_dump.json"));
}

// ---------------------------------------------------------------- evaluation

TEST(Evaluate, PerfectPredictionsScoreOne) {
  std::vector<PredictionRecord> p{record("a", 1.0, 1), record("b", 1.0, 3), record("c", 1.0, 7)};
  EXPECT_EQ(make_report(p).accuracy, 1.0);
}

TEST(Evaluate, IouJustBelowHalfIsIncorrect) {
  const auto r = make_report({record("a", 0.49, 2), record("b", 0.5, 2)});
  EXPECT_EQ(r.accuracy, 0.5);
}

TEST(Evaluate, HandBuiltDumpGivesSevenTenths) {
  std::vector<PredictionRecord> p;
  const int lengths[10] = {1, 2, 3, 3, 4, 5, 6, 8, 12, 2};
  const double ious[10] = {0.9, 0.2, 0.6, 0.7, 0.5, 0.1, 0.8, 0.55, 0.3, 0.95};
  for (int i = 0; i < 10; ++i) p.push_back(record(std::to_string(i), ious[i], lengths[i]));
  const auto r = make_report(p);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.7);
  const int want_count[4] = {3, 2, 2, 3}, want_correct[4] = {2, 2, 1, 2};
  int total = 0;
  for (int b = 0; b < 4; ++b) {
    EXPECT_EQ(r.length_bins[b].count, want_count[b]);
    EXPECT_EQ(r.length_bins[b].correct, want_correct[b]);
    total += r.length_bins[b].count;
  }
  EXPECT_EQ(total, r.count);
}

TEST(Evaluate, EmptyBinHasNullAccuracy) {
  const auto r = make_report({record("a", 0.9, 3)});
  EXPECT_FALSE(r.length_bins[0].accuracy.has_value());
  EXPECT_EQ(r.length_bins[0].count, 0);
}

TEST(Evaluate, DumpRecountMatchesReportAndTagsComeFromTokens) {
  const auto dir = scratch("dump");
  auto c = small_config();
  auto model = small_model(c);
  auto samples = data::generate_split("test", 40, 3, {});
  for (auto& s : samples) s.meta.attribute_tags = {"bogus"};
  std::vector<PredictionRecord> preds;
  const auto report = evaluate(*model, samples, &preds);
  write_predictions(preds, (dir / "p.jsonl").string());
  const auto back = read_predictions((dir / "p.jsonl").string());
  ASSERT_EQ(back.size(), samples.size());
  int correct = 0, binned = 0;
  for (std::size_t i = 0; i < back.size(); ++i) {
    correct += grounding::iou(back[i].predicted_box, back[i].gt_box) >= 0.5;
    EXPECT_EQ(back[i].attribute_tags, data::attribute_tags(samples[i].tokens));
  }
  for (const auto& b : report.length_bins) binned += b.count;
  EXPECT_EQ(binned, report.count);
  EXPECT_DOUBLE_EQ(report.accuracy, static_cast<double>(correct) / back.size());
  EXPECT_TRUE(report.mean_coverage.has_value());
}

TEST(Evaluate, MalformedDumpLineIsReported) {
  const auto dir = scratch("baddump");
  std::ofstream(dir / "p.jsonl") << "{\"sample_id\": \"x\"}\n";
  try {
    read_predictions((dir / "p.jsonl").string());
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line_number, 1u);
  }
}

TEST(Evaluate, ReportJsonRoundTrip) {
  const auto r = make_report({record("a", 0.9, 3), record("b", 0.1, 9)});
  const auto back = eval_report_from_json(nlohmann::json::parse(to_json(r).dump()));
  EXPECT_EQ(back.accuracy, r.accuracy);
  EXPECT_EQ(back.length_bins.size(), 4u);
  EXPECT_FALSE(back.length_bins[0].accuracy.has_value());
}

// ---------------------------------------------------------------- relative gain

TEST(RelativeGain, EqualReportsGiveZero) {
  const auto r = make_report({record("a", 0.9, 1), record("b", 0.8, 3), record("c", 0.7, 5), record("d", 0.6, 6)});
  const auto g = relative_gain(r, r);
  EXPECT_EQ(*g.overall, 0.0);
  ASSERT_EQ(g.bins.size(), 4u);
  for (const auto& [name, v] : g.bins) {
    ASSERT_TRUE(v.has_value()) << name;
    EXPECT_EQ(*v, 0.0);
  }
}

TEST(RelativeGain, ZeroBaseBinHasNoGain) {
  const auto base = make_report({record("a", 0.9, 1), record("b", 0.1, 3)});
  const auto ours = make_report({record("a", 0.9, 1), record("b", 0.9, 3)});
  const auto g = relative_gain(ours, base);
  EXPECT_FALSE(g.bins[1].second.has_value());
  EXPECT_EQ(*g.bins[0].second, 0.0);
}

TEST(RelativeGain, SimpleAndRefCocoValues) {
  EXPECT_NEAR(*relative_gain(0.6, 0.5), 0.2, 1e-15);
  EXPECT_NEAR(100 * *relative_gain(66.19, 55.59), 19.07, 0.005);
  EXPECT_FALSE(relative_gain(0.3, 0.0).has_value());
}

// ---------------------------------------------------------------- ablation

TEST(Ablate, RoundSweepGivesOneRowPerConfigWithSeedStatistics) {
  Sweep sweep;
  sweep.seeds = {0, 1, 2};
  for (int k = 1; k <= 3; ++k) {
    TrainConfig c;
    c.model.rounds = k;
    sweep.entries.push_back({"K=" + std::to_string(k), c});
  }
  auto runner = [](const TrainConfig& c, std::uint64_t seed) {
    std::vector<PredictionRecord> p;
    for (int i = 0; i < 10; ++i)
      p.push_back(record(std::to_string(i), i < c.model.rounds + static_cast<int>(seed) ? 0.9 : 0.1, 1 + i));
    return make_report(p);
  };
  const auto t = ablate(sweep, runner);
  ASSERT_EQ(t.rows.size(), 3u);
  for (int k = 0; k < 3; ++k) {
    const auto& row = t.rows[k];
    EXPECT_EQ(row.runs.size(), 3u);
    EXPECT_NEAR(*row.mean, (k + 2) / 10.0, 1e-12);
    EXPECT_NEAR(*row.stddev, 0.1, 1e-12);
  }
  const auto back = ablation_table_from_json(nlohmann::json::parse(to_json(t).dump()));
  EXPECT_EQ(back.rows.size(), 3u);
  EXPECT_EQ(back.rows[2].mean, t.rows[2].mean);
}

TEST(Ablate, FailingRunIsRecordedWithoutAborting) {
  Sweep sweep;
  sweep.seeds = {0, 1};
  sweep.entries.push_back({"x", TrainConfig{}});
  auto runner = [](const TrainConfig&, std::uint64_t seed) -> EvalReport {
    if (seed == 1) throw NumericError("boom");
    return make_report({record("a", 0.9, 2)});
  };
  const auto t = ablate(sweep, runner);
  EXPECT_EQ(t.rows[0].runs[1].error, "boom");
  EXPECT_EQ(*t.rows[0].mean, 1.0);
}

TEST(Ablate, SweepFileMergesBaseIntoEachConfig) {
  const auto j = nlohmann::json::parse(R"({
    "data_dir": "d", "seeds": [4, 5],
    "base": {"epochs": 3, "model": {"dim": 32}},
    "configs": [{"name": "avg", "model": {"strategy": "average_vector"}}, {"name": "rec"}]})");
  const auto s = sweep_from_json(j);
  ASSERT_EQ(s.entries.size(), 2u);
  EXPECT_EQ(s.entries[0].config.model.strategy, Strategy::average_vector);
  EXPECT_EQ(s.entries[0].config.model.dim, 32);
  EXPECT_EQ(s.entries[1].config.epochs, 3);
  EXPECT_EQ(s.seeds, (std::vector<std::uint64_t>{4, 5}));
  EXPECT_THROW(sweep_from_json(nlohmann::json::parse(R"({"configs": []})")), ConfigError);
}

// ---------------------------------------------------------------- gradient check

TEST(Gradcheck, FreshTinyModelPasses) {
  const auto r = gradcheck(tiny_config());
  EXPECT_TRUE(r.pass);
  for (const auto& e : r.entries) EXPECT_TRUE(e.pass) << e.name << " " << e.max_rel_error;
}

TEST(Gradcheck, CorruptedGradientIsFlagged) {
  GradcheckOptions opt;
  opt.corrupt = [](ParamRegistry& reg) {
    for (const auto& p : reg.params())
      if (p.name == "round0.gamma.weight") p.var->grad_buffer()[0] += 0.05;
  };
  opt.include = {"round0.gamma", "round0.beta"};
  const auto r = gradcheck(tiny_config(), opt);
  EXPECT_FALSE(r.pass);
  for (const auto& e : r.entries) EXPECT_EQ(e.pass, e.name != "round0.gamma.weight") << e.name;
}

TEST(Gradcheck, NoSelectedParametersIsAVacuousPass) {
  GradcheckOptions opt;
  opt.include = {"frozen."};
  const auto r = gradcheck(tiny_config(), opt);
  EXPECT_TRUE(r.entries.empty());
  EXPECT_TRUE(r.pass);
}
