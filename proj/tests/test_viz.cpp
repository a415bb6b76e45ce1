#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "resq/errors.hpp"
#include "resq/viz.hpp"

using namespace resq;
namespace fs = std::filesystem;

namespace {

EvalReport bins_report(const std::vector<std::optional<double>>& acc, const std::vector<int>& counts) {
  EvalReport r;
  for (std::size_t b = 0; b < acc.size(); ++b) {
    BinStat s;
    s.name = length_bin_names()[b];
    s.count = counts[b];
    s.accuracy = acc[b];
    if (acc[b]) s.correct = static_cast<int>(std::lround(*acc[b] * counts[b]));
    r.count += counts[b];
    r.length_bins.push_back(s);
  }
  r.accuracy = 0.5;
  return r;
}

int orange_runs(const Image& img, int y) {
  int runs = 0;
  bool inside = false;
  for (int x = 0; x < img.width; ++x) {
    const bool orange = img.at(y, x, 0) > 0.9 && img.at(y, x, 1) > 0.5 && img.at(y, x, 1) < 0.6;
    runs += orange && !inside;
    inside = orange;
  }
  return runs;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

// ---------------------------------------------------------------- reports

TEST(Report, FourBinsGiveFourRowsAndFourBarGroups) {
  const auto r = bins_report({0.8, 0.7, 0.6, 0.5}, {10, 10, 10, 10});
  const auto v = viz::report_view(r);
  EXPECT_EQ(v.rows.size(), 4u);
  const auto img = viz::render_bar_chart(v);
  EXPECT_EQ(orange_runs(img, img.height - 3), 4);
  std::istringstream text(viz::render_text(v));
  std::string line;
  int lines = 0;
  while (std::getline(text, line)) ++lines;
  // title, header, separator, four bins, overall line
  EXPECT_EQ(lines, 8);
}

TEST(Report, EmptyBinRendersCountZeroAndNull) {
  const auto r = bins_report({std::nullopt, 0.7, 0.6, 0.5}, {0, 10, 10, 10});
  const auto v = viz::report_view(r, &r);
  EXPECT_EQ(v.rows[0].count, 0);
  EXPECT_FALSE(v.rows[0].ours.has_value());
  EXPECT_FALSE(v.rows[0].gain_percent.has_value());
  const auto text = viz::render_text(v);
  std::istringstream lines(text);
  std::string line;
  std::vector<std::string> fields;
  while (std::getline(lines, line))
    if (line.rfind("1-2", 0) == 0) {
      std::istringstream f(line);
      for (std::string w; f >> w;) fields.push_back(w);
    }
  EXPECT_EQ(fields, (std::vector<std::string>{"1-2", "0", "null", "null", "null"})) << text;
  const auto img = viz::render_bar_chart(v);
  EXPECT_EQ(orange_runs(img, img.height - 3), 3);
}

TEST(Report, RefCocoLengthRowGains) {
  const auto base = bins_report({0.7768, 0.7604, 0.6698, 0.5559}, {3622, 2387, 2560, 1430});
  const auto ours = bins_report({0.7935, 0.7928, 0.7265, 0.6619}, {3622, 2387, 2560, 1430});
  const auto v = viz::report_view(ours, &base);
  const double want[4] = {2.15, 4.26, 8.46, 19.07};
  for (int b = 0; b < 4; ++b) EXPECT_NEAR(*v.rows[b].gain_percent, want[b], 0.01) << b;
}

TEST(Report, TextNumbersMatchJsonExactly) {
  const auto base = bins_report({0.1 / 3, 0.7, 2.0 / 3, 0.5}, {3, 10, 3, 2});
  const auto ours = bins_report({1.0 / 3, 0.8, 1.0, 0.5}, {3, 10, 3, 2});
  const auto v = viz::report_view(ours, &base);
  const auto text = viz::render_text(v);
  const auto j = viz::to_json(v);
  for (const auto& row : j["rows"])
    for (const char* key : {"base", "ours", "gain_percent"}) {
      const std::string s = row[key].dump();
      EXPECT_NE(text.find(s), std::string::npos) << key << " " << s;
      if (!row[key].is_null()) EXPECT_EQ(nlohmann::json::parse(s).get<double>(), row[key].get<double>());
    }
  EXPECT_EQ(viz::render_text(v), text);
}

TEST(Report, AblationViewCarriesSeedStatistics) {
  AblationTable t;
  AblationRow row;
  row.name = "recursive";
  row.mean = 0.5;
  row.stddev = 0.01;
  row.runs.resize(3);
  for (auto& run : row.runs) run.report = EvalReport{};
  t.rows.push_back(row);
  const auto v = viz::ablation_view(t);
  EXPECT_EQ(v.rows[0].count, 3);
  EXPECT_TRUE(v.has_stddev);
  EXPECT_NE(viz::render_text(v).find("0.01"), std::string::npos);
}

TEST(Colormap, IsMonotoneInBrightness) {
  double prev = -1;
  for (int i = 0; i <= 100; ++i) {
    const auto c = viz::colormap(i / 100.0);
    const double lum = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    EXPECT_GE(lum, prev - 1e-12);
    prev = lum;
  }
}

// ---------------------------------------------------------------- visualization

namespace {

struct VizFixture : ::testing::Test {
  std::vector<data::GroundingSample> samples = data::generate_split("test", 12, 21, {});
  std::unique_ptr<GroundingModel> model;

  void SetUp() override {
    ModelConfig cfg;
    cfg.dim = 16;
    cfg.embed_dim = 16;
    cfg.backbone_channels = {8, 16, 16, 16};
    cfg.rounds = 3;
    model = std::make_unique<GroundingModel>(cfg, enc::TokenVocabulary::synthetic(), anchors_for(samples, 0), 4);
  }
};

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("resq_viz_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_F(VizFixture, ThreeRoundsWriteThreeHeatmapsOverlayAndSidecar) {
  const auto dir = scratch("files");
  const auto b = viz::visualize(*model, samples[0], dir.string());
  ASSERT_EQ(b.rounds.size(), 3u);
  int ppm = 0, jsonf = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    ppm += e.path().extension() == ".ppm";
    jsonf += e.path().extension() == ".json";
  }
  EXPECT_EQ(ppm, 4);
  EXPECT_EQ(jsonf, 1);
  for (int k = 1; k <= 3; ++k) {
    const auto img = read_ppm((dir / ("heatmap_round" + std::to_string(k) + ".ppm")).string());
    EXPECT_EQ(img.height, samples[0].image.height);
    EXPECT_EQ(img.width, samples[0].image.width);
  }
}

TEST_F(VizFixture, HeatmapsSumToOneAndAttentionRowsToo) {
  for (const auto& s : samples) {
    const auto b = viz::compute_visualization(*model, s);
    for (const auto& r : b.rounds) {
      double heat = 0, att = 0;
      for (double v : r.heatmap.data) heat += v;
      for (const auto& [w, a] : r.attention) att += a;
      EXPECT_NEAR(heat, 1.0, 1e-6);
      EXPECT_NEAR(att, 1.0, 1e-6);
      EXPECT_EQ(r.attention.size(), s.tokens.size());
    }
  }
}

TEST_F(VizFixture, FinalArgmaxMatchesSelectedCell) {
  for (const auto& s : samples) {
    const auto b = viz::compute_visualization(*model, s);
    EXPECT_EQ(b.rounds.back().argmax_i, b.selection.i) << s.id;
    EXPECT_EQ(b.rounds.back().argmax_j, b.selection.j) << s.id;
  }
}

TEST_F(VizFixture, SidecarEqualsTraceBitForBit) {
  const auto dir = scratch("trace");
  viz::visualize(*model, samples[1], dir.string());
  const auto side = nlohmann::json::parse(slurp(dir / "sidecar.json"));

  ag::NoGradGuard guard;
  const data::GroundingSample* one[] = {&samples[1]};
  const auto fwd = model->forward(model->make_batch(one), false);
  ASSERT_EQ(side["rounds"].size(), fwd.rounds.size());
  for (std::size_t k = 0; k < fwd.rounds.size(); ++k) {
    const auto& att = side["rounds"][k]["attention"];
    ASSERT_EQ(att.size(), samples[1].tokens.size());
    for (std::size_t w = 0; w < att.size(); ++w) {
      EXPECT_EQ(att[w]["word"].get<std::string>(), samples[1].tokens[w]);
      EXPECT_EQ(att[w]["score"].get<double>(), fwd.rounds[k].alpha->value[w]);
    }
    const Tensor maps = grounding::intermediate_heatmap(fwd.rounds[k].v, model->head());
    const auto& heat = side["rounds"][k]["heatmap"];
    for (int i = 0; i < maps.dim(1); ++i)
      for (int j = 0; j < maps.dim(2); ++j)
        EXPECT_EQ(heat[i][j].get<double>(), maps[static_cast<std::size_t>(i) * maps.dim(2) + j]);
  }
}

TEST_F(VizFixture, RerunGivesIdenticalSidecar) {
  const auto a = scratch("a"), b = scratch("b");
  viz::visualize(*model, samples[2], a.string());
  viz::visualize(*model, samples[2], b.string());
  const auto sa = slurp(a / "sidecar.json"), sb = slurp(b / "sidecar.json");
  // file names are relative, so the sidecars match byte for byte
  EXPECT_EQ(sa, sb);
  EXPECT_EQ(slurp(a / "overlay.ppm"), slurp(b / "overlay.ppm"));
}

TEST(Visualize, MissingCheckpointIsAnError) {
  EXPECT_ANY_THROW(load_model("/nonexistent/model.ckpt"));
}
