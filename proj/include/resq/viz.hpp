#pragma once

// Per-round attention and confidence heatmap export, plus plain-text and
// bar-chart rendering of evaluation reports and ablation tables.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "resq/harness.hpp"

namespace resq::viz {

struct RoundVisual {
  int round = 0;  // 1-based
  std::vector<std::pair<std::string, double>> attention;  // empty for attention-free strategies
  Tensor heatmap;  // [H_f, W_f], sums to 1
  int argmax_i = 0, argmax_j = 0;
  std::string heatmap_file;
};

struct VisualizationBundle {
  std::string sample_id;
  std::vector<std::string> tokens;
  std::vector<RoundVisual> rounds;
  grounding::Selection selection;
  data::Box gt_box;
  std::string overlay_file;
  std::string sidecar_file;
};

/// Runs the model in evaluation mode on one sample; heatmaps come from the
/// grounding head applied to each intermediate v(k).
VisualizationBundle compute_visualization(GroundingModel& model, const data::GroundingSample& sample);

/// compute_visualization, then writes heatmap_round<k>.ppm (nearest-neighbor
/// upsampled, min-max scaled for display), overlay.ppm and sidecar.json.
VisualizationBundle visualize(GroundingModel& model, const data::GroundingSample& sample,
                              const std::string& out_dir);

nlohmann::ordered_json sidecar_json(const VisualizationBundle& b);

/// Fixed monotone colormap, t in [0, 1].
std::array<double, 3> colormap(double t);

/// Nearest-neighbor upsampling of a [H, W] map to an image after min-max
/// scaling and colormapping.
Image render_heatmap(const Tensor& map, int height, int width);

/// Image with the predicted box (red) and the ground truth (green) outlined.
Image render_overlay(const Image& image, const data::Box& predicted, const data::Box& gt);

// ---------------------------------------------------------------- reports

/// Decimal text identical to the JSON encoding of the same value.
std::string format_number(double v);
std::string format_optional(const std::optional<double>& v);

struct ReportRow {
  std::string label;
  int count = 0;
  std::optional<double> base;
  std::optional<double> ours;
  std::optional<double> gain_percent;  // 100 (ours - base) / base
  std::optional<double> stddev;
};

struct ReportView {
  std::string title;
  std::vector<ReportRow> rows;
  bool has_base = false;
  bool has_stddev = false;
  std::optional<ReportRow> overall;  // printed under the table, not as a row
};

/// Length-bin rows of a report, optionally against a baseline.
ReportView report_view(const EvalReport& ours, const EvalReport* base = nullptr);
/// One row per ablation config: mean accuracy and seed standard deviation.
ReportView ablation_view(const AblationTable& table);

nlohmann::ordered_json to_json(const ReportView& v);
std::string render_text(const ReportView& v);
/// One bar group per row: base (blue) and ours (orange), height ~ value.
Image render_bar_chart(const ReportView& v, int bar_width = 24, int height = 160);

}  // namespace resq::viz
