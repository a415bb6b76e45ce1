#include "resq/viz.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "resq/errors.hpp"

namespace fs = std::filesystem;

namespace resq::viz {

using json = nlohmann::ordered_json;

namespace {

json box_json(const data::Box& b) { return json::array({b.x, b.y, b.w, b.h}); }

}  // namespace

VisualizationBundle compute_visualization(GroundingModel& model, const data::GroundingSample& sample) {
  ag::NoGradGuard guard;
  const data::GroundingSample* one[] = {&sample};
  const Batch batch = model.make_batch(one);
  const ForwardResult fwd = model.forward(batch, false);

  VisualizationBundle b;
  b.sample_id = sample.id;
  b.tokens = sample.tokens;
  b.gt_box = sample.bbox;
  b.selection = grounding::select_prediction(grounding::to_box_prediction(fwd.head_out->value, 0),
                                             model.anchors(), model.stride());
  const int n = static_cast<int>(sample.tokens.size());
  for (std::size_t k = 0; k < fwd.rounds.size(); ++k) {
    const auto& rec = fwd.rounds[k];
    RoundVisual rv;
    rv.round = static_cast<int>(k) + 1;
    if (rec.alpha) {
      for (int w = 0; w < n; ++w) rv.attention.emplace_back(sample.tokens[static_cast<std::size_t>(w)], rec.alpha->value[w]);
    }
    const Tensor maps = grounding::intermediate_heatmap(rec.v, model.head());
    const int H = maps.dim(1), W = maps.dim(2);
    rv.heatmap = Tensor({H, W}, std::vector<double>(maps.data.begin(), maps.data.begin() + H * W));
    const auto best = std::max_element(rv.heatmap.data.begin(), rv.heatmap.data.end()) - rv.heatmap.data.begin();
    rv.argmax_i = static_cast<int>(best) / W;
    rv.argmax_j = static_cast<int>(best) % W;
    b.rounds.push_back(std::move(rv));
  }
  return b;
}

json sidecar_json(const VisualizationBundle& b) {
  json rounds = json::array();
  for (const auto& r : b.rounds) {
    json att = json::array();
    for (const auto& [word, score] : r.attention) att.push_back({{"word", word}, {"score", score}});
    json heat = json::array();
    for (int i = 0; i < r.heatmap.dim(0); ++i) {
      json row = json::array();
      for (int j = 0; j < r.heatmap.dim(1); ++j) row.push_back(r.heatmap[static_cast<std::size_t>(i) * r.heatmap.dim(1) + j]);
      heat.push_back(row);
    }
    rounds.push_back({{"round", r.round},
                      {"attention", att},
                      {"heatmap", heat},
                      {"argmax_cell", {r.argmax_i, r.argmax_j}},
                      {"heatmap_file", r.heatmap_file}});
  }
  return {{"sample_id", b.sample_id},
          {"tokens", b.tokens},
          {"gt_box", box_json(b.gt_box)},
          {"predicted_box", box_json(b.selection.box)},
          {"confidence", b.selection.confidence},
          {"selected_cell", {b.selection.i, b.selection.j}},
          {"selected_anchor", b.selection.a},
          {"rounds", rounds},
          {"overlay_file", b.overlay_file}};
}

std::array<double, 3> colormap(double t) {
  t = std::clamp(t, 0.0, 1.0);
  // black -> purple -> orange -> pale yellow
  static const double stops[4][3] = {{0.0, 0.0, 0.02}, {0.45, 0.07, 0.5}, {0.95, 0.45, 0.1}, {0.99, 0.98, 0.65}};
  const double x = t * 3.0;
  const int k = std::min(2, static_cast<int>(x));
  const double f = x - k;
  return {stops[k][0] + f * (stops[k + 1][0] - stops[k][0]), stops[k][1] + f * (stops[k + 1][1] - stops[k][1]),
          stops[k][2] + f * (stops[k + 1][2] - stops[k][2])};
}

Image render_heatmap(const Tensor& map, int height, int width) {
  const int H = map.dim(0), W = map.dim(1);
  const auto [lo_it, hi_it] = std::minmax_element(map.data.begin(), map.data.end());
  const double lo = *lo_it, span = *hi_it - *lo_it;
  Image img(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const int i = std::min(H - 1, y * H / height), j = std::min(W - 1, x * W / width);
      const double v = map[static_cast<std::size_t>(i) * W + j];
      const auto c = colormap(span > 0 ? (v - lo) / span : 0.0);
      for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = c[ch];
    }
  return img;
}

namespace {

void outline(Image& img, const data::Box& b, const std::array<double, 3>& color) {
  const int x0 = static_cast<int>(std::floor(b.x)), y0 = static_cast<int>(std::floor(b.y));
  const int x1 = static_cast<int>(std::ceil(b.x + b.w)) - 1, y1 = static_cast<int>(std::ceil(b.y + b.h)) - 1;
  auto put = [&](int y, int x) {
    if (y < 0 || x < 0 || y >= img.height || x >= img.width) return;
    for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[c];
  };
  for (int x = x0; x <= x1; ++x) {
    put(y0, x);
    put(y1, x);
  }
  for (int y = y0; y <= y1; ++y) {
    put(y, x0);
    put(y, x1);
  }
}

}  // namespace

Image render_overlay(const Image& image, const data::Box& predicted, const data::Box& gt) {
  Image out = image;
  outline(out, gt, {0.1, 0.9, 0.1});
  outline(out, predicted, {1.0, 0.15, 0.15});
  return out;
}

VisualizationBundle visualize(GroundingModel& model, const data::GroundingSample& sample, const std::string& out_dir) {
  VisualizationBundle b = compute_visualization(model, sample);
  fs::create_directories(out_dir);
  for (auto& r : b.rounds) {
    r.heatmap_file = "heatmap_round" + std::to_string(r.round) + ".ppm";
    write_ppm((fs::path(out_dir) / r.heatmap_file).string(),
              render_heatmap(r.heatmap, sample.image.height, sample.image.width));
  }
  b.overlay_file = "overlay.ppm";
  write_ppm((fs::path(out_dir) / b.overlay_file).string(), render_overlay(sample.image, b.selection.box, b.gt_box));
  b.sidecar_file = (fs::path(out_dir) / "sidecar.json").string();
  std::ofstream out(b.sidecar_file);
  if (!out) throw Error("cannot write " + b.sidecar_file);
  out << sidecar_json(b).dump(2) << '\n';
  return b;
}

// ---------------------------------------------------------------- reports

std::string format_number(double v) { return json(v).dump(); }

std::string format_optional(const std::optional<double>& v) { return v ? format_number(*v) : "null"; }

ReportView report_view(const EvalReport& ours, const EvalReport* base) {
  ReportView v;
  v.title = base ? "Acc@0.5 by query length (base vs ours)" : "Acc@0.5 by query length";
  v.has_base = base != nullptr;
  if (base && base->length_bins.size() != ours.length_bins.size()) throw ContractError("reports use different binning");
  for (std::size_t i = 0; i < ours.length_bins.size(); ++i) {
    const auto& o = ours.length_bins[i];
    ReportRow r;
    r.label = o.name;
    r.count = o.count;
    r.ours = o.accuracy;
    if (base) {
      r.base = base->length_bins[i].accuracy;
      if (r.base && r.ours) {
        const auto g = relative_gain(*r.ours, *r.base);
        if (g) r.gain_percent = 100.0 * *g;
      }
    }
    v.rows.push_back(r);
  }
  ReportRow all;
  all.label = "overall";
  all.count = ours.count;
  if (ours.count > 0) all.ours = ours.accuracy;
  if (base) {
    if (base->count > 0) all.base = base->accuracy;
    if (all.base && all.ours) {
      const auto g = relative_gain(*all.ours, *all.base);
      if (g) all.gain_percent = 100.0 * *g;
    }
  }
  v.overall = all;
  return v;
}

ReportView ablation_view(const AblationTable& table) {
  ReportView v;
  v.title = "Ablation: mean Acc@0.5 over seeds";
  v.has_stddev = true;
  for (const auto& row : table.rows) {
    ReportRow r;
    r.label = row.name;
    for (const auto& run : row.runs)
      if (run.report) ++r.count;
    r.ours = row.mean;
    r.stddev = row.stddev;
    v.rows.push_back(r);
  }
  return v;
}

json to_json(const ReportView& v) {
  json rows = json::array();
  for (const auto& r : v.rows) {
    json jr{{"label", r.label}, {"count", r.count}};
    if (v.has_base) jr["base"] = r.base ? json(*r.base) : json(nullptr);
    jr["ours"] = r.ours ? json(*r.ours) : json(nullptr);
    if (v.has_stddev) jr["std"] = r.stddev ? json(*r.stddev) : json(nullptr);
    if (v.has_base) jr["gain_percent"] = r.gain_percent ? json(*r.gain_percent) : json(nullptr);
    rows.push_back(jr);
  }
  json out{{"title", v.title}, {"rows", rows}};
  if (v.overall) {
    json o{{"count", v.overall->count}, {"ours", v.overall->ours ? json(*v.overall->ours) : json(nullptr)}};
    if (v.has_base) {
      o["base"] = v.overall->base ? json(*v.overall->base) : json(nullptr);
      o["gain_percent"] = v.overall->gain_percent ? json(*v.overall->gain_percent) : json(nullptr);
    }
    out["overall"] = o;
  }
  return out;
}

std::string render_text(const ReportView& v) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{"label", "count"};
  if (v.has_base) header.push_back("base");
  header.push_back(v.has_base ? "ours" : "accuracy");
  if (v.has_stddev) header.push_back("std");
  if (v.has_base) header.push_back("gain_percent");
  cells.push_back(header);
  for (const auto& r : v.rows) {
    std::vector<std::string> line{r.label, std::to_string(r.count)};
    if (v.has_base) line.push_back(format_optional(r.base));
    line.push_back(format_optional(r.ours));
    if (v.has_stddev) line.push_back(format_optional(r.stddev));
    if (v.has_base) line.push_back(format_optional(r.gain_percent));
    cells.push_back(line);
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  std::ostringstream out;
  out << v.title << '\n';
  for (std::size_t l = 0; l < cells.size(); ++l) {
    for (std::size_t c = 0; c < cells[l].size(); ++c) {
      if (c) out << "  ";
      const auto& s = cells[l][c];
      if (c == 0) {
        out << s << std::string(width[c] - s.size(), ' ');
      } else {
        out << std::string(width[c] - s.size(), ' ') << s;
      }
    }
    out << '\n';
    if (l == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w;
      out << std::string(total + 2 * (width.size() - 1), '-') << '\n';
    }
  }
  if (v.overall) {
    out << "overall: " << format_optional(v.overall->ours) << " over " << v.overall->count << " samples";
    if (v.has_base)
      out << " (base " << format_optional(v.overall->base) << ", gain_percent " << format_optional(v.overall->gain_percent)
          << ")";
    out << '\n';
  }
  return out.str();
}

Image render_bar_chart(const ReportView& v, int bar_width, int height) {
  const int series = v.has_base ? 2 : 1;
  const int gap = bar_width / 2;
  const int groups = static_cast<int>(v.rows.size());
  const int width = std::max(1, gap + groups * (series * bar_width + gap));
  Image img(height, width, 1.0);
  double top = 0.0;
  for (const auto& r : v.rows) top = std::max({top, r.ours.value_or(0.0), r.base.value_or(0.0)});
  if (top <= 0.0) top = 1.0;
  const std::array<double, 3> base_color{0.2, 0.4, 0.8}, ours_color{0.95, 0.55, 0.1};
  const int plot_h = height - 4;
  auto bar = [&](int x0, double value, const std::array<double, 3>& color) {
    const int h = static_cast<int>(std::lround(plot_h * std::clamp(value / top, 0.0, 1.0)));
    for (int y = height - 2 - h; y < height - 2; ++y)
      for (int x = x0; x < x0 + bar_width; ++x)
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[c];
  };
  for (int g = 0; g < groups; ++g) {
    const auto& r = v.rows[static_cast<std::size_t>(g)];
    int x = gap + g * (series * bar_width + gap);
    if (v.has_base) {
      bar(x, r.base.value_or(0.0), base_color);
      x += bar_width;
    }
    bar(x, r.ours.value_or(0.0), ours_color);
  }
  for (int x = 0; x < width; ++x)
    for (int c = 0; c < 3; ++c) img.at(height - 2, x, c) = 0.0;
  return img;
}

}  // namespace resq::viz
