#include <algorithm>
#include <fstream>

#include "resq/errors.hpp"
#include "resq/harness.hpp"

namespace resq {

using json = nlohmann::ordered_json;

const std::vector<std::string>& length_bin_names() {
  static const std::vector<std::string> names{"1-2", "3", "4-5", "6+"};
  return names;
}

int length_bin_of(int query_length) {
  if (query_length <= 2) return 0;
  if (query_length == 3) return 1;
  if (query_length <= 5) return 2;
  return 3;
}

namespace {

const std::vector<std::string>& attribute_names() {
  static const std::vector<std::string> names{"color", "location", "size"};
  return names;
}

json box_json(const data::Box& b) { return json::array({b.x, b.y, b.w, b.h}); }

template <typename J>
data::Box box_from(const J& j) { return {j.at(0), j.at(1), j.at(2), j.at(3)}; }

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

template <typename J>
std::optional<double> optional_from(const J& j) {
  if (j.is_null()) return std::nullopt;
  return j.template get<double>();
}

json bin_json(const BinStat& b) {
  return {{"name", b.name}, {"count", b.count}, {"correct", b.correct}, {"accuracy", optional_json(b.accuracy)}};
}

template <typename J>
BinStat bin_from(const J& j) {
  return {j.at("name"), j.at("count"), j.at("correct"), optional_from(j.at("accuracy"))};
}

}  // namespace

std::vector<PredictionRecord> predict(GroundingModel& model, const std::vector<data::GroundingSample>& samples,
                                      int batch_size) {
  ag::NoGradGuard guard;
  std::vector<PredictionRecord> out;
  out.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const data::GroundingSample*> members;
    for (std::size_t i = start; i < end; ++i) members.push_back(&samples[i]);
    const Batch batch = model.make_batch(members);
    const auto fwd = model.forward(batch, false);
    for (std::size_t b = 0; b < members.size(); ++b) {
      const auto& s = *members[b];
      const auto pred = grounding::to_box_prediction(fwd.head_out->value, static_cast<int>(b));
      const auto sel = grounding::select_prediction(pred, model.anchors(), model.stride());
      PredictionRecord r;
      r.sample_id = s.id;
      r.predicted_box = sel.box;
      r.confidence = sel.confidence;
      r.gt_box = s.bbox;
      r.iou = grounding::iou(sel.box, s.bbox);
      r.query_length = static_cast<int>(s.tokens.size());
      r.attribute_tags = data::attribute_tags(s.tokens);
      if (fwd.cover) r.coverage = fwd.cover->value[b];
      out.push_back(std::move(r));
    }
  }
  return out;
}

EvalReport make_report(const std::vector<PredictionRecord>& preds) {
  EvalReport r;
  for (const auto& name : length_bin_names()) r.length_bins.push_back({name, 0, 0, std::nullopt});
  for (const auto& name : attribute_names()) r.attribute_bins.push_back({name, 0, 0, std::nullopt});
  int correct = 0;
  double coverage = 0.0;
  int with_coverage = 0;
  for (const auto& p : preds) {
    const bool ok = p.iou >= kIouThreshold;
    correct += ok;
    auto& bin = r.length_bins[static_cast<std::size_t>(length_bin_of(p.query_length))];
    ++bin.count;
    bin.correct += ok;
    for (auto& ab : r.attribute_bins) {
      if (std::find(p.attribute_tags.begin(), p.attribute_tags.end(), ab.name) != p.attribute_tags.end()) {
        ++ab.count;
        ab.correct += ok;
      }
    }
    if (p.coverage) {
      coverage += *p.coverage;
      ++with_coverage;
    }
  }
  r.count = static_cast<int>(preds.size());
  r.accuracy = r.count > 0 ? static_cast<double>(correct) / r.count : 0.0;
  for (auto* bins : {&r.length_bins, &r.attribute_bins})
    for (auto& b : *bins)
      if (b.count > 0) b.accuracy = static_cast<double>(b.correct) / b.count;
  if (with_coverage > 0) r.mean_coverage = coverage / with_coverage;
  return r;
}

EvalReport evaluate(GroundingModel& model, const std::vector<data::GroundingSample>& samples,
                    std::vector<PredictionRecord>* predictions) {
  auto preds = predict(model, samples);
  EvalReport r = make_report(preds);
  if (predictions) *predictions = std::move(preds);
  return r;
}

void write_predictions(const std::vector<PredictionRecord>& preds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write predictions " + path);
  for (const auto& p : preds) {
    json rec{{"sample_id", p.sample_id},
             {"predicted_box", box_json(p.predicted_box)},
             {"confidence", p.confidence},
             {"gt_box", box_json(p.gt_box)},
             {"iou", p.iou},
             {"query_length", p.query_length},
             {"attribute_tags", p.attribute_tags}};
    if (p.coverage) rec["coverage"] = *p.coverage;
    out << rec.dump() << '\n';
  }
}

std::vector<PredictionRecord> read_predictions(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open predictions " + path);
  std::vector<PredictionRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      PredictionRecord p;
      p.sample_id = j.at("sample_id");
      p.predicted_box = box_from(j.at("predicted_box"));
      p.confidence = j.at("confidence");
      p.gt_box = box_from(j.at("gt_box"));
      p.iou = j.at("iou");
      p.query_length = j.at("query_length");
      p.attribute_tags = j.at("attribute_tags").get<std::vector<std::string>>();
      if (j.contains("coverage")) p.coverage = j.at("coverage").get<double>();
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw ParseError(n, e.what());
    }
  }
  return out;
}

json to_json(const EvalReport& r) {
  json lb = json::array(), ab = json::array();
  for (const auto& b : r.length_bins) lb.push_back(bin_json(b));
  for (const auto& b : r.attribute_bins) ab.push_back(bin_json(b));
  return {{"accuracy", r.accuracy},
          {"count", r.count},
          {"length_bins", lb},
          {"attribute_bins", ab},
          {"mean_coverage", optional_json(r.mean_coverage)}};
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.accuracy = j.at("accuracy");
    r.count = j.at("count");
    for (const auto& b : j.at("length_bins")) r.length_bins.push_back(bin_from(b));
    if (j.contains("attribute_bins"))
      for (const auto& b : j.at("attribute_bins")) r.attribute_bins.push_back(bin_from(b));
    if (j.contains("mean_coverage")) r.mean_coverage = optional_from(j.at("mean_coverage"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed report: ") + e.what());
  }
  return r;
}

std::optional<double> relative_gain(double ours, double base) {
  if (base == 0.0) return std::nullopt;
  return (ours - base) / base;
}

RelativeGain relative_gain(const EvalReport& ours, const EvalReport& base) {
  if (ours.length_bins.size() != base.length_bins.size()) throw ContractError("reports use different binning");
  RelativeGain g;
  g.overall = relative_gain(ours.accuracy, base.accuracy);
  for (std::size_t i = 0; i < ours.length_bins.size(); ++i) {
    const auto& o = ours.length_bins[i];
    const auto& b = base.length_bins[i];
    if (o.name != b.name) throw ContractError("reports use different binning");
    std::optional<double> v;
    if (o.accuracy && b.accuracy) v = relative_gain(*o.accuracy, *b.accuracy);
    g.bins.emplace_back(o.name, v);
  }
  return g;
}

}  // namespace resq
