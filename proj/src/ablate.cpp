#include <cmath>
#include <filesystem>
#include <fstream>

#include "resq/errors.hpp"
#include "resq/harness.hpp"

namespace fs = std::filesystem;

namespace resq {

using json = nlohmann::ordered_json;

Sweep sweep_from_json(const nlohmann::json& j) {
  Sweep s;
  try {
    if (j.contains("seeds")) s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("data_dir")) s.data_dir = j.at("data_dir");
    if (j.contains("eval_split")) s.eval_split = j.at("eval_split");
    const nlohmann::json base = j.value("base", nlohmann::json::object());
    for (const auto& c : j.at("configs")) {
      nlohmann::json merged = base;
      nlohmann::json patch = c;
      const std::string name = patch.at("name");
      patch.erase("name");
      merged.merge_patch(patch);
      s.entries.push_back({name, train_config_from_json(merged)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed sweep: ") + e.what());
  }
  if (s.entries.empty()) throw ConfigError("sweep has no configs");
  if (s.seeds.empty()) throw ConfigError("sweep has no seeds");
  return s;
}

Sweep load_sweep(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open sweep " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("cannot parse sweep " + path + ": " + e.what());
  }
  return sweep_from_json(j);
}

void summarize_row(AblationRow& row) {
  std::vector<const EvalReport*> ok;
  for (const auto& r : row.runs)
    if (r.report) ok.push_back(&*r.report);
  row.mean.reset();
  row.stddev.reset();
  row.bin_means.clear();
  row.mean_coverage.reset();
  if (ok.empty()) return;
  double sum = 0.0;
  for (const auto* r : ok) sum += r->accuracy;
  const double mean = sum / ok.size();
  double ss = 0.0;
  for (const auto* r : ok) ss += (r->accuracy - mean) * (r->accuracy - mean);
  row.mean = mean;
  row.stddev = ok.size() > 1 ? std::sqrt(ss / (ok.size() - 1)) : 0.0;
  for (std::size_t b = 0; b < ok[0]->length_bins.size(); ++b) {
    double s = 0.0;
    int n = 0;
    for (const auto* r : ok) {
      if (b < r->length_bins.size() && r->length_bins[b].accuracy) {
        s += *r->length_bins[b].accuracy;
        ++n;
      }
    }
    row.bin_means.emplace_back(ok[0]->length_bins[b].name, n > 0 ? std::optional<double>(s / n) : std::nullopt);
  }
  double cov = 0.0;
  int nc = 0;
  for (const auto* r : ok)
    if (r->mean_coverage) {
      cov += *r->mean_coverage;
      ++nc;
    }
  if (nc > 0) row.mean_coverage = cov / nc;
}

AblationTable ablate(const Sweep& sweep, const SweepRunner& runner,
                     const std::function<void(const std::string&)>& log) {
  SweepRunner run = runner;
  std::vector<data::GroundingSample> train_set, eval_set;
  if (!run) {
    if (sweep.data_dir.empty()) throw ConfigError("sweep data_dir is not set");
    train_set = data::read_dataset((fs::path(sweep.data_dir) / "train.jsonl").string());
    eval_set = data::read_dataset((fs::path(sweep.data_dir) / (sweep.eval_split + ".jsonl")).string());
    run = [&](const TrainConfig& cfg, std::uint64_t) {
      auto trained = train(cfg, train_set);
      return evaluate(*trained.model, eval_set);
    };
  }
  AblationTable table;
  for (const auto& entry : sweep.entries) {
    AblationRow row;
    row.name = entry.name;
    row.config = entry.config;
    for (auto seed : sweep.seeds) {
      TrainConfig cfg = entry.config;
      cfg.seed = seed;
      if (cfg.data_dir.empty()) cfg.data_dir = sweep.data_dir;
      if (!cfg.out_dir.empty()) cfg.out_dir = (fs::path(cfg.out_dir) / entry.name / ("seed" + std::to_string(seed))).string();
      SeedRun sr;
      sr.seed = seed;
      try {
        sr.report = run(cfg, seed);
        if (log) log(entry.name + " seed " + std::to_string(seed) + ": acc " + std::to_string(sr.report->accuracy));
      } catch (const std::exception& e) {
        sr.error = e.what();
        if (log) log(entry.name + " seed " + std::to_string(seed) + " failed: " + sr.error);
      }
      row.runs.push_back(std::move(sr));
    }
    summarize_row(row);
    table.rows.push_back(std::move(row));
  }
  return table;
}

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

template <typename J>
std::optional<double> opt_from(const J& j) {
  if (j.is_null()) return std::nullopt;
  return j.template get<double>();
}

}  // namespace

json to_json(const AblationTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    json runs = json::array();
    for (const auto& s : r.runs) {
      json jr{{"seed", s.seed}};
      jr["report"] = s.report ? to_json(*s.report) : json(nullptr);
      if (!s.error.empty()) jr["error"] = s.error;
      runs.push_back(jr);
    }
    json bins = json::array();
    for (const auto& [name, v] : r.bin_means) bins.push_back({{"name", name}, {"accuracy", opt(v)}});
    rows.push_back({{"name", r.name},
                    {"strategy", to_string(r.config.model.strategy)},
                    {"rounds", r.config.model.rounds},
                    {"reg_weight", r.config.reg_weight},
                    {"convlstm", r.config.model.convlstm},
                    {"mean", opt(r.mean)},
                    {"std", opt(r.stddev)},
                    {"bin_means", bins},
                    {"mean_coverage", opt(r.mean_coverage)},
                    {"runs", runs}});
  }
  return {{"rows", rows}};
}

AblationTable ablation_table_from_json(const nlohmann::json& j) {
  AblationTable t;
  try {
    for (const auto& jr : j.at("rows")) {
      AblationRow r;
      r.name = jr.at("name");
      r.config.model.strategy = parse_strategy(jr.at("strategy"));
      r.config.model.rounds = jr.at("rounds");
      r.config.reg_weight = jr.at("reg_weight");
      r.config.model.convlstm = jr.value("convlstm", false);
      r.mean = opt_from(jr.at("mean"));
      r.stddev = opt_from(jr.at("std"));
      for (const auto& b : jr.at("bin_means")) r.bin_means.emplace_back(b.at("name"), opt_from(b.at("accuracy")));
      r.mean_coverage = opt_from(jr.at("mean_coverage"));
      for (const auto& s : jr.at("runs")) {
        SeedRun sr;
        sr.seed = s.at("seed");
        if (!s.at("report").is_null()) sr.report = eval_report_from_json(s.at("report"));
        sr.error = s.value("error", "");
        r.runs.push_back(std::move(sr));
      }
      t.rows.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed ablation table: ") + e.what());
  }
  return t;
}

}  // namespace resq
