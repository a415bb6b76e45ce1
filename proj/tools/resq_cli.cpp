#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "resq/errors.hpp"
#include "resq/harness.hpp"
#include "resq/viz.hpp"

namespace fs = std::filesystem;
using namespace resq;

namespace {

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  try {
    return nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("cannot parse " + path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << text;
}

const data::GroundingSample* find_sample(const std::vector<data::GroundingSample>& samples, const std::string& id) {
  for (const auto& s : samples)
    if (s.id == id) return &s;
  return nullptr;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recursive sub-query grounding on synthetic shape scenes"};
  app.require_subcommand(1);

  // datagen
  auto* datagen = app.add_subcommand("datagen", "Generate the synthetic train/val/test splits");
  std::string dg_out;
  data::SplitSizes sizes;
  data::GenerationConfig gen;
  std::uint64_t dg_seed = 0;
  datagen->add_option("--out", dg_out, "Output directory")->required();
  datagen->add_option("--train", sizes.train, "Training samples")->capture_default_str();
  datagen->add_option("--val", sizes.val, "Validation samples")->capture_default_str();
  datagen->add_option("--test", sizes.test, "Test samples")->capture_default_str();
  datagen->add_option("--image-size", gen.image_size, "Image side in pixels")->capture_default_str();
  datagen->add_option("--seed", dg_seed, "Generation seed")->capture_default_str();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON config");
  std::string train_config;
  train_cmd->add_option("--config", train_config, "Training config (JSON)")->required()->check(CLI::ExistingFile);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  std::string ev_ckpt, ev_data, ev_report, ev_split = "test", ev_preds;
  eval_cmd->add_option("--ckpt", ev_ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--data", ev_data, "Dataset directory")->required();
  eval_cmd->add_option("--report", ev_report, "Output report (JSON)")->required();
  eval_cmd->add_option("--split", ev_split, "Split name")->capture_default_str();
  eval_cmd->add_option("--predictions", ev_preds, "Optional per-sample prediction dump (JSONL)");

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "Run a sweep of configs over seeds");
  std::string sweep_path, ab_out = "ablation.json";
  ablate_cmd->add_option("--sweep", sweep_path, "Sweep file (JSON)")->required()->check(CLI::ExistingFile);
  ablate_cmd->add_option("--out", ab_out, "Output table (JSON); a .txt rendering is written alongside")
      ->capture_default_str();

  // gradcheck
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every parameter gradient");
  std::string gc_strategy = "recursive", gc_out;
  bool gc_convlstm = false;
  std::uint64_t gc_seed = 0;
  gc_cmd->add_option("--strategy", gc_strategy, "Sub-query strategy")->capture_default_str();
  gc_cmd->add_flag("--convlstm", gc_convlstm, "Aggregate rounds with a ConvLSTM");
  gc_cmd->add_option("--seed", gc_seed, "Seed")->capture_default_str();
  gc_cmd->add_option("--out", gc_out, "Optional JSON report");

  // viz
  auto* viz_cmd = app.add_subcommand("viz", "Export per-round attention and heatmaps for one sample");
  std::string vz_ckpt, vz_sample, vz_out, vz_data;
  viz_cmd->add_option("--ckpt", vz_ckpt, "Checkpoint file")->required();
  viz_cmd->add_option("--sample", vz_sample, "Sample id")->required();
  viz_cmd->add_option("--out", vz_out, "Output directory")->required();
  viz_cmd->add_option("--data", vz_data, "Dataset directory (defaults to the checkpoint's data_dir)");

  // report
  auto* report_cmd = app.add_subcommand("report", "Render an evaluation report or ablation table");
  std::string rp_in, rp_base, rp_text, rp_chart, rp_json;
  report_cmd->add_option("--input", rp_in, "Report or ablation table (JSON)")->required()->check(CLI::ExistingFile);
  report_cmd->add_option("--base", rp_base, "Baseline report for relative gains")->check(CLI::ExistingFile);
  report_cmd->add_option("--text", rp_text, "Write the text table here instead of stdout");
  report_cmd->add_option("--chart", rp_chart, "Bar chart image (PPM)");
  report_cmd->add_option("--json", rp_json, "Rendered rows as JSON");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*datagen) {
      data::generate_dataset(dg_out, sizes, dg_seed, gen);
      std::cout << "wrote " << sizes.train << "/" << sizes.val << "/" << sizes.test << " samples to " << dg_out << '\n';
    } else if (*train_cmd) {
      TrainConfig cfg = load_train_config(train_config);
      if (cfg.log_every <= 0) cfg.log_every = 50;
      auto trained = train(cfg, [&](const StepLog& s) {
        if ((s.step + 1) % cfg.log_every == 0)
          std::cout << "epoch " << s.epoch << " step " << s.step + 1 << " lr " << s.lr << " loss " << s.loss.total
                    << " (cls " << s.loss.cls << ", reg " << s.loss.reg << ", div " << s.loss.div << ", cover "
                    << s.loss.cover << ")\n";
      });
      if (!trained.result.last_checkpoint.empty())
        std::cout << "checkpoint " << trained.result.last_checkpoint << '\n';
    } else if (*eval_cmd) {
      auto model = load_model(ev_ckpt);
      const auto samples = data::read_dataset((fs::path(ev_data) / (ev_split + ".jsonl")).string());
      std::vector<PredictionRecord> preds;
      const EvalReport report = evaluate(*model, samples, &preds);
      write_text(ev_report, to_json(report).dump(2) + "\n");
      if (!ev_preds.empty()) write_predictions(preds, ev_preds);
      std::cout << viz::render_text(viz::report_view(report));
    } else if (*ablate_cmd) {
      const Sweep sweep = load_sweep(sweep_path);
      const AblationTable table = ablate(sweep, {}, [](const std::string& line) { std::cout << line << std::endl; });
      write_text(ab_out, to_json(table).dump(2) + "\n");
      const std::string text = viz::render_text(viz::ablation_view(table));
      write_text(fs::path(ab_out).replace_extension(".txt").string(), text);
      std::cout << text;
    } else if (*gc_cmd) {
      GradcheckOptions opt;
      opt.seed = gc_seed;
      const auto report = gradcheck(tiny_config(parse_strategy(gc_strategy), gc_convlstm), opt);
      for (const auto& e : report.entries)
        std::cout << (e.pass ? "ok   " : "FAIL ") << e.name << "  max_rel " << e.max_rel_error << "  (" << e.checked
                  << " elements)\n";
      std::cout << (report.pass ? "gradcheck passed" : "gradcheck failed") << '\n';
      if (!gc_out.empty()) write_text(gc_out, to_json(report).dump(2) + "\n");
      return report.pass ? 0 : 1;
    } else if (*viz_cmd) {
      if (!fs::exists(vz_ckpt)) throw Error("checkpoint not found: " + vz_ckpt);
      Checkpoint meta;
      auto model = load_model(vz_ckpt, &meta);
      const std::string dir = vz_data.empty() ? meta.config.data_dir : vz_data;
      if (dir.empty()) throw ConfigError("no dataset directory; pass --data");
      const data::GroundingSample* sample = nullptr;
      std::vector<data::GroundingSample> split;
      for (const char* name : {"test", "val", "train"}) {
        const auto path = fs::path(dir) / (std::string(name) + ".jsonl");
        if (!fs::exists(path)) continue;
        split = data::read_dataset(path.string());
        if ((sample = find_sample(split, vz_sample))) break;
      }
      if (!sample) throw Error("sample " + vz_sample + " not found under " + dir);
      const auto bundle = viz::visualize(*model, *sample, vz_out);
      for (const auto& r : bundle.rounds) {
        std::cout << "round " << r.round << ":";
        for (const auto& [w, a] : r.attention) std::cout << ' ' << w << '=' << viz::format_number(a);
        std::cout << "  argmax cell (" << r.argmax_i << ", " << r.argmax_j << ")\n";
      }
      std::cout << "sidecar " << bundle.sidecar_file << '\n';
    } else if (*report_cmd) {
      const auto j = read_json(rp_in);
      viz::ReportView view;
      EvalReport ours, base;
      if (j.contains("rows")) {
        view = viz::ablation_view(ablation_table_from_json(j));
      } else {
        ours = eval_report_from_json(j);
        if (!rp_base.empty()) base = eval_report_from_json(read_json(rp_base));
        view = viz::report_view(ours, rp_base.empty() ? nullptr : &base);
      }
      const std::string text = viz::render_text(view);
      if (rp_text.empty()) {
        std::cout << text;
      } else {
        write_text(rp_text, text);
      }
      if (!rp_json.empty()) write_text(rp_json, viz::to_json(view).dump(2) + "\n");
      if (!rp_chart.empty()) write_ppm(rp_chart, viz::render_bar_chart(view));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
