#include <filesystem>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "resq/errors.hpp"
#include "resq/harness.hpp"
#include "resq/viz.hpp"

namespace py = pybind11;
using namespace resq;
namespace fs = std::filesystem;

namespace {

py::object to_py(const nlohmann::ordered_json& j) { return py::module_::import("json").attr("loads")(j.dump()); }
py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_py(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

using BoxTuple = std::tuple<double, double, double, double>;

data::Box to_box(const BoxTuple& b) { return {std::get<0>(b), std::get<1>(b), std::get<2>(b), std::get<3>(b)}; }
BoxTuple from_box(const data::Box& b) { return {b.x, b.y, b.w, b.h}; }

Tensor matrix(const std::vector<std::vector<double>>& rows) {
  const int n = static_cast<int>(rows.size());
  const int k = n ? static_cast<int>(rows[0].size()) : 0;
  Tensor t({n, k});
  for (int i = 0; i < n; ++i) {
    if (static_cast<int>(rows[i].size()) != k) throw ShapeMismatchError("ragged attention matrix");
    for (int j = 0; j < k; ++j) t[static_cast<std::size_t>(i) * k + j] = rows[i][j];
  }
  return t;
}

py::dict sample_dict(const data::GroundingSample& s) {
  py::dict d;
  d["id"] = s.id;
  d["tokens"] = s.tokens;
  d["bbox"] = from_box(s.bbox);
  d["query_length"] = s.meta.query_length;
  d["complexity_tier"] = s.meta.complexity_tier;
  d["attribute_tags"] = s.meta.attribute_tags;
  d["image_size"] = s.image.width;
  return d;
}

}  // namespace

PYBIND11_MODULE(resq, m) {
  m.doc() = "Recursive sub-query grounding: data generation, training, evaluation and visualization";

  py::register_exception<Error>(m, "ResqError");

  m.def("iou", [](const BoxTuple& a, const BoxTuple& b) { return grounding::iou(to_box(a), to_box(b)); },
        py::arg("a"), py::arg("b"), "IoU of two (x, y, w, h) boxes.");

  m.def(
      "compute_history",
      [](const std::vector<std::vector<double>>& previous, int length) { return core::compute_history(previous, length); },
      py::arg("previous_alphas"), py::arg("length"),
      "1 - min(sum of earlier attention, 1) per word.");
  m.def("reg_diversity", [](const std::vector<std::vector<double>>& A) { return core::reg_diversity(matrix(A)); },
        py::arg("attention"), "Diversity penalty of an [N, K] attention matrix.");
  m.def("reg_coverage", [](const std::vector<std::vector<double>>& A) { return core::reg_coverage(matrix(A)); },
        py::arg("attention"), "Coverage penalty of an [N, K] attention matrix.");

  m.def(
      "decode_box",
      [](const std::tuple<double, double, double, double>& t, int i, int j, const std::pair<double, double>& anchor,
         int stride) {
        return from_box(grounding::decode_box({std::get<0>(t), std::get<1>(t), std::get<2>(t), std::get<3>(t)}, i, j,
                                              {anchor.first, anchor.second}, stride));
      },
      py::arg("offsets"), py::arg("i"), py::arg("j"), py::arg("anchor"), py::arg("stride"));
  m.def(
      "encode_target",
      [](const BoxTuple& box, int i, int j, const std::pair<double, double>& anchor, int stride) {
        const auto t = grounding::encode_target(to_box(box), i, j, {anchor.first, anchor.second}, stride);
        return std::make_tuple(t.tx, t.ty, t.tw, t.th);
      },
      py::arg("box"), py::arg("i"), py::arg("j"), py::arg("anchor"), py::arg("stride"));

  m.def(
      "generate_dataset",
      [](const std::string& dir, int train, int val, int test, std::uint64_t seed, int image_size) {
        data::GenerationConfig g;
        g.image_size = image_size;
        py::gil_scoped_release release;
        data::generate_dataset(dir, {train, val, test}, seed, g);
      },
      py::arg("out_dir"), py::arg("train") = 2000, py::arg("val") = 500, py::arg("test") = 1000,
      py::arg("seed") = 0, py::arg("image_size") = 64);
  m.def(
      "read_dataset",
      [](const std::string& manifest) {
        py::list out;
        for (const auto& s : data::read_dataset(manifest)) out.append(sample_dict(s));
        return out;
      },
      py::arg("manifest"), "Samples of a split manifest, without pixel data.");

  m.def("default_config", [] { return to_py(to_json(TrainConfig{})); }, "Training configuration defaults.");

  m.def(
      "train",
      [](const py::dict& config) {
        const TrainConfig cfg = train_config_from_json(from_py(config));
        TrainedModel trained;
        {
          py::gil_scoped_release release;
          trained = train(cfg);
        }
        py::dict out;
        out["checkpoint"] = trained.result.last_checkpoint;
        out["steps"] = trained.result.curve.size();
        py::list losses;
        for (const auto& s : trained.result.curve) losses.append(s.loss.total);
        out["losses"] = losses;
        return out;
      },
      py::arg("config"), "Trains from a configuration dict; returns the checkpoint path and loss curve.");

  m.def(
      "evaluate",
      [](const std::string& ckpt, const std::string& data_dir, const std::string& split) {
        nlohmann::ordered_json report;
        {
          py::gil_scoped_release release;
          auto model = load_model(ckpt);
          const auto samples = data::read_dataset((fs::path(data_dir) / (split + ".jsonl")).string());
          report = to_json(evaluate(*model, samples));
        }
        return to_py(report);
      },
      py::arg("checkpoint"), py::arg("data_dir"), py::arg("split") = "test");

  m.def(
      "relative_gain",
      [](double ours, double base) { return relative_gain(ours, base); }, py::arg("ours"), py::arg("base"),
      "(ours - base) / base, or None when base is zero.");

  m.def(
      "gradcheck",
      [](const std::string& strategy, bool convlstm, std::uint64_t seed) {
        GradcheckOptions opt;
        opt.seed = seed;
        nlohmann::ordered_json report;
        {
          py::gil_scoped_release release;
          report = to_json(gradcheck(tiny_config(parse_strategy(strategy), convlstm), opt));
        }
        return to_py(report);
      },
      py::arg("strategy") = "recursive", py::arg("convlstm") = false, py::arg("seed") = 0);

  m.def(
      "visualize",
      [](const std::string& ckpt, const std::string& sample_id, const std::string& out_dir, std::string data_dir) {
        Checkpoint meta;
        auto model = load_model(ckpt, &meta);
        if (data_dir.empty()) data_dir = meta.config.data_dir;
        for (const char* split : {"test", "val", "train"}) {
          const fs::path manifest = fs::path(data_dir) / (std::string(split) + ".jsonl");
          if (!fs::exists(manifest)) continue;
          for (const auto& s : data::read_dataset(manifest.string()))
            if (s.id == sample_id) return to_py(viz::sidecar_json(viz::visualize(*model, s, out_dir)));
        }
        throw ConfigError("sample '" + sample_id + "' not found under " + data_dir);
      },
      py::arg("checkpoint"), py::arg("sample_id"), py::arg("out_dir"), py::arg("data_dir") = "",
      "Writes per-round heatmaps, an overlay and a sidecar; returns the sidecar.");
}
