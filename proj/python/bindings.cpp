#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "shike/config.hpp"
#include "shike/errors.hpp"
#include "shike/eval.hpp"
#include "shike/experiments.hpp"
#include "shike/losses.hpp"
#include "shike/model.hpp"
#include "shike/train.hpp"

namespace py = pybind11;
using nlohmann::json;
using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

namespace {

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_py(const py::object& o) {
  return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

shike::RunConfig config_from(const py::object& o) {
  if (o.is_none()) {
    shike::RunConfig rc;
    rc.sync_model_to_data();
    return rc;
  }
  return shike::RunConfig::from_json(from_py(o));
}

Array to_array(const shike::Tensor& t) {
  Array a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.values().begin(), t.values().end(), a.mutable_data());
  return a;
}

shike::Tensor to_tensor(const Array& a) {
  shike::Shape shape(a.shape(), a.shape() + a.ndim());
  return shike::Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array matrix(const shike::ExpertLogits& rows) {
  const std::size_t m = rows.size(), c = m ? rows.front().size() : 0;
  Array a({m, c});
  auto v = a.mutable_unchecked<2>();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < c; ++j) v(i, j) = rows[i][j];
  return a;
}

shike::ExpertLogits expert_logits(const Array& a) {
  if (a.ndim() == 1) return {std::vector<double>(a.data(), a.data() + a.size())};
  if (a.ndim() != 2) throw shike::ShapeError("expert logits must be [M, C]");
  shike::ExpertLogits out(a.shape(0));
  for (py::ssize_t m = 0; m < a.shape(0); ++m) out[m].assign(a.data(m, 0), a.data(m, 0) + a.shape(1));
  return out;
}

py::tuple loss_tuple(const shike::LossValue& l) { return py::make_tuple(l.value, matrix(l.grad)); }

std::vector<shike::DecoupledLogits> decouple(const shike::ExpertLogits& z, std::size_t label) {
  std::vector<shike::DecoupledLogits> d;
  for (const auto& row : z) d.push_back(shike::decouple_logits(row, label));
  return d;
}

std::vector<shike::Tensor> tensors(const std::vector<Array>& arrays) {
  std::vector<shike::Tensor> out;
  for (const auto& a : arrays) out.push_back(to_tensor(a));
  return out;
}

shike::ClassDivision division_of(const std::vector<std::size_t>& counts) {
  return shike::split_divisions(shike::LongTailSpec::from_counts(counts));
}

py::dict dataset_dict(const shike::LabeledDataset& ds) {
  py::dict d;
  d["inputs"] = to_array(ds.inputs);
  d["labels"] = ds.labels;
  d["counts"] = ds.spec.counts;
  return d;
}

}  // namespace

PYBIND11_MODULE(_shike, m) {
  m.doc() = "Long-tailed mixture-of-experts losses, training and diagnostics";

  auto base = py::register_exception<shike::Error>(m, "ShikeError", PyExc_RuntimeError);
  py::register_exception<shike::InvalidArgument>(m, "InvalidArgument", base);
  py::register_exception<shike::ShapeError>(m, "ShapeError", base);
  py::register_exception<shike::ConfigError>(m, "ConfigError", base);
  py::register_exception<shike::FormatError>(m, "FormatError", base);
  py::register_exception<shike::NumericError>(m, "NumericError", base);

  m.def("softmax", [](std::vector<double> z, double tau) { return shike::softmax(z, tau); }, py::arg("z"),
        py::arg("tau") = 1.0);

  m.def(
      "decouple_logits",
      [](std::vector<double> z, std::size_t label) {
        const auto d = shike::decouple_logits(z, label);
        py::dict out;
        out["target"] = d.target;
        out["nontarget"] = d.nontarget;
        out["classes"] = d.index_map;
        return out;
      },
      py::arg("logits"), py::arg("label"));

  m.def(
      "grand_teacher",
      [](const Array& z, std::size_t label) {
        const auto t = shike::elect_grand_teacher(decouple(expert_logits(z), label));
        py::dict out;
        out["logits"] = t.logits;
        out["consensus_class"] = t.index_map.at(t.consensus_index);
        out["mean"] = t.mean;
        out["max"] = t.max;
        out["classes"] = t.index_map;
        return out;
      },
      py::arg("logits"), py::arg("label"), "Distillation target over the non-target classes of one sample.");

  m.def(
      "loss_ce",
      [](const Array& z, std::size_t label, const std::string& reduction) {
        if (reduction != "sum" && reduction != "mean") throw shike::InvalidArgument("reduction must be sum or mean");
        return loss_tuple(shike::loss_ce(expert_logits(z), label,
                                         reduction == "sum" ? shike::ExpertReduction::sum
                                                            : shike::ExpertReduction::mean));
      },
      py::arg("logits"), py::arg("label"), py::arg("reduction") = "sum", "Returns (value, grad [M, C]).");
  m.def(
      "loss_bsce",
      [](const Array& z, std::size_t label, std::vector<std::size_t> counts) {
        return loss_tuple(shike::loss_bsce(expert_logits(z), label, counts));
      },
      py::arg("logits"), py::arg("label"), py::arg("counts"));
  m.def(
      "loss_mutual", [](const Array& z, double tau) { return loss_tuple(shike::loss_mutual(expert_logits(z), tau)); },
      py::arg("logits"), py::arg("tau") = 1.0);
  m.def(
      "loss_nt",
      [](const Array& z, std::size_t label, double tau) {
        const auto d = decouple(expert_logits(z), label);
        return loss_tuple(shike::loss_nt(shike::elect_grand_teacher(d), d, tau));
      },
      py::arg("logits"), py::arg("label"), py::arg("tau") = 1.0);

  m.def("make_longtail_counts", &shike::make_longtail_counts, py::arg("num_classes"), py::arg("n_max"),
        py::arg("imbalance_factor"));
  m.def(
      "split_divisions",
      [](const std::vector<std::size_t>& counts) {
        const auto d = division_of(counts);
        py::dict out;
        out["many"] = d.many;
        out["medium"] = d.medium;
        out["few"] = d.few;
        return out;
      },
      py::arg("counts"));
  m.def("assign_depths", &shike::assign_depths, py::arg("experts"), py::arg("stages"));
  m.def("parse_arrangement", &shike::parse_arrangement, py::arg("arrangement"), py::arg("stages"));

  m.def("default_config", [] { return to_py(config_from(py::none()).to_json()); });
  m.def(
      "build_datasets",
      [](const py::object& config) {
        auto [train, test] = shike::build_datasets(config_from(config).data);
        return py::make_tuple(dataset_dict(train), dataset_dict(test));
      },
      py::arg("config") = py::none(), "Returns (train, test) dicts with inputs, labels and training counts.");

  m.def(
      "evaluate_logits",
      [](const std::vector<Array>& logits, const std::vector<std::size_t>& labels,
         const std::vector<std::size_t>& counts) {
        return to_py(shike::evaluate_logits(tensors(logits), labels, counts.size(), division_of(counts)).to_json());
      },
      py::arg("expert_logits"), py::arg("labels"), py::arg("counts"));
  m.def(
      "hardest_negative",
      [](const std::vector<Array>& logits, const std::vector<std::size_t>& labels, std::size_t bins,
         const std::string& source, std::size_t expert) {
        if (source != "ensemble" && source != "expert")
          throw shike::InvalidArgument("source must be ensemble or expert");
        const auto h = shike::hardest_negative_hist_logits(
            tensors(logits), labels, bins,
            source == "ensemble" ? shike::NegativeSource::ensemble : shike::NegativeSource::expert, expert);
        json j = h.to_json();
        j["fraction_above_half"] = h.fraction_above(0.5);
        return to_py(j);
      },
      py::arg("expert_logits"), py::arg("labels"), py::arg("bins") = 20, py::arg("source") = "ensemble",
      py::arg("expert") = 0);

  py::class_<shike::ShikeModel>(m, "Model")
      .def(py::init([](const py::object& config) { return shike::ShikeModel(config_from(config).model); }),
           py::arg("config") = py::none())
      .def_static(
          "load", [](const std::filesystem::path& path) { return std::move(shike::load_checkpoint(path).model); },
          py::arg("path"))
      .def_property_readonly("num_experts", &shike::ShikeModel::num_experts)
      .def_property_readonly("num_classes", &shike::ShikeModel::num_classes)
      .def_property_readonly("taps", &shike::ShikeModel::taps)
      .def(
          "predict",
          [](const shike::ShikeModel& model, const Array& x) {
            std::vector<Array> out;
            for (const auto& t : shike::predict_logits(model, to_tensor(x))) out.push_back(to_array(t));
            return out;
          },
          py::arg("inputs"), "Per-expert logits [N, C], inference mode.")
      .def("parameter_count", [](const shike::ShikeModel& model) {
        std::size_t n = 0;
        for (const auto& [name, p] : model.state().params) n += p->value.size();
        return n;
      });

  m.def(
      "train",
      [](const py::object& config, const std::optional<std::filesystem::path>& checkpoint_dir) {
        const shike::RunConfig rc = config_from(config);
        auto [train, test] = shike::build_datasets(rc.data);
        const auto division = shike::split_divisions(train.spec);
        shike::TrainState state{shike::ShikeModel(rc.model)};
        {
          py::gil_scoped_release release;
          shike::run_stage1(state, train, rc.train);
        }
        if (checkpoint_dir) {
          std::filesystem::create_directories(*checkpoint_dir);
          shike::save_checkpoint(state, *checkpoint_dir / "stage1.ckpt");
        }
        const auto r1 = shike::evaluate(state.model, test, division);
        std::optional<shike::TrainState> s2;
        {
          py::gil_scoped_release release;
          s2.emplace(shike::train_stage2(std::move(state), train, rc.train));
        }
        if (checkpoint_dir) shike::save_checkpoint(*s2, *checkpoint_dir / "stage2.ckpt");
        const auto r2 = shike::evaluate(s2->model, test, division);
        json history = json::array();
        for (const auto& h : s2->history)
          history.push_back({{"epoch", h.epoch},
                             {"stage", shike::stage_name(h.stage)},
                             {"lr", h.lr},
                             {"L_ce", h.ce},
                             {"L_nt", h.nt},
                             {"L_mu", h.mu},
                             {"total", h.total},
                             {"train_accuracy", h.train_accuracy}});
        return to_py({{"stage1", r1.to_json()}, {"stage2", r2.to_json()}, {"history", history}});
      },
      py::arg("config") = py::none(), py::arg("checkpoint_dir") = py::none(),
      "Both training stages on the configured dataset; returns reports and the epoch log.");

  m.def(
      "evaluate_checkpoint",
      [](const std::filesystem::path& path, const py::object& config) {
        const shike::RunConfig rc = config_from(config);
        auto [train, test] = shike::build_datasets(rc.data);
        const auto state = shike::load_checkpoint(path, train.spec.num_classes);
        return to_py(shike::evaluate(state.model, test, shike::split_divisions(train.spec)).to_json());
      },
      py::arg("path"), py::arg("config") = py::none());

  m.def(
      "ablation_rows",
      [] {
        std::vector<std::string> out;
        for (const auto& f : shike::ablation_rows()) out.push_back(f.label());
        return out;
      },
      "Labels of the component ablation rows, baseline first.");
  m.def(
      "run_ablation",
      [](const py::object& config, const std::vector<std::size_t>& rows, std::size_t seeds) {
        const auto all = shike::ablation_rows();
        std::vector<shike::ComponentFlags> flags;
        for (auto i : rows) flags.push_back(all.at(i));
        const shike::RunConfig base = config_from(config);
        std::vector<shike::AblationRow> table;
        {
          py::gil_scoped_release release;
          table = shike::ablation_table(base, flags, seeds);
        }
        json out = json::array();
        for (const auto& r : table) out.push_back(shike::to_json(r));
        return to_py(out);
      },
      py::arg("config"), py::arg("rows"), py::arg("seeds") = 5);
}
