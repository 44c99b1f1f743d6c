#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "vigilnet/data.hpp"
#include "vigilnet/errors.hpp"
#include "vigilnet/network.hpp"
#include "vigilnet/tensor.hpp"
#include "vigilnet/train.hpp"

namespace py = pybind11;
using namespace vigilnet;

namespace {

using FloatArray =
    py::array_t<float, py::array::c_style | py::array::forcecast>;
using ByteArray =
    py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Tensor tensor_from_array(const FloatArray& arr) {
  std::vector<int> shape(static_cast<std::size_t>(arr.ndim()));
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) {
    shape[static_cast<std::size_t>(i)] = static_cast<int>(arr.shape(i));
  }
  Tensor t(shape);
  std::copy(arr.data(), arr.data() + t.size(), t.data());
  return t;
}

py::array_t<float> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> arr(shape);
  std::copy(t.data(), t.data() + t.size(), arr.mutable_data());
  return arr;
}

py::tuple record_to_py(const data::VideoRecord& rec) {
  ByteArray frames({rec.frames, rec.height, rec.width});
  std::copy(rec.pixels.begin(), rec.pixels.end(), frames.mutable_data());
  return py::make_tuple(frames, rec.label);
}

data::VideoRecord record_from_py(const py::handle& obj) {
  const auto pair = obj.cast<py::tuple>();
  if (pair.size() != 2) {
    throw ConfigError("a record is a (frames, label) pair");
  }
  const auto frames = pair[0].cast<ByteArray>();
  if (frames.ndim() != 3) {
    throw ShapeError("record frames must be a [frames, height, width] array");
  }
  data::VideoRecord rec;
  rec.frames = static_cast<int>(frames.shape(0));
  rec.height = static_cast<int>(frames.shape(1));
  rec.width = static_cast<int>(frames.shape(2));
  rec.label = pair[1].cast<int>();
  rec.pixels.assign(frames.data(), frames.data() + frames.size());
  return rec;
}

std::vector<data::VideoRecord> records_from_py(const py::iterable& records) {
  std::vector<data::VideoRecord> out;
  for (const auto& obj : records) out.push_back(record_from_py(obj));
  return out;
}

py::list records_to_py(const std::vector<data::VideoRecord>& records) {
  py::list out;
  for (const auto& rec : records) out.append(record_to_py(rec));
  return out;
}

net::NetworkConfig make_config(const std::string& variant, double multiplier,
                               int frames, int spatial, int classes) {
  net::NetworkConfig cfg;
  cfg.variant = net::variant_from_string(variant);
  cfg.depth_multiplier = multiplier;
  cfg.frames = frames;
  cfg.spatial = spatial;
  cfg.classes = classes;
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_vigilnet, m) {
  m.doc() =
      "3D depthwise-separable video classifier: model building, inference, "
      "weight files and the synthetic drowsiness dataset";

  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ShapeError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const ConfigError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const IoError& e) {
      PyErr_SetString(PyExc_OSError, e.what());
    }
  });

  py::class_<net::Model>(m, "Model")
      .def_property_readonly(
          "variant",
          [](const net::Model& model) {
            return net::to_string(model.config.variant);
          })
      .def_property_readonly(
          "multiplier",
          [](const net::Model& model) { return model.config.depth_multiplier; })
      .def_property_readonly(
          "frames", [](const net::Model& model) { return model.config.frames; })
      .def_property_readonly(
          "spatial",
          [](const net::Model& model) { return model.config.spatial; })
      .def_property_readonly(
          "classes",
          [](const net::Model& model) { return model.config.classes; })
      .def_readonly("inference_only", &net::Model::inference_only)
      .def_readonly("bn_folded", &net::Model::bn_folded)
      .def("parameter_names",
           [](net::Model& model) {
             std::vector<std::string> names;
             for (const auto& p : model.parameters()) names.push_back(p.name);
             return names;
           })
      .def("state_tensor_count", &net::Model::state_tensor_count)
      .def(
          "forward",
          [](const net::Model& model, const FloatArray& input) {
            const Tensor x = tensor_from_array(input);
            Tensor y;
            {
              py::gil_scoped_release release;
              y = model.forward(x);
            }
            return array_from_tensor(y);
          },
          py::arg("input"),
          "Logits for one [h,w,frames,1] clip or an [n,h,w,frames,1] batch")
      .def(
          "predict",
          [](const net::Model& model, const FloatArray& input) {
            const Tensor x = tensor_from_array(input);
            std::vector<float> probs;
            {
              py::gil_scoped_release release;
              probs = model.predict(x);
            }
            return probs;
          },
          py::arg("input"), "Softmax class probabilities for one clip");

  m.def(
      "build_model",
      [](const std::string& variant, double multiplier, int frames,
         int spatial, int classes, std::uint64_t seed) {
        return net::build_model(
            make_config(variant, multiplier, frames, spatial, classes), seed);
      },
      py::arg("variant") = "ours_early", py::arg("multiplier") = 0.35,
      py::arg("frames") = 10, py::arg("spatial") = 96, py::arg("classes") = 2,
      py::arg("seed") = 42);
  m.def("strip_for_inference", &net::strip_for_inference, py::arg("model"),
        py::arg("fold_bn") = false);
  m.def("save_weights", &net::save_weights, py::arg("model"), py::arg("path"));
  m.def("load_weights", &net::load_weights, py::arg("path"));
  m.def("count_params", &net::count_params, py::arg("model"));
  m.def("count_macs", &net::count_flops, py::arg("model"),
        "Multiply-accumulates of one forward pass on a single sample");
  m.def(
      "shape_trace",
      [](const net::Model& model) {
        py::list rows;
        for (const auto& row : net::shape_trace(model)) {
          py::dict d;
          d["input_dims"] = row.input_dims;
          d["op"] = row.op;
          d["t"] = row.t;
          d["c"] = row.c;
          d["n"] = row.n;
          d["stride"] = row.stride;
          rows.append(d);
        }
        return rows;
      },
      py::arg("model"));
  m.def("scale_channels", &net::scale_channels, py::arg("channels"),
        py::arg("multiplier"),
        "Channel count under a width multiplier, rounded to multiples of 8");

  m.def(
      "generate_synthetic",
      [](int count, std::uint64_t seed, int frames, int height, int width) {
        return records_to_py(
            data::generate_synthetic(count, seed, frames, height, width));
      },
      py::arg("count"), py::arg("seed"), py::arg("frames") = 10,
      py::arg("height") = 240, py::arg("width") = 320,
      "Synthetic blink-vs-microsleep clips as (frames_u8, label) pairs");
  m.def(
      "write_records",
      [](const py::iterable& records, const std::string& path) {
        data::write_records(records_from_py(records), path);
      },
      py::arg("records"), py::arg("path"));
  m.def(
      "read_records",
      [](const std::string& path) {
        return records_to_py(data::read_records(path));
      },
      py::arg("path"));
  m.def(
      "evaluate",
      [](const net::Model& model, const py::iterable& records) {
        const auto recs = records_from_py(records);
        py::gil_scoped_release release;
        return train::evaluate(model, recs);
      },
      py::arg("model"), py::arg("records"),
      "Accuracy of center-window predictions over (frames_u8, label) pairs");
}
