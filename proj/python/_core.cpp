#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <optional>

#include "nmd/gradcheck.hpp"
#include "nmd/metrics.hpp"
#include "nmd/noise_model.hpp"
#include "nmd/trainer.hpp"

namespace py = pybind11;
using namespace nmd;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

// Accepts C x H x W (returned with a leading batch axis of 1) or N x C x H x W.
template <typename T>
Tensor<T> to_tensor(const Array<T>& a) {
  if (a.ndim() != 3 && a.ndim() != 4) throw py::value_error("expected a 3-D (CHW) or 4-D (NCHW) array");
  const int off = a.ndim() == 3 ? 1 : 0;
  int d[4] = {1, 1, 1, 1};
  for (py::ssize_t i = 0; i < a.ndim(); ++i) d[i + off] = static_cast<int>(a.shape(i));
  Tensor<T> t({d[0], d[1], d[2], d[3]});
  std::copy(a.data(), a.data() + a.size(), t.data().begin());
  return t;
}

template <typename T>
Array<T> to_array(const Tensor<T>& t, bool squeeze) {
  std::vector<py::ssize_t> shape(t.shape().dims().begin(), t.shape().dims().end());
  if (squeeze && shape.size() == 4 && shape[0] == 1) shape.erase(shape.begin());
  Array<T> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::dict summary_dict(const MetricSummary& s) {
  py::dict d;
  d["count"] = s.count;
  d["psnr_noisy"] = s.psnr_noisy;
  d["psnr_denoised"] = s.psnr_denoised;
  d["ssim_noisy"] = s.ssim_noisy;
  d["ssim_denoised"] = s.ssim_denoised;
  return d;
}

py::dict report_dict(const LossReport& r) {
  py::dict d;
  d["step"] = r.step;
  d["d_loss"] = r.d_loss;
  d["adv"] = r.adv;
  d["content"] = r.content;
  d["feature"] = r.feature;
  d["rec"] = r.rec;
  d["latent"] = r.latent;
  d["decov"] = r.decov;
  d["total"] = r.total;
  return d;
}

// Trainer plus the dataset it was sized for.
class PyTrainer {
 public:
  PyTrainer(const KeyValues& overrides, const std::filesystem::path& data_dir) {
    data_.emplace(load_dataset<float>(data_dir));
    NetConfig net;
    TrainConfig cfg;
    apply_key_values(overrides, net, cfg);
    net.image_channels = data_->layout == Layout::Bayer ? 4 : 3;
    net.num_cameras = data_->num_cameras();
    trainer_.emplace(net, cfg);
  }
  explicit PyTrainer(Trainer<float> t) : trainer_(std::move(t)) {}

  static PyTrainer load(const std::filesystem::path& dir) { return PyTrainer(Trainer<float>::load(dir)); }

  py::list steps(int n) {
    if (!data_) throw py::value_error("trainer was loaded from a checkpoint; call attach_data() first");
    py::list out;
    for (int i = 0; i < n; ++i) {
      LossReport r;
      {
        py::gil_scoped_release release;
        r = trainer_->step(*data_);
      }
      out.append(report_dict(r));
    }
    return out;
  }

  void attach_data(const std::filesystem::path& dir) { data_.emplace(load_dataset<float>(dir)); }

  py::dict evaluate(const std::filesystem::path& dir) {
    const auto data = load_dataset<float>(dir);
    MetricReport rep;
    {
      py::gil_scoped_release release;
      rep = nmd::evaluate(trainer_->generator(), data);
    }
    py::dict d = summary_dict(rep.overall);
    py::dict per;
    for (const auto& [id, s] : rep.per_profile) per[py::int_(id)] = summary_dict(s);
    d["per_profile"] = per;
    return d;
  }

  Array<float> denoise(const Array<float>& noisy, double sigma_r, double sigma_s, int camera_id) {
    const Tensor<float> s = to_tensor(noisy);
    const NetConfig& net = trainer_->net_config();
    const int m = 1 << net.depth;
    if (s.shape().h() % m != 0 || s.shape().w() % m != 0) {
      throw py::value_error("height and width must be multiples of " + std::to_string(m));
    }
    if (s.shape().c() != net.image_channels) {
      throw py::value_error("expected " + std::to_string(net.image_channels) + " channels");
    }
    const CameraProfile prof{camera_id, sigma_r, sigma_s};
    prof.validate();
    const auto one = build_condition<float>(prof, net.num_cameras, s.shape().h(), s.shape().w(), net.blind);
    Tensor<float> cond;
    if (!one.blind()) {
      const Shape& cs = one.maps.shape();
      cond = Tensor<float>({s.shape().n(), cs.c(), cs.h(), cs.w()});
      for (int n = 0; n < s.shape().n(); ++n) {
        std::copy(one.maps.data().begin(), one.maps.data().end(), cond.data().begin() + n * one.maps.size());
      }
    }
    Tensor<float> out;
    {
      py::gil_scoped_release release;
      out = run_denoiser(trainer_->generator(), s, cond);
    }
    return to_array(out, noisy.ndim() == 3);
  }

  void save(const std::filesystem::path& dir) const { trainer_->save(dir); }
  std::uint64_t step_count() const { return trainer_->step_count(); }
  KeyValues config() const { return to_key_values(trainer_->net_config(), trainer_->config()); }

 private:
  std::optional<Dataset<float>> data_;
  std::optional<Trainer<float>> trainer_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Residual-domain denoiser: noise model, metrics and training";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_FloatingPointError);

  m.def(
      "sample_noise",
      [](const Array<double>& clean, double sigma_r, double sigma_s, std::uint64_t seed) {
        const CameraProfile prof{0, sigma_r, sigma_s};
        prof.validate();
        return to_array(sample_noise(to_tensor(clean), prof, seed), clean.ndim() == 3);
      },
      py::arg("clean"), py::arg("sigma_r"), py::arg("sigma_s"), py::arg("seed") = 0,
      "Adds Gaussian noise with variance sigma_r^2 + sigma_s * y.");

  m.def(
      "psnr", [](const Array<double>& a, const Array<double>& b, double peak) { return psnr(to_tensor(a), to_tensor(b), peak); },
      py::arg("a"), py::arg("b"), py::arg("peak") = 1.0);
  m.def(
      "ssim", [](const Array<double>& a, const Array<double>& b) { return ssim(to_tensor(a), to_tensor(b)); },
      py::arg("a"), py::arg("b"));

  m.def(
      "synth",
      [](const std::filesystem::path& out_dir, int count, int patch, const std::vector<std::pair<double, double>>& profiles,
         std::uint64_t seed, int sources, bool bayer, bool srgb) {
        SynthOptions o;
        o.out_dir = out_dir;
        o.count = count;
        o.patch = patch;
        o.seed = seed;
        o.sources = sources;
        o.srgb = srgb;
        o.layout = bayer ? Layout::Bayer : Layout::Rgb;
        for (std::size_t i = 0; i < profiles.size(); ++i) {
          o.profiles.push_back({static_cast<int>(i), profiles[i].first, profiles[i].second});
        }
        synth_dataset(o);
      },
      py::arg("out_dir"), py::arg("count") = 64, py::arg("patch") = 32, py::arg("profiles"), py::arg("seed") = 0,
      py::arg("sources") = 1, py::arg("bayer") = false, py::arg("srgb") = false,
      "Writes a synthetic paired dataset; profiles are (sigma_r, sigma_s) pairs.");

  m.def(
      "gradcheck",
      [](double tolerance, double composed_tolerance) {
        bool ok = true;
        for (const auto& r : check_primitives(tolerance)) ok &= r.passed();
        ok &= gradcheck_composed(1, composed_tolerance, 11).passed();
        ok &= gradcheck_composed(2, composed_tolerance, 11).passed();
        return ok;
      },
      py::arg("tolerance") = 1e-5, py::arg("composed_tolerance") = 1e-3);

  m.def("default_config", [] { return to_key_values(NetConfig{}, TrainConfig{}); });

  py::class_<PyTrainer>(m, "Trainer")
      .def(py::init<const KeyValues&, const std::filesystem::path&>(), py::arg("config"), py::arg("data_dir"))
      .def_static("load", &PyTrainer::load, py::arg("checkpoint_dir"))
      .def("steps", &PyTrainer::steps, py::arg("n"), "Runs n steps; returns one loss dict per step.")
      .def("attach_data", &PyTrainer::attach_data, py::arg("data_dir"))
      .def("evaluate", &PyTrainer::evaluate, py::arg("data_dir"))
      .def("denoise", &PyTrainer::denoise, py::arg("noisy"), py::arg("sigma_r"), py::arg("sigma_s"),
           py::arg("camera_id") = 0)
      .def("save", &PyTrainer::save, py::arg("checkpoint_dir"))
      .def_property_readonly("step_count", &PyTrainer::step_count)
      .def_property_readonly("config", &PyTrainer::config);
}
