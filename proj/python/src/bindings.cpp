#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "maskgen/codec.hpp"
#include "maskgen/dataset.hpp"
#include "maskgen/error.hpp"
#include "maskgen/metrics.hpp"
#include "maskgen/model/decode.hpp"
#include "maskgen/model/train.hpp"
#include "maskgen/pipeline.hpp"

namespace py = pybind11;
using namespace maskgen;

namespace {

using MaskArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

BinaryMask to_mask(const MaskArray& a) {
    if (a.ndim() != 2) throw ValidationError("mask must be a 2-D array");
    const auto h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
    std::vector<std::uint8_t> px(a.data(), a.data() + a.size());
    for (auto& v : px) v = v != 0;
    return {h, w, std::move(px)};
}

py::array_t<bool> from_mask(const BinaryMask& m) {
    py::array_t<bool> out({m.height(), m.width()});
    auto* dst = out.mutable_data();
    for (std::size_t i = 0; i < m.pixels().size(); ++i) dst[i] = m.pixels()[i] != 0;
    return out;
}

RgbImage to_image(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 3 || a.shape(2) != 3) throw ValidationError("image must be an H x W x 3 array");
    RgbImage img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
    const auto* p = a.data();
    for (int r = 0; r < img.height(); ++r)
        for (int c = 0; c < img.width(); ++c, p += 3) img.set(r, c, {p[0], p[1], p[2]});
    return img;
}

py::array_t<std::uint8_t> from_image(const RgbImage& img) {
    py::array_t<std::uint8_t> out({img.height(), img.width(), 3});
    std::copy(img.data().begin(), img.data().end(), out.mutable_data());
    return out;
}

Connectivity connectivity(int n) {
    if (n != 4 && n != 8) throw ValidationError("connectivity must be 4 or 8");
    return n == 4 ? Connectivity::four : Connectivity::eight;
}

// A trained checkpoint ready for inference.
class Segmenter {
public:
    explicit Segmenter(const std::filesystem::path& path) : ckpt_(model::load_checkpoint(path)) {
        if (!ckpt_.codebook) throw ValidationError("checkpoint carries no codebook");
    }

    std::vector<std::int32_t> tokens(const py::array_t<std::uint8_t>& image, const std::string& text,
                                     const std::string& decode, std::uint64_t seed) const {
        Sample s;
        s.image = to_image(image);
        s.instruction = text;
        const auto in = to_sequence(s, text_vocab_, ckpt_.model.vocab, nullptr);
        auto strategy = model::DecodeStrategy::parse(decode);
        strategy.seed = seed;
        py::gil_scoped_release release;
        return model::generate(ckpt_.model, in, strategy);
    }

    py::array_t<bool> segment(const py::array_t<std::uint8_t>& image, const std::string& text,
                              const std::string& decode, std::uint64_t seed) const {
        const auto t = tokens(image, text, decode, seed);
        const auto& c = ckpt_.model.config;
        return from_mask(tokens_to_mask(t, c.grid_rows, c.grid_cols, *ckpt_.codebook));
    }

private:
    model::Checkpoint ckpt_;
    TextVocab text_vocab_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "maskgen core bindings";
    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<RuntimeFailure>(m, "RuntimeFailure", PyExc_RuntimeError);

    m.def("iou", [](const MaskArray& a, const MaskArray& b) { return iou(to_mask(a), to_mask(b)); },
          py::arg("pred"), py::arg("gt"));
    m.def(
        "ahd",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& y) {
            const auto points = [](const auto& a) {
                if (a.ndim() != 2 || a.shape(1) != 2) throw ValidationError("points must be an N x 2 array");
                std::vector<RealPoint> out;
                for (py::ssize_t i = 0; i < a.shape(0); ++i) out.push_back({a.at(i, 0), a.at(i, 1)});
                return out;
            };
            return ahd(points(x), points(y));
        },
        py::arg("x"), py::arg("y"), "Average Hausdorff distance between two N x 2 point sets.");
    m.def(
        "mask_ahd",
        [](const MaskArray& pred, const MaskArray& gt, int conn) {
            return EvalPair::make(to_mask(pred), to_mask(gt), connectivity(conn)).ahd;
        },
        py::arg("pred"), py::arg("gt"), py::arg("connectivity") = 4,
        "Boundary AHD normalized to 256 pixels; None when exactly one mask is empty.");
    m.def(
        "c_iou",
        [](const std::vector<std::pair<MaskArray, MaskArray>>& pairs) {
            std::vector<EvalPair> ps;
            for (const auto& [p, g] : pairs) ps.push_back(EvalPair::make(to_mask(p), to_mask(g)));
            return c_iou(ps);
        },
        py::arg("pairs"));

    m.def(
        "generate_sample",
        [](std::uint64_t seed, const std::string& task) {
            const auto s = generate_sample(make_scene(seed, parse_task(task)));
            py::dict d;
            d["image"] = from_image(s.image);
            d["mask"] = from_mask(s.mask);
            d["instruction"] = s.instruction;
            d["phrase"] = s.phrase;
            return d;
        },
        py::arg("seed"), py::arg("task") = "referring");

    py::class_<Codebook>(m, "Codebook")
        .def_static("load", [](const std::filesystem::path& p) { return load_codebook(p); })
        .def_readonly("size", &Codebook::size)
        .def_readonly("dim", &Codebook::dim)
        .def(
            "encode",
            [](const Codebook& cb, const MaskArray& mask) {
                const auto g = encode_mask(to_mask(mask), cb);
                py::array_t<std::int32_t> out({g.rows, g.cols});
                std::copy(g.indices.begin(), g.indices.end(), out.mutable_data());
                return out;
            },
            py::arg("mask"))
        .def(
            "decode",
            [](const Codebook& cb, const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>& t) {
                if (t.ndim() != 2) throw ValidationError("tokens must be a 2-D array");
                TokenGrid g;
                g.rows = static_cast<int>(t.shape(0));
                g.cols = static_cast<int>(t.shape(1));
                g.indices.assign(t.data(), t.data() + t.size());
                return from_mask(decode_tokens(g, cb));
            },
            py::arg("tokens"));

    py::class_<Segmenter>(m, "Segmenter")
        .def(py::init<std::filesystem::path>(), py::arg("checkpoint"))
        .def("tokens", &Segmenter::tokens, py::arg("image"), py::arg("text"), py::arg("decode") = "greedy",
             py::arg("seed") = 0)
        .def("segment", &Segmenter::segment, py::arg("image"), py::arg("text"), py::arg("decode") = "greedy",
             py::arg("seed") = 0);
}
