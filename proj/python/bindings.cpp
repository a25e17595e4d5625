#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "avstyle/experiment.hpp"

namespace py = pybind11;
using namespace avstyle;

namespace {

py::array_t<float> to_numpy(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<float> arr(shape);
    std::memcpy(arr.mutable_data(), t.data().data(), sizeof(float) * t.data().size());
    return arr;
}

Tensor from_numpy(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
    std::vector<int> shape;
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(static_cast<int>(a.shape(i)));
    std::vector<float> data(a.data(), a.data() + a.size());
    return Tensor::from_data(std::move(shape), std::move(data));
}

std::vector<std::string> default_templates() {
    return {"{}", "a portrait in the style of {}", "a rendering in the style of {}",
            "an avatar with {} appearance"};
}

// Avatar model + parameters + one identity, with the training embedder pair.
struct PyAvatar {
    AvatarConfig cfg;
    AvatarNet net;
    ParamStore params;
    IdentityInput id_in;
    std::vector<Embedder> embedders;
    AugmentationConfig aug;
    uint64_t faces_seed;
    int identity;

    PyAvatar(uint64_t init_seed, uint64_t faces_seed_, int identity_, uint64_t emb_seed_a,
             uint64_t emb_seed_b)
        : net(AvatarConfig{}), faces_seed(faces_seed_), identity(identity_) {
        Rng rng(mix_keys(init_seed, 0x1417));
        params = net.init_params(rng);
        const auto ids = make_identities(faces_seed, identity + 1);
        id_in = identity_maps(ids[static_cast<size_t>(identity)], cfg);
        embedders.emplace_back(EmbedderSpec{EmbedderKind::RandomFeatures, emb_seed_a, 64, 4});
        embedders.emplace_back(EmbedderSpec{EmbedderKind::RandomFeatures, emb_seed_b, 64, 4});
        aug.templates = default_templates();
    }

    StylizeContext context(float lambda_clip, float lambda_id, int views_per_step) {
        StylizeContext ctx;
        ctx.net = &net;
        ctx.id_in = id_in;
        ctx.embedders = embedders;
        ctx.aug = aug;
        ctx.weights = LossWeights{lambda_clip, lambda_id};
        ctx.views_per_step = views_per_step;
        return ctx;
    }

    py::array_t<float> render(double yaw, double pitch, int expr_index) {
        const auto presets = expression_presets(cfg.expr_dim);
        if (expr_index < 0 || static_cast<size_t>(expr_index) >= presets.size())
            throw UsageError("expression index out of range");
        ParamStore p = params.clone();
        p.set_requires_grad(Selector::All, false);
        Tape tape;
        return to_numpy(net.forward(tape, p, id_in, presets[static_cast<size_t>(expr_index)],
                                    ViewSpec{yaw, pitch}));
    }

    std::pair<double, double> pretrain(int steps, double lr, uint64_t seed, int identities) {
        const PretrainDataset data = make_face_dataset(cfg, faces_seed, identities);
        Rng rng(mix_keys(seed, 0xF17));
        const auto stats = pretrain_photoreal(net, params, data, steps, lr, rng);
        return {stats.loss_before, stats.loss_after};
    }

    py::list adapt(const std::string& text, int steps, double lr, uint64_t seed, float lambda_id) {
        StylizeContext ctx = context(1.0f, lambda_id, 4);
        const StyleTarget target =
            resolve_style_target(StyleEntry{text, ""}, embedders, aug.templates, 1.0f);
        AdaptConfig ac;
        ac.steps = steps;
        ac.lr = lr;
        ac.seed = seed;
        auto [adapted, traj] = fast_adapt(ctx, params, target, ac);
        params = std::move(adapted);
        py::list out;
        for (const auto& s : traj) {
            py::dict d;
            d["step"] = s.step;
            d["clip"] = s.clip_term;
            d["id"] = s.id_term;
            d["total"] = s.total;
            out.append(d);
        }
        return out;
    }

    void meta_train(const std::vector<std::string>& styles, int outer_iters, int meta_batch,
                    int inner_steps, double inner_lr, double meta_lr, uint64_t seed, int workers) {
        StylizeContext ctx = context(1.0f, 1.0f, 4);
        std::vector<StyleTarget> targets;
        for (const auto& s : styles)
            targets.push_back(resolve_style_target(StyleEntry{s, ""}, embedders, aug.templates, 1.0f));
        ReptileConfig rc;
        rc.outer_iters = outer_iters;
        rc.meta_batch = meta_batch;
        rc.inner_steps = inner_steps;
        rc.inner_lr = inner_lr;
        rc.meta_lr = meta_lr;
        rc.seed = seed;
        params = reptile_train(ctx, params, targets, rc, workers);
    }

    void save(const std::string& path) { params.save(path); }
    void load(const std::string& path) { params = ParamStore::load(path); }
    uint64_t params_hash() const { return params.content_hash(); }
    std::vector<std::string> stylizable_paths() const {
        return params.paths(Partition::Stylizable);
    }
};

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "avstyle: meta-learned fast style adaptation for volumetric avatars";
    m.attr("__version__") = "0.1.0";

    py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
    py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
    py::register_exception<DegenerateInputError>(m, "DegenerateInputError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

    py::class_<Embedder>(m, "Embedder")
        .def(py::init([](uint64_t seed, int dim, int token_grid) {
                 return Embedder(EmbedderSpec{EmbedderKind::RandomFeatures, seed, dim, token_grid});
             }),
             py::arg("seed") = 0, py::arg("dim") = 64, py::arg("token_grid") = 4)
        .def_static("from_file", &Embedder::external_from_file, py::arg("path"))
        .def("embed_image",
             [](const Embedder& e, const py::array_t<float>& img) {
                 Tape tape;
                 return to_numpy(e.embed_image(tape, from_numpy(img)));
             })
        .def("embed_text", [](const Embedder& e, const std::string& t) {
            return to_numpy(e.embed_text(t));
        })
        .def("image_tokens",
             [](const Embedder& e, const py::array_t<float>& img) {
                 Tape tape;
                 return to_numpy(e.image_tokens(tape, from_numpy(img)));
             })
        .def("weights_hash", &Embedder::weights_hash);

    m.def(
        "face_image",
        [](uint64_t faces_seed, int identity, double yaw, double pitch,
           const std::vector<float>& expression, int h, int w) {
            const auto ids = make_identities(faces_seed, identity + 1);
            Tensor e = Tensor::from_data({static_cast<int>(expression.size())},
                                         std::vector<float>(expression));
            return to_numpy(face_image(ids[static_cast<size_t>(identity)], yaw, pitch, e, h, w));
        },
        py::arg("faces_seed") = 11, py::arg("identity") = 0, py::arg("yaw") = 0.0,
        py::arg("pitch") = 0.0, py::arg("expression") = std::vector<float>{0, 0, 1, 0},
        py::arg("h") = 64, py::arg("w") = 64);

    m.def("self_similarity", [](const py::array_t<float>& tokens) {
        Tape tape;
        return to_numpy(self_similarity(tape, from_numpy(tokens)));
    });

    m.def(
        "identity_loss",
        [](const py::array_t<float>& styled, const py::array_t<float>& source, const Embedder& e) {
            Tape tape;
            return identity_loss(tape, from_numpy(styled), from_numpy(source), e).item();
        },
        py::arg("styled"), py::arg("source"), py::arg("embedder"));

    m.def(
        "style_distance",
        [](const py::array_t<float>& img, const std::string& text, const Embedder& e) {
            Tape tape;
            Tensor emb = e.embed_image(tape, from_numpy(img));
            return 1.0 - cosine(tape, emb, e.embed_text(text)).item();
        },
        py::arg("image"), py::arg("text"), py::arg("embedder"));

    py::class_<PyAvatar>(m, "Avatar")
        .def(py::init<uint64_t, uint64_t, int, uint64_t, uint64_t>(), py::arg("init_seed") = 5,
             py::arg("faces_seed") = 11, py::arg("identity") = 0, py::arg("emb_seed_a") = 101,
             py::arg("emb_seed_b") = 202)
        .def("render", &PyAvatar::render, py::arg("yaw") = 0.0, py::arg("pitch") = 0.0,
             py::arg("expr_index") = 0)
        .def("pretrain", &PyAvatar::pretrain, py::arg("steps"), py::arg("lr") = 2.0,
             py::arg("seed") = 5, py::arg("identities") = 2)
        .def("adapt", &PyAvatar::adapt, py::arg("text"), py::arg("steps") = 50,
             py::arg("lr") = 8e-3, py::arg("seed") = 1, py::arg("lambda_id") = 1.0f)
        .def("meta_train", &PyAvatar::meta_train, py::arg("styles"), py::arg("outer_iters") = 10,
             py::arg("meta_batch") = 2, py::arg("inner_steps") = 3, py::arg("inner_lr") = 4e-3,
             py::arg("meta_lr") = 6e-3, py::arg("seed") = 1, py::arg("workers") = 2)
        .def("save", &PyAvatar::save)
        .def("load", &PyAvatar::load)
        .def("params_hash", &PyAvatar::params_hash)
        .def("stylizable_paths", &PyAvatar::stylizable_paths);
}
