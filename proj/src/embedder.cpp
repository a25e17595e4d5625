#include "avstyle/embedder.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace avstyle {

namespace {

constexpr int kTextTableRows = 4096;

// Mean-pools a [c,h,w] feature map into token_grid^2 cells -> [cells, c].
Tensor pool_cells(Tape& tape, const Tensor& fmap, int grid) {
    const int c = fmap.dim(0), h = fmap.dim(1), w = fmap.dim(2);
    if (h < grid || w < grid) throw DimensionError("pool_cells: feature map smaller than token grid");
    Tensor out = Tensor::zeros({grid * grid, c});
    const float* fp = fmap.data().data();
    float* op = out.data_mut().data();
    auto cell_range = [](int i, int n, int grid_n, int& lo, int& hi) {
        lo = i * n / grid_n;
        hi = (i + 1) * n / grid_n;
    };
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            int y0, y1, x0, x1;
            cell_range(gy, h, grid, y0, y1);
            cell_range(gx, w, grid, x0, x1);
            const double inv = 1.0 / ((y1 - y0) * (x1 - x0));
            for (int ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) acc += fp[(ch * h + y) * w + x];
                op[(gy * grid + gx) * c + ch] = static_cast<float>(acc * inv);
            }
        }
    if (fmap.requires_grad()) {
        out.set_requires_grad(true);
        auto fi = fmap.impl(), oi = out.impl();
        tape.record("pool_cells", {fi, oi}, [fi, oi, c, h, w, grid, cell_range] {
            if (oi->grad.empty()) return;
            fi->ensure_grad();
            for (int gy = 0; gy < grid; ++gy)
                for (int gx = 0; gx < grid; ++gx) {
                    int y0, y1, x0, x1;
                    cell_range(gy, h, grid, y0, y1);
                    cell_range(gx, w, grid, x0, x1);
                    const float inv = 1.0f / static_cast<float>((y1 - y0) * (x1 - x0));
                    for (int ch = 0; ch < c; ++ch) {
                        const float g = oi->grad[static_cast<size_t>((gy * grid + gx) * c + ch)] * inv;
                        for (int y = y0; y < y1; ++y)
                            for (int x = x0; x < x1; ++x)
                                fi->grad[static_cast<size_t>((ch * h + y) * w + x)] += g;
                    }
                }
        });
    }
    return out;
}

} // namespace

void AugmentationConfig::validate() const {
    if (n_image_augs < 1) throw UsageError("AugmentationConfig: n_image_augs must be >= 1");
    if (!(crop_min > 0.0f && crop_min <= crop_max && crop_max <= 1.0f))
        throw UsageError("AugmentationConfig: crop fractions must satisfy 0 < min <= max <= 1");
    if (flip_prob < 0.0f || flip_prob > 1.0f)
        throw UsageError("AugmentationConfig: flip probability out of range");
    for (const auto& t : templates)
        if (t.find("{}") == std::string::npos)
            throw UsageError("AugmentationConfig: template missing '{}' placeholder: " + t);
}

Embedder::Embedder(EmbedderSpec spec) : spec_(spec) {
    if (spec_.kind != EmbedderKind::RandomFeatures)
        throw UsageError("Embedder: use external_from_file for the external backend");
    if (spec_.dim < 8 || spec_.token_grid < 1) throw UsageError("Embedder: bad spec");
    Rng rng(mix_keys(spec_.seed, 0xE3BEDDE5));
    const int widths[4] = {8, 16, 32, spec_.dim};
    int ci = 3;
    for (int l = 0; l < 4; ++l) {
        ConvLayer layer;
        layer.w = Tensor::randn({widths[l], ci, 3, 3}, rng,
                                std::sqrt(2.0f / (static_cast<float>(ci) * 9.0f)));
        layer.b = Tensor::randn({widths[l]}, rng, 0.1f);
        layer.stride = 2;
        convs_.push_back(std::move(layer));
        ci = widths[l];
    }
    head_w_ = Tensor::randn({spec_.dim, spec_.dim}, rng,
                            std::sqrt(1.0f / static_cast<float>(spec_.dim)));
    head_b_ = Tensor::randn({spec_.dim}, rng, 0.05f);

    text_table_ = Tensor::randn({kTextTableRows, spec_.dim}, rng, 1.0f);
    const int hidden = 2 * spec_.dim;
    text_w1_ = Tensor::randn({hidden, spec_.dim}, rng, std::sqrt(2.0f / spec_.dim));
    text_b1_ = Tensor::randn({hidden}, rng, 0.1f);
    text_w2_ = Tensor::randn({spec_.dim, hidden}, rng, std::sqrt(1.0f / hidden));
    text_b2_ = Tensor::randn({spec_.dim}, rng, 0.05f);
}

Tensor Embedder::backbone(Tape& tape, const Tensor& img) const {
    if (img.ndim() != 3 || img.dim(0) != 3) throw DimensionError("embedder: image must be [3,h,w]");
    Tensor x = img;
    for (const auto& layer : convs_) x = relu(tape, conv2d(tape, x, layer.w, layer.b, layer.stride));
    return x;
}

Tensor Embedder::embed_from_features(Tape& tape, const Tensor& feat) const {
    Tensor pooled = reduce_mean(tape, feat, {1, 2});
    return l2_normalize(tape, linear(tape, head_w_, pooled, head_b_));
}

Tensor Embedder::embed_image(Tape& tape, const Tensor& img) const {
    if (spec_.kind == EmbedderKind::External) return embed_image_external(tape, img);
    return embed_from_features(tape, backbone(tape, img));
}

Tensor Embedder::image_tokens(Tape& tape, const Tensor& img) const {
    Tensor feat = backbone(tape, img);
    return l2_normalize_rows(tape, pool_cells(tape, feat, spec_.token_grid));
}

std::vector<std::string> tokenize_text(const std::string& text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char ch : text) {
        if (std::isalnum(static_cast<unsigned char>(ch))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        } else if (!cur.empty()) {
            tokens.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(cur);
    return tokens;
}

Tensor Embedder::embed_text(const std::string& text) const {
    if (spec_.kind == EmbedderKind::External)
        throw UsageError("external embedder backend has no text encoder");
    const auto tokens = tokenize_text(text);
    if (tokens.empty()) throw UsageError("embed_text: empty text");
    const int d = spec_.dim;
    Tensor avg = Tensor::zeros({d});
    auto ap = avg.data_mut();
    for (const auto& tok : tokens) {
        const uint64_t row = fnv1a64(tok.data(), tok.size()) % kTextTableRows;
        const float* rp = text_table_.data().data() + row * static_cast<size_t>(d);
        for (int i = 0; i < d; ++i) ap[i] += rp[i];
    }
    for (int i = 0; i < d; ++i) ap[i] /= static_cast<float>(tokens.size());
    Tape scratch;
    Tensor h = relu(scratch, linear(scratch, text_w1_, avg, text_b1_));
    return l2_normalize(scratch, linear(scratch, text_w2_, h, text_b2_));
}

uint64_t Embedder::weights_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mixin = [&h](const Tensor& t) {
        if (t.defined()) h = fnv1a64(t.data().data(), t.data().size() * sizeof(float), h);
    };
    for (const auto& l : convs_) {
        mixin(l.w);
        mixin(l.b);
    }
    mixin(head_w_);
    mixin(head_b_);
    mixin(text_table_);
    mixin(text_w1_);
    mixin(text_b1_);
    mixin(text_w2_);
    mixin(text_b2_);
    return h;
}

Embedder Embedder::external_from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("external embedder: cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw IoError(std::string("external embedder: bad JSON: ") + e.what());
    }
    if (j.value("format", "") != "avstyle-embedder" || j.value("version", 0) != 1)
        throw IoError("external embedder: unsupported model format");
    Embedder e;
    e.spec_.kind = EmbedderKind::External;
    e.spec_.seed = 0;
    e.spec_.dim = j.at("dim").get<int>();
    e.spec_.token_grid = j.value("token_grid", 4);
    int ci = 3;
    for (const auto& layer : j.at("layers")) {
        const std::string type = layer.at("type").get<std::string>();
        if (type == "conv3x3") {
            ConvLayer cl;
            const int co = layer.at("out").get<int>();
            cl.stride = layer.value("stride", 2);
            auto wv = layer.at("w").get<std::vector<float>>();
            auto bv = layer.at("b").get<std::vector<float>>();
            cl.w = Tensor::from_data({co, ci, 3, 3}, std::move(wv));
            cl.b = Tensor::from_data({co}, std::move(bv));
            e.convs_.push_back(std::move(cl));
            ci = co;
        } else if (type == "linear") {
            const int out = layer.at("out").get<int>();
            auto wv = layer.at("w").get<std::vector<float>>();
            auto bv = layer.at("b").get<std::vector<float>>();
            e.head_w_ = Tensor::from_data({out, ci}, std::move(wv));
            e.head_b_ = Tensor::from_data({out}, std::move(bv));
        } else {
            throw IoError("external embedder: unknown layer type " + type);
        }
    }
    if (e.convs_.empty() || !e.head_w_.defined())
        throw IoError("external embedder: model must declare conv layers and a linear head");
    return e;
}

Tensor Embedder::embed_image_external(Tape& tape, const Tensor& img) const {
    // Out-of-tape evaluation; input gradients estimated by central differences
    // when requested. Slow by design (extension point, not a training path).
    Tape scratch;
    Tensor img_const = Tensor::from_data(img.shape(),
                                         std::vector<float>(img.data().begin(), img.data().end()));
    Tensor emb = embed_from_features(scratch, backbone(scratch, img_const));
    Tensor out = Tensor::from_data(emb.shape(),
                                   std::vector<float>(emb.data().begin(), emb.data().end()));
    if (img.requires_grad()) {
        out.set_requires_grad(true);
        auto ii = img.impl(), oi = out.impl();
        const Embedder* self = this;
        tape.record("embed_external", {ii, oi}, [self, ii, oi] {
            if (oi->grad.empty()) return;
            ii->ensure_grad();
            const float eps = 1e-2f;
            std::vector<float> base = ii->data;
            for (size_t p = 0; p < base.size(); ++p) {
                auto eval = [&](float v) {
                    std::vector<float> mod = base;
                    mod[p] = v;
                    Tape t2;
                    Tensor im = Tensor::from_data(ii->shape, std::move(mod));
                    return self->embed_from_features(t2, self->backbone(t2, im));
                };
                Tensor hi = eval(base[p] + eps), lo = eval(base[p] - eps);
                double acc = 0.0;
                for (int i = 0; i < hi.numel(); ++i)
                    acc += static_cast<double>(oi->grad[static_cast<size_t>(i)]) *
                           (hi.at(i) - lo.at(i)) / (2.0 * eps);
                ii->grad[p] += static_cast<float>(acc);
            }
        });
    }
    return out;
}

std::vector<Tensor> augment_images(Tape& tape, const Tensor& img, const AugmentationConfig& cfg,
                                   Rng& rng) {
    cfg.validate();
    if (img.ndim() != 3) throw DimensionError("augment_images: expected [c,h,w]");
    const int h = img.dim(1), w = img.dim(2);
    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(cfg.n_image_augs));
    for (int i = 0; i < cfg.n_image_augs; ++i) {
        const double frac = rng.uniform(cfg.crop_min, cfg.crop_max);
        const double uy = rng.uniform();
        const double ux = rng.uniform();
        const bool flip = rng.uniform() < cfg.flip_prob;
        const double sh = frac * h, sw = frac * w;
        out.push_back(crop_resize(tape, img, uy * (h - sh), ux * (w - sw), sh, sw, h, w, flip));
    }
    return out;
}

std::vector<std::string> augment_text(const std::string& text,
                                      const std::vector<std::string>& templates, Rng& /*rng*/) {
    if (templates.empty()) throw UsageError("augment_text: no templates");
    std::vector<std::string> out;
    out.reserve(templates.size());
    for (const auto& tpl : templates) {
        const auto at = tpl.find("{}");
        if (at == std::string::npos)
            throw UsageError("augment_text: template missing '{}': " + tpl);
        std::string s = tpl;
        s.replace(at, 2, text);
        out.push_back(std::move(s));
    }
    return out;
}

Tensor mix_targets(const std::optional<Tensor>& text_emb, const std::optional<Tensor>& img_emb,
                   float w) {
    if (!text_emb && !img_emb) throw UsageError("mix_targets: both inputs absent");
    if (w < 0.0f || w > 1.0f) throw UsageError("mix_targets: weight must be in [0,1]");
    Tape scratch;
    if (text_emb && !img_emb) return l2_normalize(scratch, *text_emb).clone();
    if (img_emb && !text_emb) return l2_normalize(scratch, *img_emb).clone();
    Tensor mixed = add(scratch, scale(scratch, *text_emb, w), scale(scratch, *img_emb, 1.0f - w));
    return l2_normalize(scratch, mixed).clone();
}

std::vector<std::string> load_templates(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open template file " + path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == '#') continue;
        out.push_back(line);
    }
    if (out.empty()) throw UsageError("template file has no templates: " + path);
    return out;
}

} // namespace avstyle
