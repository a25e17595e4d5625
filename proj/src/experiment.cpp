#include "avstyle/experiment.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace avstyle {

using nlohmann::json;

namespace {

void check_keys(const json& j, const char* where, std::initializer_list<const char*> allowed) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed)
            if (it.key() == k) {
                ok = true;
                break;
            }
        if (!ok)
            throw UsageError(std::string("config: unknown key '") + it.key() + "' in " + where);
    }
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw UsageError(std::string("config: invalid JSON: ") + e.what());
    }
    check_keys(j, "root",
               {"version", "model", "embedder", "augment", "loss", "reptile", "adapt", "pretrain",
                "mix", "data", "run"});
    if (!j.contains("version") || j.at("version").get<int>() != 1)
        throw UsageError("config: missing or unsupported version (expected 1)");

    ExperimentConfig c;
    if (j.contains("model")) {
        const auto& m = j.at("model");
        check_keys(m, "model",
                   {"map_h", "map_w", "grid", "vox", "img_h", "img_w", "expr_dim", "code_dim",
                    "channels", "bias_blocks"});
        maybe(m, "map_h", c.model.map_h);
        maybe(m, "map_w", c.model.map_w);
        maybe(m, "grid", c.model.grid);
        maybe(m, "vox", c.model.vox);
        maybe(m, "img_h", c.model.img_h);
        maybe(m, "img_w", c.model.img_w);
        maybe(m, "expr_dim", c.model.expr_dim);
        maybe(m, "code_dim", c.model.code_dim);
        maybe(m, "channels", c.model.channels);
        maybe(m, "bias_blocks", c.model.bias_blocks);
    }
    if (j.contains("embedder")) {
        const auto& m = j.at("embedder");
        check_keys(m, "embedder", {"dim", "token_grid", "train_seeds", "eval_seed"});
        maybe(m, "dim", c.emb_dim);
        maybe(m, "token_grid", c.token_grid);
        if (m.contains("train_seeds")) {
            const auto seeds = m.at("train_seeds").get<std::vector<uint64_t>>();
            if (seeds.size() != 2) throw UsageError("config: embedder.train_seeds must have 2 seeds");
            c.train_seed_a = seeds[0];
            c.train_seed_b = seeds[1];
        }
        maybe(m, "eval_seed", c.eval_seed);
    }
    if (j.contains("augment")) {
        const auto& m = j.at("augment");
        check_keys(m, "augment", {"n_image_augs", "crop_min", "crop_max", "flip_prob", "templates"});
        maybe(m, "n_image_augs", c.aug.n_image_augs);
        maybe(m, "crop_min", c.aug.crop_min);
        maybe(m, "crop_max", c.aug.crop_max);
        maybe(m, "flip_prob", c.aug.flip_prob);
        maybe(m, "templates", c.templates_path);
    }
    if (j.contains("loss")) {
        const auto& m = j.at("loss");
        check_keys(m, "loss", {"lambda_clip", "lambda_id"});
        maybe(m, "lambda_clip", c.weights.lambda_clip);
        maybe(m, "lambda_id", c.weights.lambda_id);
    }
    if (j.contains("reptile")) {
        const auto& m = j.at("reptile");
        check_keys(m, "reptile",
                   {"outer_iters", "meta_batch", "inner_steps", "inner_lr", "meta_lr",
                    "views_per_step", "seed"});
        maybe(m, "outer_iters", c.reptile.outer_iters);
        maybe(m, "meta_batch", c.reptile.meta_batch);
        maybe(m, "inner_steps", c.reptile.inner_steps);
        maybe(m, "inner_lr", c.reptile.inner_lr);
        maybe(m, "meta_lr", c.reptile.meta_lr);
        maybe(m, "views_per_step", c.reptile.views_per_step);
        maybe(m, "seed", c.reptile.seed);
    }
    if (j.contains("adapt")) {
        const auto& m = j.at("adapt");
        check_keys(m, "adapt", {"steps", "lr", "seed"});
        maybe(m, "steps", c.adapt.steps);
        maybe(m, "lr", c.adapt.lr);
        maybe(m, "seed", c.adapt.seed);
    }
    if (j.contains("pretrain")) {
        const auto& m = j.at("pretrain");
        check_keys(m, "pretrain", {"steps", "lr", "seed", "identities", "faces_seed"});
        maybe(m, "steps", c.pretrain_steps);
        maybe(m, "lr", c.pretrain_lr);
        maybe(m, "seed", c.pretrain_seed);
        maybe(m, "identities", c.identities);
        maybe(m, "faces_seed", c.faces_seed);
    }
    if (j.contains("mix")) {
        const auto& m = j.at("mix");
        check_keys(m, "mix", {"iterations", "seed"});
        maybe(m, "iterations", c.mix_iterations);
        maybe(m, "seed", c.mix_seed);
    }
    if (j.contains("data")) {
        const auto& m = j.at("data");
        check_keys(m, "data", {"train_styles", "test_styles", "identity_index", "mix_weight"});
        maybe(m, "train_styles", c.train_styles_path);
        maybe(m, "test_styles", c.test_styles_path);
        maybe(m, "identity_index", c.identity_index);
        maybe(m, "mix_weight", c.mix_weight);
    }
    if (j.contains("run")) {
        const auto& m = j.at("run");
        check_keys(m, "run", {"output_dir", "workers", "checkpoint_every"});
        maybe(m, "output_dir", c.output_dir);
        maybe(m, "workers", c.workers);
        maybe(m, "checkpoint_every", c.checkpoint_every);
    }
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    ExperimentConfig c = from_json_text(ss.str());
    c.aug.templates = load_templates(c.templates_path);
    return c;
}

std::string ExperimentConfig::to_json_text() const {
    json j;
    j["version"] = 1;
    j["model"] = {{"map_h", model.map_h},   {"map_w", model.map_w},
                  {"grid", model.grid},     {"vox", model.vox},
                  {"img_h", model.img_h},   {"img_w", model.img_w},
                  {"expr_dim", model.expr_dim}, {"code_dim", model.code_dim},
                  {"channels", model.channels}, {"bias_blocks", model.bias_blocks}};
    j["embedder"] = {{"dim", emb_dim},
                     {"token_grid", token_grid},
                     {"train_seeds", std::vector<uint64_t>{train_seed_a, train_seed_b}},
                     {"eval_seed", eval_seed}};
    j["augment"] = {{"n_image_augs", aug.n_image_augs}, {"crop_min", aug.crop_min},
                    {"crop_max", aug.crop_max},         {"flip_prob", aug.flip_prob},
                    {"templates", templates_path}};
    j["loss"] = {{"lambda_clip", weights.lambda_clip}, {"lambda_id", weights.lambda_id}};
    j["reptile"] = {{"outer_iters", reptile.outer_iters}, {"meta_batch", reptile.meta_batch},
                    {"inner_steps", reptile.inner_steps}, {"inner_lr", reptile.inner_lr},
                    {"meta_lr", reptile.meta_lr},         {"views_per_step", reptile.views_per_step},
                    {"seed", reptile.seed}};
    j["adapt"] = {{"steps", adapt.steps}, {"lr", adapt.lr}, {"seed", adapt.seed}};
    j["pretrain"] = {{"steps", pretrain_steps},
                     {"lr", pretrain_lr},
                     {"seed", pretrain_seed},
                     {"identities", identities},
                     {"faces_seed", faces_seed}};
    j["mix"] = {{"iterations", mix_iterations}, {"seed", mix_seed}};
    j["data"] = {{"train_styles", train_styles_path},
                 {"test_styles", test_styles_path},
                 {"identity_index", identity_index},
                 {"mix_weight", mix_weight}};
    j["run"] = {{"output_dir", output_dir}, {"workers", workers},
                {"checkpoint_every", checkpoint_every}};
    return j.dump(2);
}

void ExperimentConfig::validate() const {
    model.validate();
    if (emb_dim < 8) throw UsageError("config: embedder dim too small");
    if (token_grid < 1) throw UsageError("config: token grid must be >= 1");
    if (train_seed_a == train_seed_b)
        throw UsageError("config: the two training embedder seeds must differ");
    reptile.validate();
    adapt.validate();
    weights.validate();
    if (pretrain_steps < 0 || !(pretrain_lr > 0)) throw UsageError("config: bad pretrain settings");
    if (identities < 1) throw UsageError("config: need at least one identity");
    if (identity_index < 0 || identity_index >= identities)
        throw UsageError("config: identity_index out of range");
    if (mix_iterations < 1) throw UsageError("config: mix iterations must be >= 1");
    if (mix_weight < 0.0f || mix_weight > 1.0f) throw UsageError("config: mix_weight in [0,1]");
    if (workers < 1) throw UsageError("config: workers must be >= 1");
    if (checkpoint_every < 1) throw UsageError("config: checkpoint_every must be >= 1");
}

RunEnv::RunEnv(const ExperimentConfig& c) : cfg(c), net(c.model) {
    train_embedders.emplace_back(
        EmbedderSpec{EmbedderKind::RandomFeatures, c.train_seed_a, c.emb_dim, c.token_grid});
    train_embedders.emplace_back(
        EmbedderSpec{EmbedderKind::RandomFeatures, c.train_seed_b, c.emb_dim, c.token_grid});

    const auto identities = make_identities(c.faces_seed, c.identity_index + 1);
    ctx.net = &net;
    ctx.id_in = identity_maps(identities[static_cast<size_t>(c.identity_index)], c.model);
    ctx.embedders = train_embedders;
    ctx.aug = c.aug;
    if (ctx.aug.templates.empty()) ctx.aug.templates = {"{}"};
    ctx.weights = c.weights;
    ctx.views_per_step = c.reptile.views_per_step;
}

std::vector<std::pair<ViewSpec, Tensor>> evaluation_grid(const AvatarConfig& cfg) {
    std::vector<std::pair<ViewSpec, Tensor>> out;
    const auto presets = expression_presets(cfg.expr_dim);
    for (double yaw : face_yaw_grid())
        for (const auto& e : presets) out.emplace_back(ViewSpec{yaw, 0.0}, e.clone());
    return out;
}

double eval_grid_style_loss(const RunEnv& env, const ParamStore& params,
                            const ParamStore& source_params, const StyleTarget& target) {
    ParamStore p = params.clone();
    p.set_requires_grad(Selector::All, false);
    ParamStore src = source_params.clone();
    src.set_requires_grad(Selector::All, false);

    AugmentationConfig ident_aug;
    ident_aug.n_image_augs = 1;
    ident_aug.crop_min = ident_aug.crop_max = 1.0f;
    ident_aug.flip_prob = 0.0f;
    ident_aug.templates = {"{}"};

    Tape tape;
    const auto grid = evaluation_grid(env.cfg.model);
    std::vector<Tensor> styled = env.net.forward_batch(tape, p, env.ctx.id_in, grid);
    std::vector<Tensor> source = env.net.forward_batch(tape, src, env.ctx.id_in, grid);
    Rng rng(0);
    const auto res =
        style_loss(tape, styled, source, target, env.ctx.weights, env.train_embedders, ident_aug, rng);
    return static_cast<double>(res.breakdown.total);
}

SemanticScore semantic_score(const RunEnv& env, const Embedder& eval_embedder,
                             const ParamStore& params, const std::string& style_text) {
    ParamStore p = params.clone();
    p.set_requires_grad(Selector::All, false);
    Tensor text_emb = eval_embedder.embed_text(style_text);
    std::vector<double> scores;
    for (const auto& [view, e] : evaluation_grid(env.cfg.model)) {
        Tape tape;
        Tensor img = env.net.forward(tape, p, env.ctx.id_in, e, view);
        Tensor emb = eval_embedder.embed_image(tape, img);
        scores.push_back(cosine(tape, emb, text_emb).item());
    }
    SemanticScore s;
    for (double v : scores) s.mean += v;
    s.mean /= static_cast<double>(scores.size());
    for (double v : scores) s.stddev += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(s.stddev / static_cast<double>(scores.size()));
    return s;
}

uint64_t dataset_content_hash(const ExperimentConfig& cfg) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const std::string& path :
         {cfg.train_styles_path, cfg.test_styles_path, cfg.templates_path}) {
        std::ifstream is(path, std::ios::binary);
        if (!is) continue;
        std::stringstream ss;
        ss << is.rdbuf();
        const std::string bytes = ss.str();
        h = fnv1a64(bytes.data(), bytes.size(), h);
    }
    return h;
}

std::string style_slug(const std::string& text) {
    std::string s;
    for (char ch : text) {
        if (std::isalnum(static_cast<unsigned char>(ch)))
            s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        else if (!s.empty() && s.back() != '-')
            s.push_back('-');
    }
    while (!s.empty() && s.back() == '-') s.pop_back();
    if (s.size() > 32) s.resize(32);
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%08x",
                  static_cast<unsigned>(fnv1a64(text.data(), text.size()) & 0xffffffffu));
    return s.empty() ? std::string(buf) : s + "-" + buf;
}

} // namespace avstyle
