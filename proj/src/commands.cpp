#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "avstyle/experiment.hpp"
#include "avstyle/image_io.hpp"
#include "avstyle/threading.hpp"
#include "json.hpp"

namespace avstyle {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for write: " + path);
    os << text;
    if (!os) throw IoError("write failed: " + path);
}

std::string read_text(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void write_trajectory_csv(const std::string& path, const Trajectory& traj) {
    std::string out = "step,clip,id,total\n";
    for (const auto& s : traj)
        out += std::to_string(s.step) + "," + fmt_double(s.clip_term) + "," +
               fmt_double(s.id_term) + "," + fmt_double(s.total) + "\n";
    write_text(path, out);
}

json base_report(const char* command, const ExperimentConfig& cfg) {
    json j;
    j["command"] = command;
    j["config"] = json::parse(cfg.to_json_text());
    j["dataset_hash"] = hash_hex(dataset_content_hash(cfg));
    return j;
}

struct Timer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double ms() const {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    }
};

ParamStore load_ckpt(const std::string& path) {
    if (!fs::exists(path)) throw IoError("missing checkpoint: " + path);
    return ParamStore::load(path);
}

std::set<std::string> train_split_texts(const ExperimentConfig& cfg) {
    std::set<std::string> out;
    for (const auto& e : load_style_list(cfg.train_styles_path)) out.insert(e.text);
    return out;
}

double held_out_rmse(const RunEnv& env, const ParamStore& params) {
    const auto probes =
        held_out_samples(env.cfg.model, env.cfg.faces_seed, env.cfg.identity_index, 25);
    ParamStore p = params.clone();
    p.set_requires_grad(Selector::All, false);
    const auto identities = make_identities(env.cfg.faces_seed, env.cfg.identity_index + 1);
    const IdentityInput id_in =
        identity_maps(identities[static_cast<size_t>(env.cfg.identity_index)], env.cfg.model);
    double acc = 0.0;
    size_t n = 0;
    for (const auto& s : probes) {
        Tape tape;
        Tensor img = env.net.forward(tape, p, id_in, s.e, s.view);
        auto ip = img.data();
        auto tp = s.image.data();
        for (size_t i = 0; i < ip.size(); ++i) {
            const double d = static_cast<double>(ip[i]) - tp[i];
            acc += d * d;
        }
        n += ip.size();
    }
    return std::sqrt(acc / static_cast<double>(n));
}

StyleTarget resolve_entry(const RunEnv& env, const StyleEntry& entry, float mix_w) {
    return resolve_style_target(entry, env.train_embedders, env.ctx.aug.templates, mix_w);
}

} // namespace

void cmd_gen_faces(const ExperimentConfig& cfg) {
    Timer timer;
    fs::create_directories(cfg.faces_dir());
    const auto identities = make_identities(cfg.faces_seed, cfg.identities);
    const auto presets = expression_presets(cfg.model.expr_dim);
    const auto& yaws = face_yaw_grid();

    json manifest;
    manifest["version"] = 1;
    manifest["seed"] = cfg.faces_seed;
    manifest["identities"] = cfg.identities;
    manifest["yaws"] = yaws;
    {
        std::vector<std::vector<float>> exprs;
        for (const auto& e : presets)
            exprs.emplace_back(e.data().begin(), e.data().end());
        manifest["expressions"] = exprs;
    }
    json images = json::array();
    for (int i = 0; i < cfg.identities; ++i) {
        ParamStore maps;
        const IdentityInput id_in = identity_maps(identities[static_cast<size_t>(i)], cfg.model);
        maps.add("position_map", id_in.position_map, Partition::Frozen);
        maps.add("texture_map", id_in.texture_map, Partition::Frozen);
        maps.save(cfg.faces_dir() + "/id" + std::to_string(i) + "_maps.avcp");
        for (size_t ei = 0; ei < presets.size(); ++ei)
            for (size_t vi = 0; vi < yaws.size(); ++vi) {
                Tensor img = face_image(identities[static_cast<size_t>(i)], yaws[vi], 0.0,
                                        presets[ei], cfg.model.img_h, cfg.model.img_w);
                const std::string file = "img_i" + std::to_string(i) + "_v" + std::to_string(vi) +
                                         "_e" + std::to_string(ei) + ".png";
                write_png(cfg.faces_dir() + "/" + file, img);
                images.push_back({{"identity", i},
                                  {"yaw_idx", vi},
                                  {"expr_idx", ei},
                                  {"file", file}});
            }
    }
    manifest["images"] = images;
    write_text(cfg.faces_dir() + "/manifest.json", manifest.dump(2));

    json report = base_report("gen-faces", cfg);
    report["image_count"] = images.size();
    report["wall_clock_ms"] = timer.ms();
    write_text(cfg.faces_dir() + "/report.json", report.dump(2));
    std::cout << "gen-faces: wrote " << images.size() << " images to " << cfg.faces_dir() << "\n";
}

namespace {

PretrainDataset load_faces_dataset(const ExperimentConfig& cfg) {
    const std::string manifest_path = cfg.faces_dir() + "/manifest.json";
    if (!fs::exists(manifest_path))
        throw IoError("faces dataset not found (run gen-faces first): " + manifest_path);
    const json manifest = json::parse(read_text(manifest_path));
    PretrainDataset data;
    const int n_ids = manifest.at("identities").get<int>();
    for (int i = 0; i < n_ids; ++i) {
        ParamStore maps =
            ParamStore::load(cfg.faces_dir() + "/id" + std::to_string(i) + "_maps.avcp");
        IdentityInput id_in;
        id_in.position_map = maps.at("position_map").clone();
        id_in.texture_map = maps.at("texture_map").clone();
        id_in.position_map.set_requires_grad(false);
        id_in.texture_map.set_requires_grad(false);
        data.identities.push_back(std::move(id_in));
    }
    const auto yaws = manifest.at("yaws").get<std::vector<double>>();
    const auto exprs = manifest.at("expressions").get<std::vector<std::vector<float>>>();
    for (const auto& im : manifest.at("images")) {
        PretrainSample s;
        s.identity = im.at("identity").get<int>();
        s.view = ViewSpec{yaws.at(im.at("yaw_idx").get<size_t>()), 0.0};
        const auto& ev = exprs.at(im.at("expr_idx").get<size_t>());
        s.e = Tensor::from_data({static_cast<int>(ev.size())}, std::vector<float>(ev));
        s.image = read_png(cfg.faces_dir() + "/" + im.at("file").get<std::string>());
        data.samples.push_back(std::move(s));
    }
    return data;
}

} // namespace

void cmd_pretrain(const ExperimentConfig& cfg, bool resume) {
    Timer timer;
    RunEnv env(cfg);
    const PretrainDataset data = load_faces_dataset(cfg);
    fs::create_directories(cfg.ckpt_dir());

    int start_step = 0;
    ParamStore params;
    const std::string state_path = cfg.ckpt_dir() + "/pretrain_state.json";
    if (resume) {
        params = load_ckpt(cfg.pretrained_ckpt());
        if (fs::exists(state_path))
            start_step = json::parse(read_text(state_path)).at("steps_done").get<int>();
    } else {
        Rng init_rng(mix_keys(cfg.pretrain_seed, 0x1417));
        params = env.net.init_params(init_rng);
    }

    // One sample-index draw per step; replay to continue the stream on resume.
    Rng rng(mix_keys(cfg.pretrain_seed, 0xF17));
    for (int i = 0; i < start_step; ++i) rng.below(data.samples.size());

    const PretrainStats stats =
        pretrain_photoreal(env.net, params, data, cfg.pretrain_steps, cfg.pretrain_lr, rng);
    params.save(cfg.pretrained_ckpt());
    write_text(state_path,
               json{{"steps_done", start_step + cfg.pretrain_steps}}.dump(2));

    const double rmse = held_out_rmse(env, params);
    json report = base_report("pretrain", cfg);
    report["start_step"] = start_step;
    report["end_step"] = start_step + cfg.pretrain_steps;
    report["loss_before"] = stats.loss_before;
    report["loss_after"] = stats.loss_after;
    report["loss_decrease_pct"] =
        stats.loss_before > 0 ? 100.0 * (1.0 - stats.loss_after / stats.loss_before) : 0.0;
    report["held_out_rmse"] = rmse;
    report["checkpoint"] = cfg.pretrained_ckpt();
    report["auditable"] = json::array(
        {{{"kind", "held_out_rmse"}, {"checkpoint", cfg.pretrained_ckpt()}, {"value", rmse}}});
    report["wall_clock_ms"] = timer.ms();
    write_text(cfg.ckpt_dir() + "/pretrain_report.json", report.dump(2));
    std::cout << "pretrain: loss " << stats.loss_before << " -> " << stats.loss_after
              << ", held-out rmse " << rmse << "\n";
}

void cmd_meta_train(const ExperimentConfig& cfg) {
    Timer timer;
    RunEnv env(cfg);
    ParamStore phi = load_ckpt(cfg.pretrained_ckpt());
    const auto entries = load_style_list(cfg.train_styles_path);
    if (entries.empty()) throw UsageError("meta-train: train style list is empty");
    std::vector<StyleTarget> targets;
    targets.reserve(entries.size());
    for (const auto& e : entries) targets.push_back(resolve_entry(env, e, cfg.mix_weight));

    std::string csv = "iter,mean_inner_loss\n";
    int rows = 0;
    ParamStore phi_meta = reptile_train(
        env.ctx, phi, targets, cfg.reptile, cfg.workers,
        [&](int t, double mean_loss, const ParamStore& current) {
            csv += std::to_string(t) + "," + fmt_double(mean_loss) + "\n";
            ++rows;
            if (t % cfg.checkpoint_every == 0)
                current.save(cfg.ckpt_dir() + "/meta_iter" + std::to_string(t) + ".avcp");
        });
    phi_meta.save(cfg.meta_ckpt());
    write_text(cfg.output_dir + "/meta_train_curve.csv", csv);

    json report = base_report("meta-train", cfg);
    report["outer_iters"] = cfg.reptile.outer_iters;
    report["csv_rows"] = rows;
    report["checkpoint"] = cfg.meta_ckpt();
    json auditable = json::array();
    const auto test_entries = load_style_list(cfg.test_styles_path);
    for (size_t i = 0; i < std::min<size_t>(3, test_entries.size()); ++i) {
        const StyleTarget target = resolve_entry(env, test_entries[i], cfg.mix_weight);
        const double v = eval_grid_style_loss(env, phi_meta, phi, target);
        auditable.push_back({{"kind", "eval_loss"},
                             {"checkpoint", cfg.meta_ckpt()},
                             {"source_checkpoint", cfg.pretrained_ckpt()},
                             {"style_text", test_entries[i].text},
                             {"style_image", test_entries[i].image_path},
                             {"value", v}});
    }
    report["auditable"] = auditable;
    report["wall_clock_ms"] = timer.ms();
    write_text(cfg.output_dir + "/meta_train_report.json", report.dump(2));
    std::cout << "meta-train: " << cfg.reptile.outer_iters << " outer iterations -> "
              << cfg.meta_ckpt() << "\n";
}

void cmd_mix_train(const ExperimentConfig& cfg) {
    Timer timer;
    RunEnv env(cfg);
    ParamStore phi = load_ckpt(cfg.pretrained_ckpt());
    const auto entries = load_style_list(cfg.train_styles_path);
    if (entries.empty()) throw UsageError("mix-train: train style list is empty");
    std::vector<StyleTarget> targets;
    targets.reserve(entries.size());
    for (const auto& e : entries) targets.push_back(resolve_entry(env, e, cfg.mix_weight));

    std::string csv = "iter,mean_inner_loss\n";
    ParamStore phi_mix = task_mixing_train(
        env.ctx, phi, targets, cfg.mix_iterations, cfg.reptile.inner_lr, cfg.reptile.meta_lr,
        cfg.mix_seed, cfg.reptile.views_per_step, cfg.workers,
        [&](int t, double mean_loss, const ParamStore&) {
            if (t % 50 == 0) csv += std::to_string(t) + "," + fmt_double(mean_loss) + "\n";
        });
    phi_mix.save(cfg.mix_ckpt());
    write_text(cfg.output_dir + "/mix_train_curve.csv", csv);

    json report = base_report("mix-train", cfg);
    report["iterations"] = cfg.mix_iterations;
    report["checkpoint"] = cfg.mix_ckpt();
    report["auditable"] = json::array();
    report["wall_clock_ms"] = timer.ms();
    write_text(cfg.output_dir + "/mix_train_report.json", report.dump(2));
    std::cout << "mix-train: " << cfg.mix_iterations << " iterations -> " << cfg.mix_ckpt() << "\n";
}

void cmd_adapt(const ExperimentConfig& cfg, const std::string& style_text,
               const std::string& style_image, double lambda_id_override, double mix_weight,
               const std::string& init_checkpoint) {
    Timer timer;
    if (style_text.empty() && style_image.empty())
        throw UsageError("adapt: provide a style text and/or a style image");
    RunEnv env(cfg);
    if (lambda_id_override >= 0.0)
        env.ctx.weights.lambda_id = static_cast<float>(lambda_id_override);
    const float mix_w = mix_weight >= 0.0 ? static_cast<float>(mix_weight) : cfg.mix_weight;

    const std::string init_path = init_checkpoint.empty() ? cfg.meta_ckpt() : init_checkpoint;
    ParamStore phi_init = load_ckpt(init_path);

    StyleEntry entry{style_text, style_image};
    const StyleTarget target = resolve_entry(env, entry, mix_w);

    auto [phi_style, traj] = fast_adapt(env.ctx, phi_init, target, cfg.adapt);

    std::string dir = cfg.output_dir + "/adapt_" + style_slug(style_text + "|" + style_image) +
                      "-s" + std::to_string(cfg.adapt.seed);
    if (lambda_id_override >= 0.0) dir += "-lid" + fmt_double(lambda_id_override);
    fs::create_directories(dir);
    phi_style.save(dir + "/stylized.avcp");
    write_trajectory_csv(dir + "/trajectory.csv", traj);

    // Turntable: yaw sweep x 3 expressions.
    {
        ParamStore render_params = phi_style.clone();
        render_params.set_requires_grad(Selector::All, false);
        const auto presets = expression_presets(cfg.model.expr_dim);
        for (size_t vi = 0; vi < face_yaw_grid().size(); ++vi)
            for (size_t ei = 0; ei < 3; ++ei) {
                Tape tape;
                Tensor img = env.net.forward(tape, render_params, env.ctx.id_in, presets[ei],
                                             ViewSpec{face_yaw_grid()[vi], 0.0});
                write_png(dir + "/turntable_y" + std::to_string(vi) + "_e" + std::to_string(ei) +
                              ".png",
                          img);
            }
    }

    const double eval_loss = eval_grid_style_loss(env, phi_style, phi_init, target);
    json report = base_report("adapt", cfg);
    report["style"] = {{"text", style_text}, {"image", style_image}};
    report["init_checkpoint"] = init_path;
    report["lambda_id"] = static_cast<double>(env.ctx.weights.lambda_id);
    report["mix_weight"] = mix_w;
    report["seed"] = cfg.adapt.seed;
    report["steps"] = cfg.adapt.steps;
    if (!traj.empty())
        report["final"] = {{"clip", traj.back().clip_term},
                           {"id", traj.back().id_term},
                           {"total", traj.back().total}};
    report["eval_loss"] = eval_loss;
    json auditable = json::array();
    auditable.push_back({{"kind", "eval_loss"},
                         {"checkpoint", dir + "/stylized.avcp"},
                         {"source_checkpoint", init_path},
                         {"style_text", style_text},
                         {"style_image", style_image},
                         {"mix_weight", mix_w},
                         {"lambda_id", static_cast<double>(env.ctx.weights.lambda_id)},
                         {"value", eval_loss}});
    if (!traj.empty()) {
        auditable.push_back({{"kind", "adapt_step_total"},
                             {"init_checkpoint", init_path},
                             {"style_text", style_text},
                             {"style_image", style_image},
                             {"mix_weight", mix_w},
                             {"lambda_id", static_cast<double>(env.ctx.weights.lambda_id)},
                             {"seed", cfg.adapt.seed},
                             {"lr", cfg.adapt.lr},
                             {"step", traj.back().step},
                             {"value", traj.back().total}});
        auditable.push_back({{"kind", "adapt_step_total"},
                             {"init_checkpoint", init_path},
                             {"style_text", style_text},
                             {"style_image", style_image},
                             {"mix_weight", mix_w},
                             {"lambda_id", static_cast<double>(env.ctx.weights.lambda_id)},
                             {"seed", cfg.adapt.seed},
                             {"lr", cfg.adapt.lr},
                             {"step", traj.front().step},
                             {"value", traj.front().total}});
    }
    report["auditable"] = auditable;
    report["wall_clock_ms"] = timer.ms();
    write_text(dir + "/report.json", report.dump(2));
    std::cout << "adapt: " << cfg.adapt.steps << " steps";
    if (!traj.empty()) std::cout << ", final total " << traj.back().total;
    std::cout << " -> " << dir << "\n";
}

void cmd_compare_inits(const ExperimentConfig& cfg, int n_styles,
                       const std::vector<uint64_t>& seeds) {
    Timer timer;
    RunEnv env(cfg);
    ParamStore phi = load_ckpt(cfg.pretrained_ckpt());
    ParamStore phi_meta = load_ckpt(cfg.meta_ckpt());
    ParamStore phi_mix = load_ckpt(cfg.mix_ckpt());

    const auto train_texts = train_split_texts(cfg);
    auto test_entries = load_style_list(cfg.test_styles_path);
    for (const auto& e : test_entries)
        if (train_texts.count(e.text))
            throw UsageError("compare-inits: test style present in train split: " + e.text);
    if (n_styles <= 0 || static_cast<size_t>(n_styles) > test_entries.size())
        throw UsageError("compare-inits: style count out of range");
    test_entries.resize(static_cast<size_t>(n_styles));
    if (seeds.empty()) throw UsageError("compare-inits: need at least one seed");

    std::vector<StyleTarget> targets;
    for (const auto& e : test_entries) targets.push_back(resolve_entry(env, e, cfg.mix_weight));

    struct Job {
        int style;
        uint64_t seed;
    };
    std::vector<Job> jobs;
    for (int si = 0; si < n_styles; ++si)
        for (uint64_t seed : seeds) jobs.push_back(Job{si, seed});

    const char* init_names[3] = {"direct", "mixing", "meta"};
    const ParamStore* inits[3] = {&phi, &phi_mix, &phi_meta};
    std::vector<std::array<Trajectory, 3>> results(jobs.size());

    const std::string dir = cfg.output_dir + "/compare";
    fs::create_directories(dir);
    parallel_for(static_cast<int>(jobs.size()), cfg.workers, [&](int ji) {
        const Job& job = jobs[static_cast<size_t>(ji)];
        AdaptConfig ac = cfg.adapt;
        ac.seed = job.seed;
        const std::string job_dir = dir + "/" + style_slug(test_entries[job.style].text) + "-s" +
                                    std::to_string(job.seed);
        fs::create_directories(job_dir);
        for (int ii = 0; ii < 3; ++ii) {
            auto [params, traj] =
                fast_adapt(env.ctx, *inits[ii], targets[static_cast<size_t>(job.style)], ac);
            write_trajectory_csv(job_dir + "/trajectory_" + init_names[ii] + ".csv", traj);
            results[static_cast<size_t>(ji)][static_cast<size_t>(ii)] = std::move(traj);
        }
    });

    // Fig. 7-style mean curves.
    const int steps = cfg.adapt.steps;
    std::vector<std::array<double, 3>> mean_curve(static_cast<size_t>(steps), {0.0, 0.0, 0.0});
    for (const auto& r : results)
        for (int ii = 0; ii < 3; ++ii)
            for (const auto& s : r[static_cast<size_t>(ii)])
                mean_curve[static_cast<size_t>(s.step)][static_cast<size_t>(ii)] += s.total;
    for (auto& row : mean_curve)
        for (double& v : row) v /= static_cast<double>(jobs.size());

    std::string csv = "step,direct,mixing,meta\n";
    for (int s = 0; s < steps; ++s)
        csv += std::to_string(s) + "," + fmt_double(mean_curve[static_cast<size_t>(s)][0]) + "," +
               fmt_double(mean_curve[static_cast<size_t>(s)][1]) + "," +
               fmt_double(mean_curve[static_cast<size_t>(s)][2]) + "\n";
    write_text(dir + "/curves.csv", csv);

    auto at_step = [&](int step) {
        json out;
        const int s = std::min(step, steps - 1);
        for (int ii = 0; ii < 3; ++ii)
            out[init_names[ii]] = mean_curve[static_cast<size_t>(s)][static_cast<size_t>(ii)];
        return out;
    };
    int meta_wins_50 = 0;
    for (const auto& r : results) {
        const int s = std::min(50, steps - 1);
        if (r[2][static_cast<size_t>(s)].total <= r[0][static_cast<size_t>(s)].total)
            ++meta_wins_50;
    }

    json report = base_report("compare-inits", cfg);
    report["styles"] = n_styles;
    report["seeds"] = seeds;
    report["steps"] = steps;
    report["summary"] = {{"step10", at_step(10)},
                         {"step50", at_step(50)},
                         {"final", at_step(steps - 1)}};
    report["meta_beats_direct_at_50"] =
        static_cast<double>(meta_wins_50) / static_cast<double>(results.size());
    json auditable = json::array();
    for (int ii = 0; ii < 3; ++ii) {
        const std::string ckpt_path = ii == 0   ? cfg.pretrained_ckpt()
                                      : ii == 1 ? cfg.mix_ckpt()
                                                : cfg.meta_ckpt();
        const auto& traj = results[0][static_cast<size_t>(ii)];
        if (traj.empty()) continue;
        auditable.push_back({{"kind", "adapt_step_total"},
                             {"init_checkpoint", ckpt_path},
                             {"style_text", test_entries[0].text},
                             {"style_image", test_entries[0].image_path},
                             {"mix_weight", cfg.mix_weight},
                             {"lambda_id", static_cast<double>(cfg.weights.lambda_id)},
                             {"seed", seeds[0]},
                             {"lr", cfg.adapt.lr},
                             {"step", std::min(50, steps - 1)},
                             {"value", traj[static_cast<size_t>(std::min(50, steps - 1))].total}});
    }
    report["auditable"] = auditable;
    report["wall_clock_ms"] = timer.ms();
    write_text(dir + "/report.json", report.dump(2));
    std::cout << "compare-inits: summary at step 50: " << at_step(50).dump() << "\n";
}

void cmd_eval_semantic(const ExperimentConfig& cfg, const std::string& checkpoint,
                       const std::string& style_text) {
    Timer timer;
    if (cfg.eval_seed == cfg.train_seed_a || cfg.eval_seed == cfg.train_seed_b)
        throw UsageError("eval-semantic: evaluation embedder seed collides with a training seed");
    if (style_text.empty()) throw UsageError("eval-semantic: style text required");
    if (train_split_texts(cfg).count(style_text))
        throw UsageError("eval-semantic: style is in the train split: " + style_text);

    RunEnv env(cfg);
    Embedder eval_emb(
        EmbedderSpec{EmbedderKind::RandomFeatures, cfg.eval_seed, cfg.emb_dim, cfg.token_grid});
    ParamStore original = load_ckpt(cfg.pretrained_ckpt());
    ParamStore stylized = load_ckpt(checkpoint);

    const SemanticScore s_orig = semantic_score(env, eval_emb, original, style_text);
    const SemanticScore s_styl = semantic_score(env, eval_emb, stylized, style_text);

    fs::create_directories(cfg.output_dir + "/eval");
    json report = base_report("eval-semantic", cfg);
    report["style_text"] = style_text;
    report["checkpoint"] = checkpoint;
    report["original"] = {{"mean", s_orig.mean}, {"stddev", s_orig.stddev}};
    report["stylized"] = {{"mean", s_styl.mean}, {"stddev", s_styl.stddev}};
    report["delta"] = s_styl.mean - s_orig.mean;
    report["auditable"] =
        json::array({{{"kind", "semantic"},
                      {"checkpoint", cfg.pretrained_ckpt()},
                      {"style_text", style_text},
                      {"mean", s_orig.mean},
                      {"stddev", s_orig.stddev}},
                     {{"kind", "semantic"},
                      {"checkpoint", checkpoint},
                      {"style_text", style_text},
                      {"mean", s_styl.mean},
                      {"stddev", s_styl.stddev}}});
    report["wall_clock_ms"] = timer.ms();
    const std::string out_path =
        cfg.output_dir + "/eval/semantic_" + style_slug(style_text) + ".json";
    write_text(out_path, report.dump(2));
    std::cout << "eval-semantic: original " << s_orig.mean << " stylized " << s_styl.mean
              << " delta " << (s_styl.mean - s_orig.mean) << "\n";
}

void cmd_render(const ExperimentConfig& cfg, const std::string& checkpoint,
                const std::vector<double>& yaws, const std::vector<int>& expr_indices,
                const std::string& out_subdir) {
    RunEnv env(cfg);
    ParamStore params = load_ckpt(checkpoint);
    params.set_requires_grad(Selector::All, false);
    const auto presets = expression_presets(cfg.model.expr_dim);
    const std::string dir =
        cfg.output_dir + "/" + (out_subdir.empty() ? "renders" : out_subdir);
    fs::create_directories(dir);
    int count = 0;
    for (size_t vi = 0; vi < yaws.size(); ++vi)
        for (size_t ei = 0; ei < expr_indices.size(); ++ei) {
            const int expr = expr_indices[ei];
            if (expr < 0 || static_cast<size_t>(expr) >= presets.size())
                throw UsageError("render: expression index out of range");
            Tape tape;
            Tensor img = env.net.forward(tape, params, env.ctx.id_in,
                                         presets[static_cast<size_t>(expr)],
                                         ViewSpec{yaws[vi], 0.0});
            write_png(dir + "/render_y" + std::to_string(vi) + "_e" + std::to_string(ei) + ".png",
                      img);
            ++count;
        }
    std::cout << "render: wrote " << count << " images to " << dir << "\n";
}

void cmd_audit(const ExperimentConfig& cfg, const std::string& report_path) {
    const std::string report_bytes = read_text(report_path);
    const json report = json::parse(report_bytes);
    if (!report.contains("auditable") || report.at("auditable").empty())
        throw UsageError("audit: report has no auditable entries");
    const auto& entries = report.at("auditable");

    Rng rng(fnv1a64(report_bytes.data(), report_bytes.size()));
    std::vector<size_t> picks;
    for (size_t i = 0; i < entries.size(); ++i) picks.push_back(i);
    for (size_t i = 0; i + 1 < picks.size(); ++i) {
        const size_t j = i + rng.below(picks.size() - i);
        std::swap(picks[i], picks[j]);
    }
    picks.resize(std::min<size_t>(3, picks.size()));

    RunEnv env(cfg);
    for (size_t pick : picks) {
        const json& e = entries.at(pick);
        const std::string kind = e.at("kind").get<std::string>();
        if (kind == "held_out_rmse") {
            const double got = held_out_rmse(env, load_ckpt(e.at("checkpoint").get<std::string>()));
            if (got != e.at("value").get<double>())
                throw NumericError("audit mismatch for held_out_rmse: got " + fmt_double(got));
        } else if (kind == "eval_loss") {
            RunEnv local = env;
            if (e.contains("lambda_id"))
                local.ctx.weights.lambda_id = static_cast<float>(e.at("lambda_id").get<double>());
            StyleEntry se{e.at("style_text").get<std::string>(),
                          e.value("style_image", std::string())};
            const float mw = static_cast<float>(e.value("mix_weight", 0.5));
            const StyleTarget target = resolve_entry(local, se, mw);
            const double got =
                eval_grid_style_loss(local, load_ckpt(e.at("checkpoint").get<std::string>()),
                                     load_ckpt(e.at("source_checkpoint").get<std::string>()), target);
            if (got != e.at("value").get<double>())
                throw NumericError("audit mismatch for eval_loss: got " + fmt_double(got));
        } else if (kind == "adapt_step_total") {
            RunEnv local = env;
            if (e.contains("lambda_id"))
                local.ctx.weights.lambda_id = static_cast<float>(e.at("lambda_id").get<double>());
            StyleEntry se{e.at("style_text").get<std::string>(),
                          e.value("style_image", std::string())};
            const StyleTarget target =
                resolve_entry(local, se, static_cast<float>(e.value("mix_weight", 0.5)));
            AdaptConfig ac;
            ac.steps = e.at("step").get<int>() + 1;
            ac.lr = e.at("lr").get<double>();
            ac.seed = e.at("seed").get<uint64_t>();
            auto [params, traj] = fast_adapt(
                local.ctx, load_ckpt(e.at("init_checkpoint").get<std::string>()), target, ac);
            const double got = traj.back().total;
            if (got != e.at("value").get<double>())
                throw NumericError("audit mismatch for adapt_step_total: got " + fmt_double(got));
        } else if (kind == "semantic") {
            Embedder eval_emb(EmbedderSpec{EmbedderKind::RandomFeatures, cfg.eval_seed, cfg.emb_dim,
                                           cfg.token_grid});
            const SemanticScore got =
                semantic_score(env, eval_emb, load_ckpt(e.at("checkpoint").get<std::string>()),
                               e.at("style_text").get<std::string>());
            if (got.mean != e.at("mean").get<double>() ||
                got.stddev != e.at("stddev").get<double>())
                throw NumericError("audit mismatch for semantic score");
        } else {
            throw UsageError("audit: unknown auditable kind " + kind);
        }
    }
    std::cout << "audit: verified " << picks.size() << " entries from " << report_path << "\n";
}

} // namespace avstyle
