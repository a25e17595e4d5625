#include "avstyle/metaopt.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "avstyle/image_io.hpp"
#include "avstyle/threading.hpp"

namespace avstyle {

void ReptileConfig::validate() const {
    if (outer_iters < 1 || meta_batch < 1 || inner_steps < 1)
        throw UsageError("ReptileConfig: T, M, K must all be >= 1");
    if (!(inner_lr > 0.0) || !(meta_lr >= 0.0))
        throw UsageError("ReptileConfig: learning rates must be positive");
    if (views_per_step < 1) throw UsageError("ReptileConfig: views_per_step must be >= 1");
}

void AdaptConfig::validate() const {
    if (steps < 0) throw UsageError("AdaptConfig: steps must be >= 0");
    if (!(lr > 0.0)) throw UsageError("AdaptConfig: lr must be positive");
}

std::vector<StyleEntry> load_style_list(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open style list " + path);
    std::vector<StyleEntry> out;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == '#') continue;
        StyleEntry e;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            e.text = line.substr(first);
        } else {
            e.text = line.substr(first, tab - first);
            e.image_path = line.substr(tab + 1);
        }
        while (!e.text.empty() && (e.text.back() == ' ' || e.text.back() == '\t')) e.text.pop_back();
        out.push_back(std::move(e));
    }
    return out;
}

StyleTarget resolve_style_target(const StyleEntry& entry, const std::vector<Embedder>& embedders,
                                 const std::vector<std::string>& templates, float mix_weight) {
    if (entry.text.empty() && entry.image_path.empty())
        throw UsageError("style entry has neither text nor image");
    StyleTarget target;
    target.text = entry.text;
    target.image_path = entry.image_path;
    Tensor ref_img;
    if (!entry.image_path.empty()) ref_img = read_png(entry.image_path);
    for (const auto& emb : embedders) {
        std::optional<Tensor> text_emb, img_emb;
        if (!entry.text.empty()) {
            // Template-averaged prompt embedding, renormalized.
            Rng tmpl_rng(0);
            const auto prompts = augment_text(entry.text, templates, tmpl_rng);
            Tensor acc = Tensor::zeros({emb.spec().dim});
            auto ap = acc.data_mut();
            for (const auto& p : prompts) {
                Tensor e = emb.embed_text(p);
                for (int i = 0; i < e.numel(); ++i) ap[i] += e.at(i);
            }
            Tape scratch;
            text_emb = l2_normalize(scratch, acc).clone();
        }
        if (ref_img.defined()) {
            Tape scratch;
            img_emb = emb.embed_image(scratch, ref_img).clone();
        }
        const float w = text_emb && img_emb ? mix_weight : (text_emb ? 1.0f : 0.0f);
        target.embeddings.push_back(mix_targets(text_emb, img_emb, w));
    }
    return target;
}

std::vector<std::pair<ViewSpec, Tensor>> draw_step_views(const StylizeContext& ctx, Rng& rng) {
    const auto presets = expression_presets(ctx.net->config().expr_dim);
    std::vector<std::pair<ViewSpec, Tensor>> out;
    for (int i = 0; i < ctx.views_per_step; ++i) {
        ViewSpec view;
        switch (i % 4) {
            case 0: view.yaw = rng.uniform(-0.10, 0.10); break;            // frontal
            case 1: view.yaw = 0.45 + rng.uniform(-0.10, 0.10); break;     // right side
            case 2: view.yaw = rng.uniform(-0.10, 0.10); break;            // frontal
            default: view.yaw = -0.45 + rng.uniform(-0.10, 0.10); break;   // left side
        }
        view.pitch = rng.uniform(-0.08, 0.08);
        Tensor e = presets[rng.below(presets.size())].clone();
        const int jitter_dims = std::min(4, ctx.net->config().expr_dim);
        for (int d = 0; d < jitter_dims; ++d) e.data_mut()[d] += rng.gaussf(0.05f);
        out.emplace_back(view, std::move(e));
    }
    return out;
}

Rng reptile_task_rng(uint64_t seed, int outer_iter, int style_index) {
    return Rng(mix_keys(seed, 0x1224, static_cast<uint64_t>(outer_iter),
                        static_cast<uint64_t>(style_index)));
}

Rng adapt_rng(uint64_t seed, const StyleTarget& style) {
    uint64_t style_key = fnv1a64(style.text.data(), style.text.size());
    style_key = fnv1a64(style.image_path.data(), style.image_path.size(), style_key);
    return Rng(mix_keys(seed, 0xAD47, style_key));
}

InnerLoopResult inner_loop(const StylizeContext& ctx, const ParamStore& phi_init,
                           const StyleTarget& style, int k_steps, double alpha, Rng rng) {
    if (k_steps < 0) throw UsageError("inner_loop: negative step count");
    if (!(alpha > 0.0)) throw UsageError("inner_loop: alpha must be positive");
    if (style.embeddings.size() != ctx.embedders.size())
        throw UsageError("inner_loop: style target embedder count mismatch");

    InnerLoopResult res;
    res.params = phi_init.clone();
    res.params.set_requires_grad(Selector::All, false);
    res.params.set_requires_grad(Selector::Stylizable, true);

    // Identity-preservation source: the (frozen) initialization of this run.
    ParamStore src_params = phi_init.clone();
    src_params.set_requires_grad(Selector::All, false);

    const auto stylizable = res.params.paths(Partition::Stylizable);
    std::map<std::string, std::vector<float>> base;
    for (const auto& p : stylizable) {
        const auto d = res.params.at(p).data();
        base[p] = std::vector<float>(d.begin(), d.end());
        res.delta[p] = std::vector<double>(d.size(), 0.0);
    }

    for (int step = 0; step < k_steps; ++step) {
        const auto t_start = std::chrono::steady_clock::now();
        const auto draws = draw_step_views(ctx, rng);

        Tape tape;
        std::vector<Tensor> styled = ctx.net->forward_batch(tape, res.params, ctx.id_in, draws);
        Tape scratch;
        std::vector<Tensor> source = ctx.net->forward_batch(scratch, src_params, ctx.id_in, draws);

        StyleLossResult loss;
        try {
            loss = style_loss(tape, styled, source, style, ctx.weights, ctx.embedders, ctx.aug, rng);
            if (!std::isfinite(loss.breakdown.total))
                throw NumericError("non-finite stylization loss");
            res.params.zero_grads(Selector::Stylizable);
            backward(tape, loss.total);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (inner step " + std::to_string(step) + ")");
        }

        for (const auto& p : stylizable) {
            Tensor& t = res.params.at(p);
            auto grad = t.grad();
            auto data = t.data_mut();
            auto& delta = res.delta[p];
            const auto& b = base[p];
            for (size_t i = 0; i < data.size(); ++i) {
                delta[i] -= alpha * static_cast<double>(grad[i]);
                data[i] = static_cast<float>(static_cast<double>(b[i]) + delta[i]);
            }
            t.clear_grad();
        }

        const double ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t_start)
                              .count();
        res.trajectory.push_back(TrajectoryStep{step, loss.breakdown.clip_term,
                                                loss.breakdown.id_term, loss.breakdown.total, ms});
    }
    return res;
}

ParamStore reptile_train(const StylizeContext& ctx, const ParamStore& phi,
                         const std::vector<StyleTarget>& train_styles, const ReptileConfig& cfg,
                         int workers, const OuterCallback& on_outer) {
    cfg.validate();
    if (train_styles.empty()) throw UsageError("reptile_train: empty style set");
    if (static_cast<size_t>(cfg.meta_batch) > train_styles.size())
        throw UsageError("reptile_train: meta batch larger than style set");

    ParamStore phi_meta = phi.clone();
    const auto stylizable = phi_meta.paths(Partition::Stylizable);

    StylizeContext task_ctx = ctx;
    task_ctx.views_per_step = cfg.views_per_step;

    std::vector<int> pool(train_styles.size());
    std::iota(pool.begin(), pool.end(), 0);

    for (int t = 1; t <= cfg.outer_iters; ++t) {
        // Sample M distinct styles (partial Fisher-Yates, per-iteration stream).
        Rng sample_rng(mix_keys(cfg.seed, 0x5A17, static_cast<uint64_t>(t)));
        std::vector<int> chosen;
        for (int i = 0; i < cfg.meta_batch; ++i) {
            const auto j = i + static_cast<int>(sample_rng.below(pool.size() - static_cast<size_t>(i)));
            std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
            chosen.push_back(pool[static_cast<size_t>(i)]);
        }

        const uint64_t guard = phi_meta.content_hash();
        std::vector<InnerLoopResult> results(chosen.size());
        parallel_for(static_cast<int>(chosen.size()), workers, [&](int i) {
            const int style_idx = chosen[static_cast<size_t>(i)];
            results[static_cast<size_t>(i)] =
                inner_loop(task_ctx, phi_meta, train_styles[static_cast<size_t>(style_idx)],
                           cfg.inner_steps, cfg.inner_lr,
                           reptile_task_rng(cfg.seed, t, style_idx));
        });
        if (phi_meta.content_hash() != guard)
            throw std::logic_error("reptile_train: inner loop mutated the meta parameters");

        // Aggregate deltas in ascending style-index order so the reduction is
        // independent of batch permutation and worker scheduling.
        std::vector<int> order(chosen.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            return chosen[static_cast<size_t>(a)] < chosen[static_cast<size_t>(b)];
        });

        const double scale_m = cfg.meta_lr / static_cast<double>(cfg.meta_batch);
        for (const auto& path : stylizable) {
            Tensor& param = phi_meta.at(path);
            auto data = param.data_mut();
            std::vector<double> sum(data.size(), 0.0);
            for (int oi : order) {
                const auto& d = results[static_cast<size_t>(oi)].delta.at(path);
                for (size_t i = 0; i < sum.size(); ++i) sum[i] += d[i];
            }
            for (size_t i = 0; i < data.size(); ++i)
                data[i] = static_cast<float>(static_cast<double>(data[i]) + scale_m * sum[i]);
        }

        if (on_outer) {
            double mean_loss = 0.0;
            int n = 0;
            for (const auto& r : results)
                for (const auto& s : r.trajectory) {
                    mean_loss += s.total;
                    ++n;
                }
            on_outer(t, n ? mean_loss / n : 0.0, phi_meta);
        }
    }
    return phi_meta;
}

std::pair<ParamStore, Trajectory> fast_adapt(const StylizeContext& ctx,
                                             const ParamStore& phi_meta, const StyleTarget& style,
                                             const AdaptConfig& cfg) {
    cfg.validate();
    if (cfg.steps == 0) return {phi_meta.clone(), {}};
    auto res = inner_loop(ctx, phi_meta, style, cfg.steps, cfg.lr, adapt_rng(cfg.seed, style));
    return {std::move(res.params), std::move(res.trajectory)};
}

ParamStore task_mixing_train(const StylizeContext& ctx, const ParamStore& phi,
                             const std::vector<StyleTarget>& train_styles, int iterations,
                             double inner_lr, double meta_lr, uint64_t seed, int views_per_step,
                             int workers, const OuterCallback& on_outer) {
    ReptileConfig cfg;
    cfg.outer_iters = iterations;
    cfg.meta_batch = 1;
    cfg.inner_steps = 1;
    cfg.inner_lr = inner_lr;
    cfg.meta_lr = meta_lr;
    cfg.views_per_step = views_per_step;
    cfg.seed = seed;
    return reptile_train(ctx, phi, train_styles, cfg, workers, on_outer);
}

std::pair<ParamStore, Trajectory> direct_optimize(const StylizeContext& ctx, const ParamStore& phi,
                                                  const StyleTarget& style, const AdaptConfig& cfg) {
    return fast_adapt(ctx, phi, style, cfg);
}

} // namespace avstyle
