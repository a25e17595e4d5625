#pragma once

#include <map>
#include <utility>

#include "avstyle/avatar.hpp"
#include "avstyle/losses.hpp"

namespace avstyle {

struct StyleEntry {
    std::string text;
    std::string image_path; // optional reference image
};

struct StyleDataset {
    std::vector<StyleEntry> train;
    std::vector<StyleEntry> test;
};

// One style per line, '#' comments; optional tab-separated reference-image path.
std::vector<StyleEntry> load_style_list(const std::string& path);

struct ReptileConfig {
    int outer_iters = 300; // T
    int meta_batch = 4;    // M
    int inner_steps = 10;  // K
    double inner_lr = 4e-3;  // alpha
    double meta_lr = 6e-3;   // beta
    int views_per_step = 4;
    uint64_t seed = 1;

    void validate() const;
};

struct AdaptConfig {
    int steps = 200;
    double lr = 8e-3;
    uint64_t seed = 1;

    void validate() const;
};

struct TrajectoryStep {
    int step = 0;
    double clip_term = 0.0, id_term = 0.0, total = 0.0;
    double wall_ms = 0.0;
};
using Trajectory = std::vector<TrajectoryStep>;

// Everything a stylization run needs besides the parameters being optimized.
struct StylizeContext {
    const AvatarNet* net = nullptr;
    IdentityInput id_in;
    std::vector<Embedder> embedders; // training embedders (coarse + fine)
    AugmentationConfig aug;
    LossWeights weights;
    int views_per_step = 4;
};

StyleTarget resolve_style_target(const StyleEntry& entry, const std::vector<Embedder>& embedders,
                                 const std::vector<std::string>& templates, float mix_weight);

// 2 frontal + 2 side views with small random perturbations (cycled when
// views_per_step != 4), expressions drawn from jittered presets.
std::vector<std::pair<ViewSpec, Tensor>> draw_step_views(const StylizeContext& ctx, Rng& rng);

struct InnerLoopResult {
    ParamStore params;
    Trajectory trajectory;
    // Stylizable-partition displacement from the initialization, accumulated in
    // float64 (sum of -alpha*grad steps). Params satisfy p = f32(p0 + delta).
    std::map<std::string, std::vector<double>> delta;
};

// K plain SGD steps on the stylizable partition only; the caller's phi_init is
// never mutated. Identity-preservation sources are rendered from phi_init.
InnerLoopResult inner_loop(const StylizeContext& ctx, const ParamStore& phi_init,
                           const StyleTarget& style, int k_steps, double alpha, Rng rng);

// Deterministic per-task RNG streams (keyed by style index, not batch slot).
Rng reptile_task_rng(uint64_t seed, int outer_iter, int style_index);
Rng adapt_rng(uint64_t seed, const StyleTarget& style);

using OuterCallback = std::function<void(int outer_iter, double mean_inner_loss,
                                         const ParamStore& phi_meta)>;

ParamStore reptile_train(const StylizeContext& ctx, const ParamStore& phi,
                         const std::vector<StyleTarget>& train_styles, const ReptileConfig& cfg,
                         int workers, const OuterCallback& on_outer = {});

std::pair<ParamStore, Trajectory> fast_adapt(const StylizeContext& ctx,
                                             const ParamStore& phi_meta, const StyleTarget& style,
                                             const AdaptConfig& cfg);

// Joint-training baseline: Algorithm specialization with K=1, M=1.
ParamStore task_mixing_train(const StylizeContext& ctx, const ParamStore& phi,
                             const std::vector<StyleTarget>& train_styles, int iterations,
                             double inner_lr, double meta_lr, uint64_t seed, int views_per_step,
                             int workers, const OuterCallback& on_outer = {});

// Stylization from the pretrained weights themselves.
std::pair<ParamStore, Trajectory> direct_optimize(const StylizeContext& ctx, const ParamStore& phi,
                                                  const StyleTarget& style, const AdaptConfig& cfg);

} // namespace avstyle
