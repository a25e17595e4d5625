#pragma once

#include <functional>
#include <vector>

#include "avstyle/ops.hpp"
#include "avstyle/param_store.hpp"

namespace avstyle {

struct AvatarConfig {
    int map_h = 16, map_w = 16; // identity map resolution (must be 2*grid)
    int grid = 8;               // primitive grid side (G)
    int vox = 2;                // voxels per primitive side
    int img_h = 64, img_w = 64;
    int expr_dim = 8;  // raw expression vector length
    int code_dim = 16; // encoded expression code length
    int channels = 16; // trunk / decoder width
    int bias_blocks = 3;

    void validate() const;
};

struct IdentityInput {
    Tensor position_map; // [3, map_h, map_w], values in [-1,1]
    Tensor texture_map;  // [3, map_h, map_w], values in [0,1]
};

struct ViewSpec {
    double yaw = 0.0;   // radians, [-pi/2, pi/2]
    double pitch = 0.0; // radians, [-pi/6, pi/6]

    void validate() const;
};

// Grid of axis-aligned volumetric primitives. Payload values are already
// activated (RGB and alpha in [0,1] via sigmoid); scales are half-extents.
struct PrimitiveSlab {
    Tensor centers; // [G, G, 3]
    Tensor scales;  // [G, G]
    Tensor payload; // [G, G, 4, v, v, v], channel order RGBA, voxel order (z,y,x)
};

constexpr float kBackgroundGray = 0.5f;

/// Architecture + shapes; parameters live in an external ParamStore so clones
/// and partition bookkeeping stay explicit.
class AvatarNet {
public:
    explicit AvatarNet(AvatarConfig cfg);

    const AvatarConfig& config() const { return cfg_; }

    ParamStore init_params(Rng& rng) const;

    // Multi-scale bias maps (coarse to fine); the bias-mapper blocks that
    // produce the final maps are the stylizable partition.
    std::vector<Tensor> identity_encode(Tape& tape, const ParamStore& params,
                                        const IdentityInput& id_in) const;
    Tensor expression_encode(Tape& tape, const ParamStore& params, const Tensor& e) const;
    PrimitiveSlab decode(Tape& tape, const ParamStore& params,
                         const std::vector<Tensor>& bias_maps, const Tensor& z_e) const;
    Tensor render(Tape& tape, const PrimitiveSlab& slab, const ViewSpec& view) const;
    Tensor forward(Tape& tape, const ParamStore& params, const IdentityInput& id_in,
                   const Tensor& e, const ViewSpec& view) const;
    // Renders several (view, expression) draws off one identity encoding.
    std::vector<Tensor> forward_batch(Tape& tape, const ParamStore& params,
                                      const IdentityInput& id_in,
                                      const std::vector<std::pair<ViewSpec, Tensor>>& draws) const;

    void check_identity_input(const IdentityInput& id_in) const;

private:
    AvatarConfig cfg_;
    Tensor center_grid_; // constant [G,G,3] base positions
};

// Canonical expression presets (neutral, smile, frown, surprise, blink) padded
// to expr_dim; both the face generator and view sampling draw from these.
std::vector<Tensor> expression_presets(int expr_dim);

struct PretrainSample {
    int identity = 0;
    Tensor e;      // [expr_dim]
    ViewSpec view;
    Tensor image;  // [3, img_h, img_w] target
};

struct PretrainDataset {
    std::vector<IdentityInput> identities;
    std::vector<PretrainSample> samples;
};

struct PretrainStats {
    double loss_before = 0.0;
    double loss_after = 0.0;
    std::vector<double> step_losses;
};

// Mean L2 image loss over the whole dataset (no gradients).
double pretrain_eval_loss(const AvatarNet& net, const ParamStore& params,
                          const PretrainDataset& data);

// Plain SGD over single samples; the only stage that updates the frozen
// partition. Throws NumericError on divergence.
PretrainStats pretrain_photoreal(const AvatarNet& net, ParamStore& params,
                                 const PretrainDataset& data, int steps, double lr, Rng& rng,
                                 const std::function<void(int, double)>& on_step = {});

} // namespace avstyle
