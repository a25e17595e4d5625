#pragma once

#include "avstyle/avatar.hpp"

namespace avstyle {

// Parametric cartoon face: an ellipse head with eyes/brows/mouth whose screen
// positions follow the same orthographic camera model as the renderer, so the
// avatar can actually reproduce the geometry it is trained on.
struct FaceIdentity {
    float skin[3], hair[3], eye[3], lip[3];
    float head_a, head_b;   // head semi-axes
    float head_depth;       // ellipsoid depth semi-axis
    float eye_dx, eye_y, eye_r;
    float mouth_y, mouth_w, mouth_h;
    float brow_y;
};

FaceIdentity canonical_identity();
FaceIdentity sample_identity(Rng& rng);

// e follows expression_presets semantics: [smile, jaw-open, eye-open, brow].
Tensor face_image(const FaceIdentity& id, double yaw, double pitch, const Tensor& e, int h, int w);

IdentityInput identity_maps(const FaceIdentity& id, const AvatarConfig& cfg);

inline const std::vector<double>& face_yaw_grid() {
    static const std::vector<double> g{-0.5, -0.25, 0.0, 0.25, 0.5};
    return g;
}

std::vector<FaceIdentity> make_identities(uint64_t seed, int count);

// 5 yaws x 5 expression presets per identity, pitch 0.
PretrainDataset make_face_dataset(const AvatarConfig& cfg, uint64_t seed, int n_identities);

// Random (view, expression) pairs never present in the training grid.
std::vector<PretrainSample> held_out_samples(const AvatarConfig& cfg, uint64_t seed, int identity,
                                             int count);

} // namespace avstyle
