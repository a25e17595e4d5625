#pragma once

#include "avstyle/embedder.hpp"

namespace avstyle {

struct LossWeights {
    float lambda_clip = 1.0f;
    float lambda_id = 1.0f;

    void validate() const;
};

struct LossBreakdown {
    float clip_term = 0.0f;
    float id_term = 0.0f;
    float total = 0.0f; // lambda_clip*clip_term + lambda_id*id_term, float evaluation order
};

// Style optimization target: unit embedding per training embedder (the two
// embedders have distinct text/image encoders, so each gets its own target).
struct StyleTarget {
    std::string text;       // empty when image-only
    std::string image_path; // empty when text-only
    std::vector<Tensor> embeddings;
};

// Mean over images x augmentations x embedders of 1 - cos(embed(aug(I)), target).
Tensor clip_loss(Tape& tape, const std::vector<Tensor>& images,
                 const std::vector<Tensor>& targets, const std::vector<Embedder>& embedders,
                 const AugmentationConfig& aug, Rng& rng);

// S_ij = 1 - <n_i, n_j> over unit tokens; zero diagonal, symmetric.
Tensor self_similarity(Tape& tape, const Tensor& tokens);

Tensor identity_loss_from_tokens(Tape& tape, const Tensor& styled_tokens,
                                 const Tensor& source_tokens);
// Frobenius distance between self-similarity matrices; source is a constant.
Tensor identity_loss(Tape& tape, const Tensor& styled, const Tensor& source,
                     const Embedder& embedder);

struct StyleLossResult {
    Tensor total;
    LossBreakdown breakdown;
};

StyleLossResult style_loss(Tape& tape, const std::vector<Tensor>& styled,
                           const std::vector<Tensor>& source, const StyleTarget& target,
                           const LossWeights& weights, const std::vector<Embedder>& embedders,
                           const AugmentationConfig& aug, Rng& rng);

} // namespace avstyle
