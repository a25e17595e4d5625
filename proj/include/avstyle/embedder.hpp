#pragma once

#include <optional>
#include <string>
#include <vector>

#include "avstyle/ops.hpp"

namespace avstyle {

enum class EmbedderKind { RandomFeatures, External };

struct EmbedderSpec {
    EmbedderKind kind = EmbedderKind::RandomFeatures;
    uint64_t seed = 0;
    int dim = 64;
    int token_grid = 4;
};

struct AugmentationConfig {
    int n_image_augs = 4;
    float crop_min = 0.7f, crop_max = 1.0f;
    float flip_prob = 0.5f;
    std::vector<std::string> templates{"{}"};

    void validate() const;
};

/// Frozen image/text encoder pair mapping into a shared unit-sphere space.
/// The random_features backend derives every weight from the spec seed and is
/// never trained; the external backend loads a declared conv/linear stack from
/// a JSON model file (image side only, gradients via finite differences).
class Embedder {
public:
    explicit Embedder(EmbedderSpec spec);
    static Embedder external_from_file(const std::string& path);

    const EmbedderSpec& spec() const { return spec_; }

    // Unit embedding, differentiable w.r.t. img (img in [0,1], [3,h,w]).
    Tensor embed_image(Tape& tape, const Tensor& img) const;
    // Unit embedding of text; constant (not differentiable). Pinned pipeline:
    // lowercase/punct split -> FNV-1a row lookup -> mean -> 2-layer map -> l2.
    Tensor embed_text(const std::string& text) const;
    // [N, dim] unit-row spatial tokens from the deepest conv feature map.
    Tensor image_tokens(Tape& tape, const Tensor& img) const;

    uint64_t weights_hash() const;

private:
    Embedder() = default;
    Tensor backbone(Tape& tape, const Tensor& img) const; // deepest feature map
    Tensor embed_from_features(Tape& tape, const Tensor& feat) const;
    Tensor embed_image_external(Tape& tape, const Tensor& img) const;

    struct ConvLayer {
        Tensor w, b;
        int stride = 2;
    };
    EmbedderSpec spec_;
    std::vector<ConvLayer> convs_;
    Tensor head_w_, head_b_;   // final linear map
    Tensor text_table_;        // [rows, dim]
    Tensor text_w1_, text_b1_, text_w2_, text_b2_;
};

std::vector<std::string> tokenize_text(const std::string& text);

std::vector<Tensor> augment_images(Tape& tape, const Tensor& img, const AugmentationConfig& cfg,
                                   Rng& rng);
std::vector<std::string> augment_text(const std::string& text,
                                      const std::vector<std::string>& templates, Rng& rng);

// l2_normalize(w * text + (1-w) * image); either input may be absent.
Tensor mix_targets(const std::optional<Tensor>& text_emb, const std::optional<Tensor>& img_emb,
                   float w);

// Template list file: UTF-8, one template per line, '#' comments.
std::vector<std::string> load_templates(const std::string& path);

} // namespace avstyle
