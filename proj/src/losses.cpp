#include "avstyle/losses.hpp"

#include <cmath>

namespace avstyle {

void LossWeights::validate() const {
    if (!(std::isfinite(lambda_clip) && lambda_clip >= 0.0f) ||
        !(std::isfinite(lambda_id) && lambda_id >= 0.0f))
        throw UsageError("LossWeights: lambdas must be finite and non-negative");
}

Tensor clip_loss(Tape& tape, const std::vector<Tensor>& images,
                 const std::vector<Tensor>& targets, const std::vector<Embedder>& embedders,
                 const AugmentationConfig& aug, Rng& rng) {
    if (images.empty()) throw UsageError("clip_loss: empty image list");
    if (embedders.empty() || targets.size() != embedders.size())
        throw UsageError("clip_loss: need one target per embedder");
    std::vector<Tensor> terms;
    terms.reserve(images.size() * static_cast<size_t>(aug.n_image_augs) * embedders.size());
    for (const auto& img : images) {
        const auto augmented = augment_images(tape, img, aug, rng);
        for (const auto& view : augmented)
            for (size_t e = 0; e < embedders.size(); ++e) {
                Tensor emb = embedders[e].embed_image(tape, view);
                Tensor sim = cosine(tape, emb, targets[e]);
                terms.push_back(add_scalar(tape, scale(tape, sim, -1.0f), 1.0f));
            }
    }
    return mean_scalars(tape, terms);
}

Tensor self_similarity(Tape& tape, const Tensor& tokens) {
    if (tokens.ndim() != 2) throw DimensionError("self_similarity: expected [N,d] tokens");
    Tensor gram = matmul_nt(tape, tokens, tokens);
    return add_scalar(tape, scale(tape, gram, -1.0f), 1.0f);
}

Tensor identity_loss_from_tokens(Tape& tape, const Tensor& styled_tokens,
                                 const Tensor& source_tokens) {
    if (styled_tokens.shape() != source_tokens.shape())
        throw DimensionError("identity_loss: token sets must match in shape");
    Tensor s_styled = self_similarity(tape, styled_tokens);
    Tensor s_source = self_similarity(tape, source_tokens);
    return frobenius_distance(tape, s_styled, s_source);
}

Tensor identity_loss(Tape& tape, const Tensor& styled, const Tensor& source,
                     const Embedder& embedder) {
    if (styled.shape() != source.shape()) throw DimensionError("identity_loss: shape mismatch");
    Tensor styled_tokens = embedder.image_tokens(tape, styled);
    // Source contributes no gradient: evaluate on a scratch tape from a
    // detached copy.
    Tape scratch;
    Tensor source_const =
        Tensor::from_data(source.shape(), {source.data().begin(), source.data().end()});
    Tensor source_tokens = embedder.image_tokens(scratch, source_const);
    return identity_loss_from_tokens(tape, styled_tokens, source_tokens);
}

StyleLossResult style_loss(Tape& tape, const std::vector<Tensor>& styled,
                           const std::vector<Tensor>& source, const StyleTarget& target,
                           const LossWeights& weights, const std::vector<Embedder>& embedders,
                           const AugmentationConfig& aug, Rng& rng) {
    weights.validate();
    if (styled.size() != source.size() || styled.empty())
        throw UsageError("style_loss: styled/source lists must be same nonempty length");
    for (size_t i = 0; i < styled.size(); ++i)
        if (styled[i].shape() != source[i].shape())
            throw DimensionError("style_loss: styled/source image shapes differ");

    Tensor clip_term = clip_loss(tape, styled, target.embeddings, embedders, aug, rng);

    std::vector<Tensor> id_terms;
    id_terms.reserve(styled.size());
    for (size_t i = 0; i < styled.size(); ++i)
        id_terms.push_back(identity_loss(tape, styled[i], source[i], embedders.front()));
    Tensor id_term = mean_scalars(tape, id_terms);

    Tensor total = add(tape, scale(tape, clip_term, weights.lambda_clip),
                       scale(tape, id_term, weights.lambda_id));
    StyleLossResult res;
    res.total = total;
    res.breakdown = LossBreakdown{clip_term.item(), id_term.item(), total.item()};
    return res;
}

} // namespace avstyle
