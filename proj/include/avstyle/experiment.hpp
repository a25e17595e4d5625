#pragma once

#include <string>
#include <vector>

#include "avstyle/faces.hpp"
#include "avstyle/metaopt.hpp"

namespace avstyle {

/// Validated experiment configuration (strict JSON: unknown keys rejected).
struct ExperimentConfig {
    AvatarConfig model;

    int emb_dim = 64;
    int token_grid = 4;
    uint64_t train_seed_a = 101, train_seed_b = 202, eval_seed = 707;

    AugmentationConfig aug; // templates filled from templates_path at load time
    std::string templates_path = "data/text_templates.txt";

    LossWeights weights;
    ReptileConfig reptile;
    AdaptConfig adapt;

    int pretrain_steps = 2500;
    double pretrain_lr = 2.0;
    uint64_t pretrain_seed = 5;
    int identities = 2;
    uint64_t faces_seed = 11;

    int mix_iterations = 12000;
    uint64_t mix_seed = 1;

    std::string train_styles_path = "data/styles_train.txt";
    std::string test_styles_path = "data/styles_test.txt";
    int identity_index = 0;
    float mix_weight = 0.5f;

    std::string output_dir = "out";
    int workers = 4;
    int checkpoint_every = 100;

    static ExperimentConfig load_file(const std::string& path);
    static ExperimentConfig from_json_text(const std::string& text);
    std::string to_json_text() const;
    void validate() const;

    // Derived paths under output_dir.
    std::string faces_dir() const { return output_dir + "/faces"; }
    std::string ckpt_dir() const { return output_dir + "/checkpoints"; }
    std::string pretrained_ckpt() const { return ckpt_dir() + "/pretrained.avcp"; }
    std::string meta_ckpt() const { return ckpt_dir() + "/phi_meta.avcp"; }
    std::string mix_ckpt() const { return ckpt_dir() + "/phi_mix.avcp"; }
};

// Lazily constructed shared pieces for a run.
struct RunEnv {
    ExperimentConfig cfg;
    AvatarNet net;
    std::vector<Embedder> train_embedders;
    StylizeContext ctx; // identity input resolved from faces_seed/identity_index

    explicit RunEnv(const ExperimentConfig& c);
};

struct SemanticScore {
    double mean = 0.0;
    double stddev = 0.0;
};

// Fixed 5x5 (view, expression) evaluation grid.
std::vector<std::pair<ViewSpec, Tensor>> evaluation_grid(const AvatarConfig& cfg);

// Deterministic style loss of a checkpoint on the evaluation grid (identity
// augmentation, no randomness); `source` supplies identity-preservation refs.
double eval_grid_style_loss(const RunEnv& env, const ParamStore& params,
                            const ParamStore& source_params, const StyleTarget& target);

SemanticScore semantic_score(const RunEnv& env, const Embedder& eval_embedder,
                             const ParamStore& params, const std::string& style_text);

uint64_t dataset_content_hash(const ExperimentConfig& cfg);

std::string style_slug(const std::string& text);

// CLI command bodies; they throw (UsageError/IoError -> exit 2, NumericError ->
// exit 3) and write artifacts + a report.json under the output directory.
void cmd_gen_faces(const ExperimentConfig& cfg);
void cmd_pretrain(const ExperimentConfig& cfg, bool resume);
void cmd_meta_train(const ExperimentConfig& cfg);
void cmd_mix_train(const ExperimentConfig& cfg);
void cmd_adapt(const ExperimentConfig& cfg, const std::string& style_text,
               const std::string& style_image, double lambda_id_override, double mix_weight,
               const std::string& init_checkpoint);
void cmd_compare_inits(const ExperimentConfig& cfg, int n_styles,
                       const std::vector<uint64_t>& seeds);
void cmd_eval_semantic(const ExperimentConfig& cfg, const std::string& checkpoint,
                       const std::string& style_text);
void cmd_render(const ExperimentConfig& cfg, const std::string& checkpoint,
                const std::vector<double>& yaws, const std::vector<int>& expr_indices,
                const std::string& out_subdir);
void cmd_audit(const ExperimentConfig& cfg, const std::string& report_path);

} // namespace avstyle
