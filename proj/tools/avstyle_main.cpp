#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "avstyle/experiment.hpp"

using namespace avstyle;

namespace {

ExperimentConfig load_config(const std::string& path) { return ExperimentConfig::load_file(path); }

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"avstyle: meta-learned fast style adaptation for volumetric avatars"};
    app.require_subcommand(1);

    std::string config_path = "configs/default.json";
    std::string text, image, checkpoint, init_ckpt, report_path, out_subdir;
    double lambda_id = -1.0, mix_weight = -1.0;
    bool resume = false;
    int n_styles = 20;
    int steps_override = -1;
    uint64_t seed_override = 0;
    bool seed_given = false;
    std::vector<uint64_t> seeds{1, 2, 3};
    std::vector<double> yaws{-0.5, -0.25, 0.0, 0.25, 0.5};
    std::vector<int> exprs{0, 1, 2};

    auto add_config = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "experiment config JSON")->capture_default_str();
    };

    auto* c_print = app.add_subcommand("print-config", "print the default configuration");
    auto* c_faces = app.add_subcommand("gen-faces", "generate the procedural pretraining dataset");
    add_config(c_faces);
    auto* c_pre = app.add_subcommand("pretrain", "photoreal pretraining on the face dataset");
    add_config(c_pre);
    c_pre->add_flag("--resume", resume, "continue from the existing checkpoint");
    auto* c_meta = app.add_subcommand("meta-train", "Reptile meta-training over the style dataset");
    add_config(c_meta);
    auto* c_mix = app.add_subcommand("mix-train", "task-mixing baseline training (K=1, M=1)");
    add_config(c_mix);
    auto* c_adapt = app.add_subcommand("adapt", "fast style adaptation from a checkpoint");
    add_config(c_adapt);
    c_adapt->add_option("--text", text, "style text prompt");
    c_adapt->add_option("--image", image, "style reference image (PNG)");
    c_adapt->add_option("--lambda-id", lambda_id, "identity loss weight override");
    c_adapt->add_option("--mix-weight", mix_weight, "text/image mixing weight in [0,1]");
    c_adapt->add_option("--init", init_ckpt, "initialization checkpoint (default: phi_meta)");
    c_adapt->add_option("--seed", seed_override, "adaptation seed override")
        ->each([&](const std::string&) { seed_given = true; });
    c_adapt->add_option("--steps", steps_override, "adaptation step count override");
    auto* c_cmp = app.add_subcommand("compare-inits", "three-way initialization comparison");
    add_config(c_cmp);
    c_cmp->add_option("--styles", n_styles, "number of held-out styles")->capture_default_str();
    c_cmp->add_option("--seeds", seeds, "adaptation seeds")->capture_default_str();
    auto* c_eval = app.add_subcommand("eval-semantic", "independent-embedder semantic score");
    add_config(c_eval);
    c_eval->add_option("--checkpoint", checkpoint, "stylized checkpoint")->required();
    c_eval->add_option("--text", text, "style text")->required();
    auto* c_render = app.add_subcommand("render", "render a checkpoint over views x expressions");
    add_config(c_render);
    c_render->add_option("--checkpoint", checkpoint, "checkpoint to render")->required();
    c_render->add_option("--yaws", yaws, "yaw angles in radians")->capture_default_str();
    c_render->add_option("--exprs", exprs, "expression preset indices")->capture_default_str();
    c_render->add_option("--out", out_subdir, "output subdirectory");
    auto* c_audit = app.add_subcommand("audit", "recompute random entries of a run report");
    add_config(c_audit);
    c_audit->add_option("--report", report_path, "report JSON to audit")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (c_print->parsed()) {
            std::cout << ExperimentConfig{}.to_json_text() << "\n";
            return 0;
        }
        ExperimentConfig cfg = load_config(config_path);
        if (c_faces->parsed()) {
            cmd_gen_faces(cfg);
        } else if (c_pre->parsed()) {
            cmd_pretrain(cfg, resume);
        } else if (c_meta->parsed()) {
            cmd_meta_train(cfg);
        } else if (c_mix->parsed()) {
            cmd_mix_train(cfg);
        } else if (c_adapt->parsed()) {
            if (seed_given) cfg.adapt.seed = seed_override;
            if (steps_override >= 0) cfg.adapt.steps = steps_override;
            cmd_adapt(cfg, text, image, lambda_id, mix_weight, init_ckpt);
        } else if (c_cmp->parsed()) {
            cmd_compare_inits(cfg, n_styles, seeds);
        } else if (c_eval->parsed()) {
            cmd_eval_semantic(cfg, checkpoint, text);
        } else if (c_render->parsed()) {
            cmd_render(cfg, checkpoint, yaws, exprs, out_subdir);
        } else if (c_audit->parsed()) {
            cmd_audit(cfg, report_path);
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const DegenerateInputError& e) {
        std::cerr << "degenerate input: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const DimensionError& e) {
        std::cerr << "dimension error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
