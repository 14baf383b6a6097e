// gaze-vit: eye-gaze-guided vision transformer pipeline.
// Subcommands cover the full flow: raw gaze CSV -> fixations -> heatmap ->
// patch mask -> training/evaluation/explanation, plus a synthetic
// spurious-correlation benchmark and a mask-variant ablation harness.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "egvit/gaze.hpp"
#include "egvit/gradcam.hpp"
#include "egvit/io.hpp"
#include "egvit/metrics.hpp"
#include "egvit/synth.hpp"
#include "egvit/threads.hpp"
#include "egvit/train.hpp"
#include "egvit/vit.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

void write_args_json(const fs::path& out, const ordered_json& j) {
    fs::path dir = out;
    if (!fs::is_directory(dir)) dir = dir.parent_path();
    if (dir.empty()) dir = ".";
    fs::create_directories(dir);
    std::ofstream os(dir / "args.json", std::ios::binary);
    os << j.dump(2) << "\n";
}

std::string auc_field(const egvit::Metrics& m) {
    if (!m.auc_defined()) return "NA";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", m.auc);
    return buf;
}

// shared model-architecture flags
struct ModelFlags {
    egvit::ModelConfig cfg;
    std::string mask_mode = "drop";
    std::string reinject = "on";

    void attach(CLI::App* cmd) {
        cmd->add_option("--image-size", cfg.image_size, "Input image side in pixels");
        cmd->add_option("--patch", cfg.patch_size, "Patch side in pixels");
        cmd->add_option("--channels", cfg.channels, "Input channels (1 or 3)");
        cmd->add_option("--dim", cfg.hidden_dim, "Hidden dimension");
        cmd->add_option("--depth", cfg.depth, "Encoder layers");
        cmd->add_option("--heads", cfg.heads, "Attention heads");
        cmd->add_option("--mlp-ratio", cfg.mlp_ratio, "MLP expansion ratio");
        cmd->add_option("--mask-mode", mask_mode, "Patch mask mode")->check(CLI::IsMember({"drop", "zero"}));
        cmd->add_option("--reinject", reinject, "Residual re-injection before the last layer")
            ->check(CLI::IsMember({"on", "off"}));
    }

    egvit::ModelConfig resolve(int num_classes) const {
        egvit::ModelConfig c = cfg;
        c.num_classes = num_classes;
        c.mask_mode = mask_mode == "zero" ? egvit::MaskMode::zero : egvit::MaskMode::drop;
        c.reinject_enabled = reinject == "on";
        c.validate();
        return c;
    }

    ordered_json to_json(int num_classes) const { return egvit::config_to_json(resolve(num_classes)); }
};

struct TrainFlags {
    egvit::TrainConfig cfg;
    std::string variant = "separated";
    bool no_augment = false;
    bool no_eval_mask = false;

    void attach(CLI::App* cmd) {
        cmd->add_option("--epochs", cfg.epochs, "Training epochs");
        cmd->add_option("--lr", cfg.base_lr, "Base learning rate");
        cmd->add_option("--warmup", cfg.warmup_epochs, "Warmup epochs");
        cmd->add_option("--batch", cfg.batch_size, "Batch size");
        cmd->add_option("--min-lr", cfg.min_lr, "Cosine floor");
        cmd->add_option("--seed", cfg.seed, "RNG seed");
        cmd->add_option("--mask-variant", variant, "Gaze mask variant")
            ->check(CLI::IsMember({"separated", "gathered", "none"}));
        cmd->add_option("--k", cfg.mask_k, "Separated mask: top-k cells");
        cmd->add_option("--window", cfg.mask_window, "Gathered mask: window side");
        cmd->add_flag("--no-augment", no_augment, "Disable flip/jitter augmentation");
        cmd->add_flag("--no-eval-mask", no_eval_mask, "Do not apply gaze masks at evaluation");
    }

    egvit::TrainConfig resolve() const {
        egvit::TrainConfig c = cfg;
        c.mask_variant = egvit::mask_variant_from_string(variant);
        c.augment = !no_augment;
        c.apply_mask_at_eval = !no_eval_mask;
        c.validate();
        return c;
    }

    ordered_json to_json() const {
        const egvit::TrainConfig c = resolve();
        ordered_json j;
        j["epochs"] = c.epochs;
        j["base_lr"] = c.base_lr;
        j["warmup_epochs"] = c.warmup_epochs;
        j["batch_size"] = c.batch_size;
        j["min_lr"] = c.min_lr;
        j["seed"] = c.seed;
        j["mask_variant"] = egvit::to_string(c.mask_variant);
        j["mask_k"] = c.mask_k;
        j["mask_window"] = c.mask_window;
        j["augment"] = c.augment;
        j["apply_mask_at_eval"] = c.apply_mask_at_eval;
        return j;
    }
};

int cmd_fixations(const std::string& gaze_path, const std::string& out_path, double dispersion,
                  double min_duration) {
    egvit::GazeTrace trace = egvit::read_gaze_csv(gaze_path);
    egvit::FixationConfig fc{dispersion, min_duration};
    std::vector<egvit::Fixation> fix = egvit::detect_fixations(trace, fc);
    std::ofstream os(out_path, std::ios::binary);
    if (!os) throw egvit::IoError("cannot open for writing: " + out_path);
    os << "cx,cy,start_ms,end_ms,duration_ms\n";
    char line[160];
    for (const auto& f : fix) {
        std::snprintf(line, sizeof line, "%.6g,%.6g,%.6g,%.6g,%.6g\n", f.cx, f.cy, f.start_ms, f.end_ms,
                      f.duration_ms());
        os << line;
    }
    ordered_json j;
    j["command"] = "fixations";
    j["gaze"] = gaze_path;
    j["out"] = out_path;
    j["dispersion_px"] = dispersion;
    j["min_duration_ms"] = min_duration;
    write_args_json(out_path, j);
    std::fprintf(stderr, "wrote %zu fixations to %s\n", fix.size(), out_path.c_str());
    return 0;
}

int cmd_heatmap(const std::string& gaze_path, const std::string& out_path, int width, int height,
                double sigma, bool no_duration_weight, double dispersion, double min_duration,
                const std::string& pgm_path) {
    egvit::GazeTrace trace = egvit::read_gaze_csv(gaze_path);
    auto fix = egvit::detect_fixations(trace, {dispersion, min_duration});
    egvit::Heatmap hm = egvit::render_heatmap(fix, width, height, sigma, !no_duration_weight);
    egvit::write_eghm(out_path, hm);
    if (!pgm_path.empty()) egvit::write_pgm16(pgm_path, hm);
    ordered_json j;
    j["command"] = "heatmap";
    j["gaze"] = gaze_path;
    j["out"] = out_path;
    j["width"] = width;
    j["height"] = height;
    j["sigma"] = sigma;
    j["duration_weighted"] = !no_duration_weight;
    j["dispersion_px"] = dispersion;
    j["min_duration_ms"] = min_duration;
    if (!pgm_path.empty()) j["pgm"] = pgm_path;
    write_args_json(out_path, j);
    return 0;
}

int cmd_mask(const std::string& heatmap_path, const std::string& out_path, const std::string& variant,
             int k, int window, int grid) {
    egvit::Heatmap hm = egvit::read_eghm(heatmap_path);
    egvit::GridHeatmap g = egvit::downsample_heatmap(hm, grid, grid);
    egvit::PatchMask mask = variant == "gathered" ? egvit::gathered_mask(g, window, window)
                                                  : egvit::separated_mask(g, k);
    egvit::write_mask_text(out_path, mask, grid, grid);
    ordered_json j;
    j["command"] = "mask";
    j["heatmap"] = heatmap_path;
    j["out"] = out_path;
    j["variant"] = variant;
    j["k"] = k;
    j["window"] = window;
    j["grid"] = grid;
    write_args_json(out_path, j);
    return 0;
}

struct SynthFlags {
    int image_size = 224;
    int classes = 2;
    int grid = 14;
    int n_train = 2000;
    int n_test = 500;
    double rho_train = 0.95;
    double rho_test = 0.5;
    std::uint64_t seed = 0;
};

int cmd_synth(const SynthFlags& f, const std::string& out_dir) {
    egvit::SynthSpec spec = egvit::SynthSpec::scaled(f.image_size, f.classes, f.grid);
    spec.n_train = f.n_train;
    spec.n_test = f.n_test;
    spec.shortcut.rho_train = f.rho_train;
    spec.shortcut.rho_test = f.rho_test;
    egvit::generate_dataset(spec, f.seed, out_dir);
    ordered_json j;
    j["command"] = "synth";
    j["out"] = out_dir;
    j["seed"] = f.seed;
    j["image_size"] = f.image_size;
    j["classes"] = f.classes;
    j["grid"] = f.grid;
    j["n_train"] = f.n_train;
    j["n_test"] = f.n_test;
    j["rho_train"] = f.rho_train;
    j["rho_test"] = f.rho_test;
    write_args_json(out_dir, j);
    std::fprintf(stderr, "synth dataset written to %s\n", out_dir.c_str());
    return 0;
}

int cmd_train(const std::string& data_path, const std::string& out_dir, const ModelFlags& mf,
              const TrainFlags& tf) {
    egvit::DatasetManifest manifest = egvit::load_manifest(data_path);
    egvit::Dataset data = egvit::load_dataset(data_path, manifest);
    egvit::ModelConfig mc = mf.resolve(static_cast<int>(manifest.classes.size()));
    egvit::TrainConfig tc = tf.resolve();
    fs::create_directories(out_dir);
    ordered_json j;
    j["command"] = "train";
    j["data"] = data_path;
    j["out"] = out_dir;
    j["model"] = mf.to_json(static_cast<int>(manifest.classes.size()));
    j["train"] = tf.to_json();
    write_args_json(out_dir, j);

    egvit::TrainResult r = egvit::train(data, mc, tc, out_dir);
    std::fprintf(stderr, "best epoch %d; checkpoints and history.csv in %s\n", r.best_epoch, out_dir.c_str());
    std::printf("final_test acc=%.4f f1=%.4f auc=%s\n", r.final_test_metrics.acc, r.final_test_metrics.f1,
                auc_field(r.final_test_metrics).c_str());
    return 0;
}

int cmd_eval(const std::string& ckpt_dir, const std::string& data_path, const std::string& split,
             const std::string& out_dir, const TrainFlags& tf) {
    egvit::Checkpoint ck = egvit::load_checkpoint(ckpt_dir);
    egvit::DatasetManifest manifest = egvit::load_manifest(data_path);
    egvit::Dataset data = egvit::load_dataset(data_path, manifest);
    egvit::TrainConfig tc = tf.resolve();
    const auto& records = split == "train" ? data.train : data.test;
    egvit::EvalResult r = egvit::evaluate_split(ck.params, ck.config, tc, records);

    fs::create_directories(out_dir);
    ordered_json j;
    j["command"] = "eval";
    j["checkpoint"] = ckpt_dir;
    j["data"] = data_path;
    j["split"] = split;
    j["out"] = out_dir;
    j["train"] = tf.to_json();
    write_args_json(out_dir, j);

    ordered_json m;
    m["split"] = split;
    m["n"] = records.size();
    m["acc"] = r.metrics.acc;
    m["f1"] = r.metrics.f1;
    if (r.metrics.auc_defined())
        m["auc"] = r.metrics.auc;
    else
        m["auc"] = nullptr;
    m["loss"] = r.loss;
    m["per_class"] = ordered_json::array();
    for (std::size_t c = 0; c < r.metrics.per_class.size(); ++c) {
        const auto& pc = r.metrics.per_class[c];
        ordered_json row;
        row["class"] = manifest.classes[c];
        row["support"] = pc.support;
        row["precision"] = pc.precision;
        row["recall"] = pc.recall;
        row["f1"] = pc.f1;
        if (std::isnan(pc.auc))
            row["auc"] = nullptr;
        else
            row["auc"] = pc.auc;
        m["per_class"].push_back(row);
    }
    std::ofstream os(fs::path(out_dir) / "metrics.json", std::ios::binary);
    os << m.dump(2) << "\n";
    std::printf("%s acc=%.4f f1=%.4f auc=%s loss=%.4f\n", split.c_str(), r.metrics.acc, r.metrics.f1,
                auc_field(r.metrics).c_str(), r.loss);
    return 0;
}

int cmd_explain(const std::string& ckpt_dir, const std::string& image_path, const std::string& heatmap_path,
                const std::string& variant, int k, int window, int target_class, int tap_layer,
                const std::string& out_dir) {
    egvit::Checkpoint ck = egvit::load_checkpoint(ckpt_dir);
    egvit::Image img = egvit::convert_channels(egvit::read_image(image_path), ck.config.channels);

    egvit::PatchMask mask;
    const egvit::PatchMask* mask_ptr = nullptr;
    if (variant != "none") {
        if (heatmap_path.empty())
            throw egvit::MissingHeatmap("explain: --heatmap required for masked variants");
        egvit::Heatmap hm = egvit::read_eghm(heatmap_path);
        egvit::GridHeatmap g = egvit::downsample_heatmap(hm, ck.config.grid(), ck.config.grid());
        mask = variant == "gathered" ? egvit::gathered_mask(g, window, window) : egvit::separated_mask(g, k);
        mask_ptr = &mask;
    }

    egvit::CamMap cam = egvit::grad_cam(ck.params, ck.config, img, mask_ptr, target_class, tap_layer);
    fs::create_directories(out_dir);
    egvit::write_eghm(fs::path(out_dir) / "cam.eghm", egvit::cam_to_heatmap(cam));
    egvit::write_png(fs::path(out_dir) / "overlay.png", egvit::cam_overlay(cam, img), 8);

    ordered_json j;
    j["command"] = "explain";
    j["checkpoint"] = ckpt_dir;
    j["image"] = image_path;
    j["heatmap"] = heatmap_path;
    j["mask_variant"] = variant;
    j["k"] = k;
    j["window"] = window;
    j["target_class"] = target_class;
    j["tap_layer"] = tap_layer;
    j["out"] = out_dir;
    write_args_json(out_dir, j);
    std::printf("target_class=%d degenerate=%d\n", cam.target_class, cam.degenerate ? 1 : 0);
    return 0;
}

int cmd_ablate(const std::string& data_path, const std::string& out_dir, const ModelFlags& mf,
               const TrainFlags& tf, const std::vector<std::uint64_t>& seeds) {
    egvit::DatasetManifest manifest = egvit::load_manifest(data_path);
    egvit::Dataset data = egvit::load_dataset(data_path, manifest);
    fs::create_directories(out_dir);
    ordered_json j;
    j["command"] = "ablate";
    j["data"] = data_path;
    j["out"] = out_dir;
    j["model"] = mf.to_json(static_cast<int>(manifest.classes.size()));
    j["train"] = tf.to_json();
    j["seeds"] = seeds;
    write_args_json(out_dir, j);

    std::ofstream csv(fs::path(out_dir) / "ablation.csv", std::ios::binary);
    if (!csv) throw egvit::IoError("cannot open ablation.csv for writing");
    csv << "variant,reinject,mask_mode,acc,f1,auc,seed\n";
    const char* variants[] = {"separated", "gathered", "none"};
    const bool reinject_arms[] = {true, false};
    for (const char* variant : variants) {
        for (bool reinject : reinject_arms) {
            for (std::uint64_t seed : seeds) {
                egvit::ModelConfig mc = mf.resolve(static_cast<int>(manifest.classes.size()));
                mc.reinject_enabled = reinject;
                egvit::TrainConfig tc = tf.resolve();
                tc.mask_variant = egvit::mask_variant_from_string(variant);
                tc.seed = seed;
                std::fprintf(stderr, "ablate: variant=%s reinject=%s seed=%llu\n", variant,
                             reinject ? "on" : "off", static_cast<unsigned long long>(seed));
                egvit::TrainResult r = egvit::train(data, mc, tc);
                char line[256];
                std::snprintf(line, sizeof line, "%s,%s,%s,%.10g,%.10g,%s,%llu\n", variant,
                              reinject ? "on" : "off",
                              mc.mask_mode == egvit::MaskMode::drop ? "drop" : "zero",
                              r.final_test_metrics.acc, r.final_test_metrics.f1,
                              auc_field(r.final_test_metrics).c_str(),
                              static_cast<unsigned long long>(seed));
                csv << line << std::flush;
            }
        }
    }
    std::fprintf(stderr, "ablation grid written to %s/ablation.csv\n", out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    egvit::configure_threads();

    CLI::App app{"eye-gaze-guided vision transformer pipeline"};
    app.require_subcommand(1);
    app.set_config("--config", "", "Read options from a TOML/INI file (flags take precedence)");

    // fixations
    std::string gaze_path, out_path;
    double dispersion = 35.0, min_duration = 100.0;
    CLI::App* fix_cmd = app.add_subcommand("fixations", "Gaze CSV -> fixation CSV (I-DT detector)");
    fix_cmd->add_option("--gaze", gaze_path, "Input gaze CSV")->required();
    fix_cmd->add_option("--out", out_path, "Output fixation CSV")->required();
    fix_cmd->add_option("--dispersion", dispersion, "Dispersion threshold in px");
    fix_cmd->add_option("--min-duration", min_duration, "Minimum fixation duration in ms");

    // heatmap
    std::string hm_gaze, hm_out, hm_pgm;
    int hm_width = 224, hm_height = 224;
    double hm_sigma = 25.0, hm_dispersion = 35.0, hm_min_duration = 100.0;
    bool hm_no_weight = false;
    CLI::App* hm_cmd = app.add_subcommand("heatmap", "Gaze CSV -> Gaussian heatmap (EGHM binary)");
    hm_cmd->add_option("--gaze", hm_gaze, "Input gaze CSV")->required();
    hm_cmd->add_option("--out", hm_out, "Output EGHM file")->required();
    hm_cmd->add_option("--width", hm_width, "Heatmap width in px");
    hm_cmd->add_option("--height", hm_height, "Heatmap height in px");
    hm_cmd->add_option("--sigma", hm_sigma, "Gaussian sigma in px");
    hm_cmd->add_flag("--no-duration-weight", hm_no_weight, "Weight every fixation equally");
    hm_cmd->add_option("--dispersion", hm_dispersion, "I-DT dispersion threshold in px");
    hm_cmd->add_option("--min-duration", hm_min_duration, "I-DT minimum duration in ms");
    hm_cmd->add_option("--pgm", hm_pgm, "Also export a 16-bit PGM view");

    // mask
    std::string mask_heatmap, mask_out, mask_variant = "separated";
    int mask_k = 49, mask_window = 7, mask_grid = 14;
    CLI::App* mask_cmd = app.add_subcommand("mask", "Heatmap -> binary patch mask (text grid)");
    mask_cmd->add_option("--heatmap", mask_heatmap, "Input EGHM heatmap")->required();
    mask_cmd->add_option("--out", mask_out, "Output mask text file")->required();
    mask_cmd->add_option("--variant", mask_variant, "Mask variant")
        ->check(CLI::IsMember({"separated", "gathered"}));
    mask_cmd->add_option("--k", mask_k, "Separated: number of selected cells");
    mask_cmd->add_option("--window", mask_window, "Gathered: window side in cells");
    mask_cmd->add_option("--grid", mask_grid, "Patch grid side");

    // synth
    SynthFlags sf;
    std::string synth_out;
    CLI::App* synth_cmd = app.add_subcommand("synth", "Generate the synthetic shortcut benchmark");
    synth_cmd->add_option("--out", synth_out, "Output directory")->required();
    synth_cmd->add_option("--seed", sf.seed, "Generation seed");
    synth_cmd->add_option("--n-train", sf.n_train, "Training records");
    synth_cmd->add_option("--n-test", sf.n_test, "Test records");
    synth_cmd->add_option("--image-size", sf.image_size, "Image side in px");
    synth_cmd->add_option("--classes", sf.classes, "Number of classes (2 or 3)");
    synth_cmd->add_option("--grid", sf.grid, "Patch grid used for ROI bookkeeping");
    synth_cmd->add_option("--rho-train", sf.rho_train, "Marker-label agreement on train");
    synth_cmd->add_option("--rho-test", sf.rho_test, "Marker-label agreement on test");

    // train
    std::string train_data, train_out;
    ModelFlags train_model;
    TrainFlags train_flags;
    CLI::App* train_cmd = app.add_subcommand("train", "Train vanilla ViT or EG-ViT from a manifest");
    train_cmd->add_option("--data", train_data, "Dataset manifest JSON")->required();
    train_cmd->add_option("--out", train_out, "Output directory")->required();
    train_model.attach(train_cmd);
    train_flags.attach(train_cmd);

    // eval
    std::string eval_ckpt, eval_data, eval_split = "test", eval_out;
    TrainFlags eval_flags;
    CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest split");
    eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint directory")->required();
    eval_cmd->add_option("--data", eval_data, "Dataset manifest JSON")->required();
    eval_cmd->add_option("--split", eval_split, "Split to evaluate")->check(CLI::IsMember({"train", "test"}));
    eval_cmd->add_option("--out", eval_out, "Output directory")->required();
    eval_flags.attach(eval_cmd);

    // explain
    std::string ex_ckpt, ex_image, ex_heatmap, ex_variant = "none", ex_out;
    int ex_k = 49, ex_window = 7, ex_target = -1, ex_tap = -1;
    CLI::App* ex_cmd = app.add_subcommand("explain", "Grad-CAM attention map for one image");
    ex_cmd->add_option("--checkpoint", ex_ckpt, "Checkpoint directory")->required();
    ex_cmd->add_option("--image", ex_image, "Input image (PNG or PGM)")->required();
    ex_cmd->add_option("--heatmap", ex_heatmap, "Gaze heatmap (EGHM), needed for masked variants");
    ex_cmd->add_option("--mask-variant", ex_variant, "Mask applied during the forward pass")
        ->check(CLI::IsMember({"separated", "gathered", "none"}));
    ex_cmd->add_option("--k", ex_k, "Separated mask: top-k cells");
    ex_cmd->add_option("--window", ex_window, "Gathered mask: window side");
    ex_cmd->add_option("--target-class", ex_target, "Target class (-1 = argmax)");
    ex_cmd->add_option("--tap-layer", ex_tap, "Encoder layer whose input is tapped (-1 = last)");
    ex_cmd->add_option("--out", ex_out, "Output directory")->required();

    // ablate
    std::string ab_data, ab_out;
    ModelFlags ab_model;
    TrainFlags ab_flags;
    std::vector<std::uint64_t> ab_seeds{0};
    CLI::App* ab_cmd =
        app.add_subcommand("ablate", "Run the {separated,gathered,none} x {reinject on,off} grid");
    ab_cmd->add_option("--data", ab_data, "Dataset manifest JSON")->required();
    ab_cmd->add_option("--out", ab_out, "Output directory")->required();
    ab_cmd->add_option("--seeds", ab_seeds, "Seeds to run per arm");
    ab_model.attach(ab_cmd);
    ab_flags.attach(ab_cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;  // usage errors exit 1; --help exits 0
    }

    try {
        if (fix_cmd->parsed()) return cmd_fixations(gaze_path, out_path, dispersion, min_duration);
        if (hm_cmd->parsed())
            return cmd_heatmap(hm_gaze, hm_out, hm_width, hm_height, hm_sigma, hm_no_weight, hm_dispersion,
                               hm_min_duration, hm_pgm);
        if (mask_cmd->parsed())
            return cmd_mask(mask_heatmap, mask_out, mask_variant, mask_k, mask_window, mask_grid);
        if (synth_cmd->parsed()) return cmd_synth(sf, synth_out);
        if (train_cmd->parsed()) return cmd_train(train_data, train_out, train_model, train_flags);
        if (eval_cmd->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_split, eval_out, eval_flags);
        if (ex_cmd->parsed())
            return cmd_explain(ex_ckpt, ex_image, ex_heatmap, ex_variant, ex_k, ex_window, ex_target,
                               ex_tap, ex_out);
        if (ab_cmd->parsed()) return cmd_ablate(ab_data, ab_out, ab_model, ab_flags, ab_seeds);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
