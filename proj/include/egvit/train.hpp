#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "egvit/errors.hpp"
#include "egvit/gaze.hpp"
#include "egvit/image.hpp"
#include "egvit/io.hpp"
#include "egvit/metrics.hpp"
#include "egvit/rng.hpp"
#include "egvit/vit.hpp"

namespace egvit {

enum class MaskVariant { separated, gathered, none };

inline const char* to_string(MaskVariant v) {
    switch (v) {
        case MaskVariant::separated: return "separated";
        case MaskVariant::gathered: return "gathered";
        default: return "none";
    }
}

inline MaskVariant mask_variant_from_string(const std::string& s) {
    if (s == "separated") return MaskVariant::separated;
    if (s == "gathered") return MaskVariant::gathered;
    if (s == "none") return MaskVariant::none;
    throw ConfigMismatch("unknown mask variant: " + s);
}

struct TrainConfig {
    int epochs = 70;
    double base_lr = 1e-4;
    int warmup_epochs = 8;
    int batch_size = 64;
    double beta1 = 0.9;      // Adam
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double min_lr = 0.0;
    std::uint64_t seed = 0;
    MaskVariant mask_variant = MaskVariant::separated;
    int mask_k = 49;          // separated top-k
    int mask_window = 7;      // gathered window side
    bool apply_mask_at_eval = true;  // paper applies gaze masks in both phases
    bool augment = true;             // hflip p=0.5 + crop jitter <= 8 px
    int jitter_px = 8;

    void validate() const {
        if (epochs < 1 || batch_size < 1) throw ConfigMismatch("epochs/batch_size must be >= 1");
        if (warmup_epochs < 0 || warmup_epochs >= epochs)
            throw ConfigMismatch("warmup_epochs must be < epochs");
    }
};

// Linear warmup from 0 to base_lr over warmup_epochs, then cosine decay that
// reaches min_lr exactly at the last step.
inline double lr_schedule(std::int64_t step, const TrainConfig& cfg, std::int64_t steps_per_epoch) {
    const std::int64_t warmup = static_cast<std::int64_t>(cfg.warmup_epochs) * steps_per_epoch;
    const std::int64_t total = static_cast<std::int64_t>(cfg.epochs) * steps_per_epoch;
    if (step < warmup) return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warmup);
    const std::int64_t span = std::max<std::int64_t>(1, total - warmup - 1);
    const double p = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
    return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * p));
}

// ---------------------------------------------------------------------------
// Dataset manifest (JSON) and in-memory dataset
// ---------------------------------------------------------------------------

struct ManifestRecord {
    std::string image;
    int label = 0;
    std::string heatmap;  // empty = absent
    std::string split = "train";
};

struct DatasetManifest {
    std::vector<std::string> classes;
    std::vector<ManifestRecord> records;
    std::map<std::string, int> oversample;  // class name -> repetition factor
};

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
    nlohmann::ordered_json j;
    j["classes"] = m.classes;
    j["records"] = nlohmann::ordered_json::array();
    for (const auto& r : m.records) {
        nlohmann::ordered_json rec;
        rec["image"] = r.image;
        rec["label"] = r.label;
        if (!r.heatmap.empty()) rec["heatmap"] = r.heatmap;
        rec["split"] = r.split;
        j["records"].push_back(rec);
    }
    j["oversample"] = m.oversample;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << j.dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path.string());
    nlohmann::json j;
    is >> j;
    DatasetManifest m;
    m.classes = j.at("classes").get<std::vector<std::string>>();
    for (const auto& rec : j.at("records")) {
        ManifestRecord r;
        r.image = rec.at("image").get<std::string>();
        r.label = rec.at("label").get<int>();
        if (rec.contains("heatmap")) r.heatmap = rec.at("heatmap").get<std::string>();
        r.split = rec.at("split").get<std::string>();
        if (r.label < 0 || r.label >= static_cast<int>(m.classes.size()))
            throw FormatError("manifest record label out of range");
        m.records.push_back(std::move(r));
    }
    if (j.contains("oversample"))
        m.oversample = j.at("oversample").get<std::map<std::string, int>>();
    return m;
}

struct LoadedSample {
    Image image;
    Heatmap heatmap;  // width 0 when absent
    int label = 0;
    bool has_heatmap() const { return heatmap.width > 0; }
};

struct Dataset {
    std::vector<std::string> classes;
    std::vector<LoadedSample> train;
    std::vector<LoadedSample> test;
    std::vector<int> train_repeat;  // oversampling factor per train sample
};

// Loads every record into memory; paths are resolved relative to the
// manifest's directory.
inline Dataset load_dataset(const std::filesystem::path& manifest_path, const DatasetManifest& m) {
    const auto base = manifest_path.parent_path();
    Dataset d;
    d.classes = m.classes;
    for (const auto& r : m.records) {
        LoadedSample s;
        s.image = read_image(base / r.image);
        if (!r.heatmap.empty()) s.heatmap = read_eghm(base / r.heatmap);
        s.label = r.label;
        if (r.split == "train") {
            int factor = 1;
            if (auto it = m.oversample.find(m.classes[static_cast<std::size_t>(r.label)]); it != m.oversample.end())
                factor = std::max(1, it->second);
            d.train.push_back(std::move(s));
            d.train_repeat.push_back(factor);
        } else {
            d.test.push_back(std::move(s));
        }
    }
    return d;
}

// Grid heatmap -> patch mask under the configured variant.
inline PatchMask mask_from_heatmap(const Heatmap& hm, const ModelConfig& mc, const TrainConfig& tc) {
    GridHeatmap g = downsample_heatmap(hm, mc.grid(), mc.grid());
    if (tc.mask_variant == MaskVariant::gathered) return gathered_mask(g, tc.mask_window, tc.mask_window);
    return separated_mask(g, tc.mask_k);
}

// ---------------------------------------------------------------------------
// Checkpoints: manifest.json + weights.bin (length-prefixed index, then
// row-major f32 LE tensor data; bit-exact round trip)
// ---------------------------------------------------------------------------

struct HistoryRow {
    int epoch = 0;
    std::string split;
    double acc = 0.0, f1 = 0.0, auc = std::numeric_limits<double>::quiet_NaN();
    double lr = 0.0, loss = 0.0;
};

inline void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& rows) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << "epoch,split,acc,f1,auc,lr,loss\n";
    char buf[256];
    for (const auto& r : rows) {
        if (std::isnan(r.auc))
            std::snprintf(buf, sizeof buf, "%d,%s,%.10g,%.10g,NA,%.10g,%.10g\n", r.epoch, r.split.c_str(),
                          r.acc, r.f1, r.lr, r.loss);
        else
            std::snprintf(buf, sizeof buf, "%d,%s,%.10g,%.10g,%.10g,%.10g,%.10g\n", r.epoch, r.split.c_str(),
                          r.acc, r.f1, r.auc, r.lr, r.loss);
        os << buf;
    }
}

inline nlohmann::ordered_json config_to_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["image_size"] = c.image_size;
    j["patch_size"] = c.patch_size;
    j["channels"] = c.channels;
    j["hidden_dim"] = c.hidden_dim;
    j["depth"] = c.depth;
    j["heads"] = c.heads;
    j["mlp_ratio"] = c.mlp_ratio;
    j["num_classes"] = c.num_classes;
    j["mask_mode"] = c.mask_mode == MaskMode::drop ? "drop" : "zero";
    j["reinject_enabled"] = c.reinject_enabled;
    return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.image_size = j.at("image_size").get<int>();
    c.patch_size = j.at("patch_size").get<int>();
    c.channels = j.at("channels").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.depth = j.at("depth").get<int>();
    c.heads = j.at("heads").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.mask_mode = j.at("mask_mode").get<std::string>() == "zero" ? MaskMode::zero : MaskMode::drop;
    c.reinject_enabled = j.at("reinject_enabled").get<bool>();
    return c;
}

inline void write_weights_blob(const std::filesystem::path& path, const ModelParams<float>& params) {
    auto tensors = tensor_map(params);
    std::ostringstream index;
    detail::put_u32(index, static_cast<std::uint32_t>(tensors.size()));
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        detail::put_u32(index, static_cast<std::uint32_t>(name.size()));
        index.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(index, 2);
        detail::put_u32(index, static_cast<std::uint32_t>(t->rows()));
        detail::put_u32(index, static_cast<std::uint32_t>(t->cols()));
        detail::put_u64(index, offset);
        detail::put_u64(index, static_cast<std::uint64_t>(t->size()) * 4);
        offset += static_cast<std::uint64_t>(t->size()) * 4;
    }
    const std::string idx = index.str();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os.write("EGWT", 4);
    detail::put_u32(os, 1);  // format version
    detail::put_u64(os, idx.size());
    os.write(idx.data(), static_cast<std::streamsize>(idx.size()));
    for (const auto& [name, t] : tensors)
        for (Eigen::Index r = 0; r < t->rows(); ++r)
            for (Eigen::Index c = 0; c < t->cols(); ++c) detail::put_f32(os, (*t)(r, c));
    if (!os) throw IoError("write failed: " + path.string());
}

inline void read_weights_blob(const std::filesystem::path& path, ModelParams<float>& params) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "EGWT", 4) != 0) throw FormatError("bad weights magic: " + path.string());
    if (detail::get_u32(is) != 1) throw FormatError("unknown weights version");
    const std::uint64_t idx_len = detail::get_u64(is);
    std::string idx(idx_len, '\0');
    is.read(idx.data(), static_cast<std::streamsize>(idx_len));
    if (!is) throw FormatError("truncated weights index");

    struct Entry {
        std::string name;
        std::uint32_t rows = 0, cols = 0;
        std::uint64_t offset = 0, nbytes = 0;
    };
    std::istringstream ix(idx);
    const std::uint32_t count = detail::get_u32(ix);
    std::vector<Entry> entries(count);
    for (auto& e : entries) {
        const std::uint32_t name_len = detail::get_u32(ix);
        e.name.resize(name_len);
        ix.read(e.name.data(), name_len);
        const std::uint32_t ndim = detail::get_u32(ix);
        if (ndim != 2) throw FormatError("unsupported tensor rank");
        e.rows = detail::get_u32(ix);
        e.cols = detail::get_u32(ix);
        e.offset = detail::get_u64(ix);
        e.nbytes = detail::get_u64(ix);
    }

    const std::streampos data_start = is.tellg();
    auto tensors = tensor_map(params);
    std::map<std::string, Mat<float>*> by_name;
    for (auto& [name, t] : tensors) by_name[name] = t;
    std::size_t loaded = 0;
    for (const auto& e : entries) {
        auto it = by_name.find(e.name);
        if (it == by_name.end()) throw FormatError("unknown tensor in checkpoint: " + e.name);
        Mat<float>& t = *it->second;
        if (t.rows() != static_cast<Eigen::Index>(e.rows) || t.cols() != static_cast<Eigen::Index>(e.cols))
            throw ConfigMismatch("tensor shape mismatch for " + e.name);
        is.seekg(data_start + static_cast<std::streamoff>(e.offset));
        for (Eigen::Index r = 0; r < t.rows(); ++r)
            for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = detail::get_f32(is);
        ++loaded;
    }
    if (loaded != tensors.size()) throw FormatError("checkpoint is missing tensors");
}

struct CheckpointMeta {
    int epoch = 0;
    std::uint64_t seed = 0;
    std::vector<HistoryRow> history;
};

inline void save_checkpoint(const std::filesystem::path& dir, const ModelParams<float>& params,
                            const ModelConfig& cfg, const CheckpointMeta& meta) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json j;
    j["format_version"] = 1;
    j["config"] = config_to_json(cfg);
    j["epoch"] = meta.epoch;
    j["seed"] = meta.seed;
    j["metric_history"] = nlohmann::ordered_json::array();
    for (const auto& r : meta.history) {
        nlohmann::ordered_json row;
        row["epoch"] = r.epoch;
        row["split"] = r.split;
        row["acc"] = r.acc;
        row["f1"] = r.f1;
        if (std::isnan(r.auc))
            row["auc"] = nullptr;
        else
            row["auc"] = r.auc;
        row["lr"] = r.lr;
        row["loss"] = r.loss;
        j["metric_history"].push_back(row);
    }
    std::ofstream os(dir / "manifest.json", std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + (dir / "manifest.json").string());
    os << j.dump(2) << "\n";
    write_weights_blob(dir / "weights.bin", params);
}

struct Checkpoint {
    ModelConfig config;
    ModelParams<float> params;
    CheckpointMeta meta;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw IoError("cannot open: " + (dir / "manifest.json").string());
    nlohmann::json j;
    is >> j;
    Checkpoint ck;
    ck.config = config_from_json(j.at("config"));
    ck.meta.epoch = j.at("epoch").get<int>();
    ck.meta.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("metric_history")) {
        for (const auto& row : j.at("metric_history")) {
            HistoryRow r;
            r.epoch = row.at("epoch").get<int>();
            r.split = row.at("split").get<std::string>();
            r.acc = row.at("acc").get<double>();
            r.f1 = row.at("f1").get<double>();
            r.auc = row.at("auc").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                            : row.at("auc").get<double>();
            r.lr = row.at("lr").get<double>();
            r.loss = row.at("loss").get<double>();
            ck.meta.history.push_back(r);
        }
    }
    ck.params = zero_params<float>(ck.config);
    read_weights_blob(dir / "weights.bin", ck.params);
    return ck;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
struct Adam {
    ModelParams<T> m, v;
    std::int64_t t = 0;

    explicit Adam(const ModelConfig& cfg) : m(zero_params<T>(cfg)), v(zero_params<T>(cfg)) {}

    void step(ModelParams<T>& params, const ModelParams<T>& grads, const TrainConfig& cfg, double lr) {
        ++t;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
        auto ps = tensor_map(params);
        auto gs = tensor_map(const_cast<ModelParams<T>&>(grads));
        auto ms = tensor_map(m);
        auto vs = tensor_map(v);
        for (std::size_t i = 0; i < ps.size(); ++i) {
            Mat<T>& p = *ps[i].second;
            const Mat<T>& g = *gs[i].second;
            Mat<T>& mi = *ms[i].second;
            Mat<T>& vi = *vs[i].second;
            mi = static_cast<T>(cfg.beta1) * mi + static_cast<T>(1.0 - cfg.beta1) * g;
            vi = static_cast<T>(cfg.beta2) * vi + static_cast<T>(1.0 - cfg.beta2) * g.cwiseProduct(g);
            const T alpha = static_cast<T>(lr / bc1);
            const T denom_scale = static_cast<T>(1.0 / std::sqrt(bc2));
            p.array() -= (alpha * mi.array()) /
                         (vi.array().sqrt() * denom_scale + static_cast<T>(cfg.adam_eps));
        }
    }
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    Metrics metrics;
    double loss = 0.0;
    Mat<double> scores;  // per-sample class probabilities
};

// Deterministic single pass in dataset order. Masks are applied exactly as in
// training when requested (and possible).
inline EvalResult evaluate_split(const ModelParams<float>& params, const ModelConfig& mc,
                                 const TrainConfig& tc, const std::vector<LoadedSample>& split,
                                 const std::vector<PatchMask>* cached_masks = nullptr) {
    if (split.empty()) throw EmptySplit("evaluate: empty split");
    const bool use_masks = tc.mask_variant != MaskVariant::none && tc.apply_mask_at_eval;
    const int n = static_cast<int>(split.size());
    Mat<double> scores(n, mc.num_classes);
    std::vector<int> labels(static_cast<std::size_t>(n));
    double loss_sum = 0.0;

    std::vector<PatchMask> local_masks;
    if (use_masks && !cached_masks) {
        local_masks.reserve(static_cast<std::size_t>(n));
        for (const auto& s : split) {
            if (!s.has_heatmap()) throw MissingHeatmap("evaluate: record lacks a heatmap");
            local_masks.push_back(mask_from_heatmap(s.heatmap, mc, tc));
        }
        cached_masks = &local_masks;
    }

    std::vector<Image> converted;  // keep alive for the batch pointers
    for (int start = 0; start < n; start += tc.batch_size) {
        const int bsize = std::min(tc.batch_size, n - start);
        converted.clear();
        converted.reserve(static_cast<std::size_t>(bsize));
        std::vector<const Image*> images;
        std::vector<const PatchMask*> masks;
        std::vector<int> batch_labels;
        for (int i = 0; i < bsize; ++i) {
            const auto& s = split[static_cast<std::size_t>(start + i)];
            converted.push_back(convert_channels(s.image, mc.channels));
            batch_labels.push_back(s.label);
            if (use_masks) masks.push_back(&(*cached_masks)[static_cast<std::size_t>(start + i)]);
        }
        for (const auto& im : converted) images.push_back(&im);
        Mat<float> logits = forward_batch<float>(params, mc, images, masks);
        loss_sum += static_cast<double>(cross_entropy(logits, batch_labels)) * bsize;
        Mat<float> probs = softmax_rows(logits);
        for (int i = 0; i < bsize; ++i) {
            labels[static_cast<std::size_t>(start + i)] = batch_labels[static_cast<std::size_t>(i)];
            for (int c = 0; c < mc.num_classes; ++c)
                scores(start + i, c) = static_cast<double>(probs(i, c));
        }
    }
    // renormalize float->double drift so rows sum to 1 exactly enough
    for (int i = 0; i < n; ++i) scores.row(i) /= scores.row(i).sum();

    EvalResult r;
    r.metrics = compute_metrics(scores, labels);
    r.loss = loss_sum / n;
    r.scores = std::move(scores);
    return r;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainResult {
    ModelParams<float> final_params;
    ModelParams<float> best_params;
    int best_epoch = 0;
    Metrics best_test_metrics;
    Metrics final_test_metrics;
    Metrics final_train_metrics;  // clean full pass over the train split
    std::vector<HistoryRow> history;
    std::int64_t optimizer_steps = 0;
};

// Cross-entropy training with Adam, seeded shuffling/augmentation and cosine
// schedule. Per-image masks come from the gaze pipeline under the configured
// variant; augmentation transforms image and heatmap identically and the mask
// is recomputed from the transformed heatmap.
inline TrainResult train(const Dataset& data, const ModelConfig& mc, const TrainConfig& tc,
                         const std::filesystem::path& out_dir = {}) {
    mc.validate();
    tc.validate();
    if (data.train.empty()) throw EmptyTrainSplit("train: no training records");
    const bool use_masks = tc.mask_variant != MaskVariant::none;
    if (use_masks)
        for (const auto& s : data.train)
            if (!s.has_heatmap()) throw MissingHeatmap("train: record lacks a heatmap");

    // oversampling by record repetition
    std::vector<int> epoch_pool;
    for (std::size_t i = 0; i < data.train.size(); ++i)
        for (int r = 0; r < data.train_repeat[i]; ++r) epoch_pool.push_back(static_cast<int>(i));
    const std::int64_t steps_per_epoch =
        (static_cast<std::int64_t>(epoch_pool.size()) + tc.batch_size - 1) / tc.batch_size;

    ModelParams<float> params = init_params<float>(mc, tc.seed);
    ModelParams<float> grads = zero_params<float>(mc);
    Adam<float> adam(mc);

    // eval-time masks are static; compute them once
    std::vector<PatchMask> test_masks;
    if (use_masks && tc.apply_mask_at_eval && !data.test.empty()) {
        for (const auto& s : data.test) {
            if (!s.has_heatmap()) throw MissingHeatmap("train: test record lacks a heatmap");
            test_masks.push_back(mask_from_heatmap(s.heatmap, mc, tc));
        }
    }

    TrainResult result;
    double best_acc = -1.0;
    std::int64_t global_step = 0;
    double last_lr = 0.0;

    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        Rng rng(substream(tc.seed, "epoch", static_cast<std::uint64_t>(epoch)));
        std::vector<int> order = epoch_pool;
        rng.shuffle(order);

        double loss_sum = 0.0;
        std::int64_t seen = 0, correct = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch_size)) {
            const int bsize = static_cast<int>(std::min<std::size_t>(tc.batch_size, order.size() - start));
            std::vector<Image> images(static_cast<std::size_t>(bsize));
            std::vector<PatchMask> batch_masks(static_cast<std::size_t>(bsize));
            std::vector<int> labels(static_cast<std::size_t>(bsize));
            for (int i = 0; i < bsize; ++i) {
                const LoadedSample& s = data.train[static_cast<std::size_t>(order[start + static_cast<std::size_t>(i)])];
                labels[static_cast<std::size_t>(i)] = s.label;
                Image img = convert_channels(s.image, mc.channels);
                Heatmap hm = s.heatmap;
                if (tc.augment) {
                    const bool flip = rng.bernoulli(0.5);
                    const int dx = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * tc.jitter_px + 1))) - tc.jitter_px;
                    const int dy = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * tc.jitter_px + 1))) - tc.jitter_px;
                    if (flip) img = flip_horizontal(img);
                    img = translate_clamped(img, dx, dy);
                    if (use_masks) {
                        if (flip) hm = flip_horizontal(hm);
                        hm = translate_clamped(hm, dx, dy);
                    }
                }
                images[static_cast<std::size_t>(i)] = std::move(img);
                if (use_masks) batch_masks[static_cast<std::size_t>(i)] = mask_from_heatmap(hm, mc, tc);
            }
            std::vector<const Image*> image_ptrs;
            std::vector<const PatchMask*> mask_ptrs;
            for (const auto& im : images) image_ptrs.push_back(&im);
            if (use_masks)
                for (const auto& m : batch_masks) mask_ptrs.push_back(&m);

            ForwardTrace<float> trace;
            Mat<float> logits = forward_batch<float>(params, mc, image_ptrs, mask_ptrs, &trace);
            Mat<float> dlogits;
            const float loss = cross_entropy(logits, labels, &dlogits);
            for (auto& [name, g] : tensor_map(grads)) g->setZero();
            backward_batch(params, mc, trace, dlogits, &grads);

            last_lr = lr_schedule(global_step, tc, steps_per_epoch);
            adam.step(params, grads, tc, last_lr);
            ++global_step;

            loss_sum += static_cast<double>(loss) * bsize;
            for (int i = 0; i < bsize; ++i) {
                int pred = 0;
                for (int c = 1; c < mc.num_classes; ++c)
                    if (logits(i, c) > logits(i, pred)) pred = c;
                if (pred == labels[static_cast<std::size_t>(i)]) ++correct;
            }
            seen += bsize;
        }

        HistoryRow train_row;
        train_row.epoch = epoch;
        train_row.split = "train";
        train_row.acc = static_cast<double>(correct) / static_cast<double>(seen);
        train_row.f1 = 0.0;  // running train stats only; full metrics come from eval passes
        train_row.lr = last_lr;
        train_row.loss = loss_sum / static_cast<double>(seen);
        result.history.push_back(train_row);

        if (!data.test.empty()) {
            EvalResult ev = evaluate_split(params, mc, tc, data.test,
                                           test_masks.empty() ? nullptr : &test_masks);
            HistoryRow row;
            row.epoch = epoch;
            row.split = "test";
            row.acc = ev.metrics.acc;
            row.f1 = ev.metrics.f1;
            row.auc = ev.metrics.auc;
            row.lr = last_lr;
            row.loss = ev.loss;
            result.history.push_back(row);
            if (ev.metrics.acc > best_acc) {
                best_acc = ev.metrics.acc;
                result.best_epoch = epoch;
                result.best_test_metrics = ev.metrics;
                result.best_params = params;
                if (!out_dir.empty())
                    save_checkpoint(out_dir / "checkpoint_best", params, mc,
                                    {epoch, tc.seed, result.history});
            }
            result.final_test_metrics = ev.metrics;
        }
    }

    result.optimizer_steps = global_step;
    result.final_params = params;
    if (result.best_epoch == 0 && best_acc < 0.0) result.best_params = params;  // no test split
    {
        TrainConfig clean = tc;
        clean.augment = false;
        EvalResult train_ev = evaluate_split(params, mc, clean, data.train);
        result.final_train_metrics = train_ev.metrics;
    }
    if (!out_dir.empty()) {
        save_checkpoint(out_dir / "checkpoint_last", params, mc, {tc.epochs - 1, tc.seed, result.history});
        write_history_csv(out_dir / "history.csv", result.history);
    }
    return result;
}

}  // namespace egvit
