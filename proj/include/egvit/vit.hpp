#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "egvit/errors.hpp"
#include "egvit/gaze.hpp"
#include "egvit/image.hpp"
#include "egvit/rng.hpp"

namespace egvit {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

enum class MaskMode { drop, zero };

// ---------------------------------------------------------------------------
// Configuration and parameters
// ---------------------------------------------------------------------------

struct ModelConfig {
    int image_size = 224;   // H = W
    int patch_size = 16;
    int channels = 1;       // grayscale radiographs; 3 supported
    int hidden_dim = 384;   // ViT-S
    int depth = 12;
    int heads = 6;
    int mlp_ratio = 4;
    int num_classes = 2;
    MaskMode mask_mode = MaskMode::drop;
    bool reinject_enabled = true;

    int grid() const { return image_size / patch_size; }
    int num_patches() const { return grid() * grid(); }
    int patch_dim() const { return patch_size * patch_size * channels; }
    int mlp_dim() const { return hidden_dim * mlp_ratio; }

    void validate() const {
        if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
            throw ConfigMismatch("image_size must be a positive multiple of patch_size");
        if (hidden_dim <= 0 || heads <= 0 || hidden_dim % heads != 0)
            throw ConfigMismatch("hidden_dim must be a positive multiple of heads");
        if (depth < 0 || mlp_ratio < 1 || num_classes < 1 || channels < 1)
            throw ConfigMismatch("bad depth/mlp_ratio/num_classes/channels");
    }

    // architecture equality; mask_mode and reinject flags are runtime behavior
    bool same_architecture(const ModelConfig& o) const {
        return image_size == o.image_size && patch_size == o.patch_size && channels == o.channels &&
               hidden_dim == o.hidden_dim && depth == o.depth && heads == o.heads &&
               mlp_ratio == o.mlp_ratio && num_classes == o.num_classes;
    }
};

template <typename T>
struct LayerParams {
    Mat<T> ln1_gamma, ln1_beta;          // 1 x D
    Mat<T> wq, wk, wv, wo;               // D x D
    Mat<T> bq, bk, bv, bo;               // 1 x D
    Mat<T> ln2_gamma, ln2_beta;          // 1 x D
    Mat<T> w1, b1;                       // D x Dm, 1 x Dm
    Mat<T> w2, b2;                       // Dm x D, 1 x D
};

template <typename T>
struct ModelParams {
    Mat<T> patch_proj;                   // (P^2 C) x D
    Mat<T> cls_token;                    // 1 x D
    Mat<T> pos_embed;                    // (N+1) x D
    std::vector<LayerParams<T>> layers;
    Mat<T> lnf_gamma, lnf_beta;          // 1 x D
    Mat<T> head_w;                       // D x num_classes
    Mat<T> head_b;                       // 1 x num_classes
};

// Stable name -> tensor mapping; defines checkpoint, Adam and gradient order.
template <typename T>
std::vector<std::pair<std::string, Mat<T>*>> tensor_map(ModelParams<T>& p) {
    std::vector<std::pair<std::string, Mat<T>*>> m;
    m.emplace_back("patch_embed.weight", &p.patch_proj);
    m.emplace_back("cls_token", &p.cls_token);
    m.emplace_back("pos_embed", &p.pos_embed);
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        auto& l = p.layers[i];
        const std::string b = "layers." + std::to_string(i) + ".";
        m.emplace_back(b + "ln1.gamma", &l.ln1_gamma);
        m.emplace_back(b + "ln1.beta", &l.ln1_beta);
        m.emplace_back(b + "attn.wq", &l.wq);
        m.emplace_back(b + "attn.bq", &l.bq);
        m.emplace_back(b + "attn.wk", &l.wk);
        m.emplace_back(b + "attn.bk", &l.bk);
        m.emplace_back(b + "attn.wv", &l.wv);
        m.emplace_back(b + "attn.bv", &l.bv);
        m.emplace_back(b + "attn.wo", &l.wo);
        m.emplace_back(b + "attn.bo", &l.bo);
        m.emplace_back(b + "ln2.gamma", &l.ln2_gamma);
        m.emplace_back(b + "ln2.beta", &l.ln2_beta);
        m.emplace_back(b + "mlp.w1", &l.w1);
        m.emplace_back(b + "mlp.b1", &l.b1);
        m.emplace_back(b + "mlp.w2", &l.w2);
        m.emplace_back(b + "mlp.b2", &l.b2);
    }
    m.emplace_back("ln_final.gamma", &p.lnf_gamma);
    m.emplace_back("ln_final.beta", &p.lnf_beta);
    m.emplace_back("head.weight", &p.head_w);
    m.emplace_back("head.bias", &p.head_b);
    return m;
}

template <typename T>
std::vector<std::pair<std::string, const Mat<T>*>> tensor_map(const ModelParams<T>& p) {
    std::vector<std::pair<std::string, const Mat<T>*>> m;
    for (auto& [name, ptr] : tensor_map(const_cast<ModelParams<T>&>(p))) m.emplace_back(name, ptr);
    return m;
}

// Exact learnable-parameter count from the architecture formula. Masking and
// re-injection are parameter-free, so the count does not depend on them.
inline std::uint64_t param_count(const ModelConfig& cfg) {
    cfg.validate();
    const std::uint64_t d = static_cast<std::uint64_t>(cfg.hidden_dim);
    const std::uint64_t dm = static_cast<std::uint64_t>(cfg.mlp_dim());
    const std::uint64_t n = static_cast<std::uint64_t>(cfg.num_patches());
    const std::uint64_t embed = static_cast<std::uint64_t>(cfg.patch_dim()) * d  // projection
                                + d                                              // class token
                                + (n + 1) * d;                                   // position embedding
    const std::uint64_t per_layer = 2 * d                 // ln1
                                    + 4 * (d * d + d)     // q,k,v,o with biases
                                    + 2 * d               // ln2
                                    + d * dm + dm         // mlp in
                                    + dm * d + d;         // mlp out
    const std::uint64_t head = 2 * d                                                          // final layer norm
                               + d * static_cast<std::uint64_t>(cfg.num_classes)              // classifier
                               + static_cast<std::uint64_t>(cfg.num_classes);
    return embed + static_cast<std::uint64_t>(cfg.depth) * per_layer + head;
}

template <typename T>
ModelParams<T> zero_params(const ModelConfig& cfg) {
    cfg.validate();
    const int d = cfg.hidden_dim, dm = cfg.mlp_dim();
    ModelParams<T> p;
    p.patch_proj = Mat<T>::Zero(cfg.patch_dim(), d);
    p.cls_token = Mat<T>::Zero(1, d);
    p.pos_embed = Mat<T>::Zero(cfg.num_patches() + 1, d);
    p.layers.resize(static_cast<std::size_t>(cfg.depth));
    for (auto& l : p.layers) {
        l.ln1_gamma = Mat<T>::Zero(1, d);
        l.ln1_beta = Mat<T>::Zero(1, d);
        l.wq = Mat<T>::Zero(d, d);
        l.wk = Mat<T>::Zero(d, d);
        l.wv = Mat<T>::Zero(d, d);
        l.wo = Mat<T>::Zero(d, d);
        l.bq = Mat<T>::Zero(1, d);
        l.bk = Mat<T>::Zero(1, d);
        l.bv = Mat<T>::Zero(1, d);
        l.bo = Mat<T>::Zero(1, d);
        l.ln2_gamma = Mat<T>::Zero(1, d);
        l.ln2_beta = Mat<T>::Zero(1, d);
        l.w1 = Mat<T>::Zero(d, dm);
        l.b1 = Mat<T>::Zero(1, dm);
        l.w2 = Mat<T>::Zero(dm, d);
        l.b2 = Mat<T>::Zero(1, d);
    }
    p.lnf_gamma = Mat<T>::Zero(1, d);
    p.lnf_beta = Mat<T>::Zero(1, d);
    p.head_w = Mat<T>::Zero(d, cfg.num_classes);
    p.head_b = Mat<T>::Zero(1, cfg.num_classes);
    return p;
}

// From-scratch scheme: truncated normal (std 0.02) for projections and the
// position embedding, zeros for biases and the class token, unit layer norms.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    ModelParams<T> p = zero_params<T>(cfg);
    Rng rng(substream(seed, "init"));
    auto is_projection = [](const std::string& name) {
        static const char* tails[] = {".wq", ".wk", ".wv", ".wo", ".w1", ".w2"};
        for (const char* t : tails)
            if (name.size() >= 3 && name.compare(name.size() - 3, 3, t) == 0) return true;
        return name == "patch_embed.weight" || name == "pos_embed" || name == "head.weight";
    };
    for (auto& [name, t] : tensor_map(p)) {
        if (name.find("gamma") != std::string::npos) {
            t->setOnes();
        } else if (is_projection(name)) {
            for (Eigen::Index i = 0; i < t->size(); ++i)
                t->data()[i] = static_cast<T>(rng.truncated_normal(0.02));
        }
        // biases, betas and the class token stay zero
    }
    return p;
}

// Parameter inheritance (identity map): EG-ViT adds no parameters, so vanilla
// weights transfer bit for bit. Throws ConfigMismatch on architecture drift.
template <typename T>
ModelParams<T> load_vanilla_weights(const ModelParams<T>& source, const ModelConfig& source_cfg,
                                    const ModelConfig& target_cfg) {
    if (!source_cfg.same_architecture(target_cfg))
        throw ConfigMismatch("load_vanilla_weights: architectures differ");
    return source;  // deep copy; every tensor bit-equal
}

// ---------------------------------------------------------------------------
// Token sequences
// ---------------------------------------------------------------------------

// Row 0 is the class token; rows 1..M are patch tokens. kept holds the
// original patch index of each patch row, strictly increasing.
template <typename T>
struct TokenSequence {
    Mat<T> tokens;           // (M+1) x D
    std::vector<int> kept;   // size M
};

// ---------------------------------------------------------------------------
// Forward trace (activations retained for backward)
// ---------------------------------------------------------------------------

template <typename T>
struct LayerTrace {
    Mat<T> x;                 // layer input, (B*S) x D
    Vec<T> ln1_mu, ln1_inv;
    Mat<T> q, k, v;           // (B*S) x D
    Mat<T> attn;              // (B*heads*S) x S softmax rows
    Mat<T> ctx;               // concatenated head outputs before Wo
    Mat<T> x1;                // after attention residual
    Vec<T> ln2_mu, ln2_inv;
    Mat<T> h1;                // MLP pre-activation, (B*S) x Dm
    int tokens_per_sample = 0;
};

template <typename T>
struct ForwardTrace {
    int batch = 0;
    std::vector<std::vector<int>> kept;   // per sample, empty when unmasked
    std::vector<PatchMask> masks;         // per sample, empty when unmasked
    bool reinjected = false;
    Mat<T> xp;                            // (B*N) x (P^2 C) flattened patches
    Mat<T> z0;                            // (B*(N+1)) x D full embedding
    std::vector<LayerTrace<T>> layers;
    Mat<T> final_out;                     // last layer output
    Mat<T> xc;                            // class rows, B x D
    Vec<T> lnf_mu, lnf_inv;
    Mat<T> logits;                        // B x num_classes
    std::vector<int> layer_token_counts;  // instrumentation: S per layer
    bool valid() const { return batch > 0; }
};

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

namespace nn {

constexpr double kLnEps = 1e-6;

// y = 0.5 x (1 + erf(x / sqrt 2))
template <typename T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + static_cast<T>(std::erf(static_cast<double>(x) * 0.7071067811865475244)));
}

template <typename T>
T gelu_grad(T x) {
    const double xd = static_cast<double>(x);
    const double cdf = 0.5 * (1.0 + std::erf(xd * 0.7071067811865475244));
    const double pdf = std::exp(-0.5 * xd * xd) * 0.3989422804014326779;
    return static_cast<T>(cdf + xd * pdf);
}

// Row-wise layer norm; means and inverse stddevs are returned for backward.
template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& gamma, const Mat<T>& beta, Vec<T>& mu, Vec<T>& inv) {
    mu = x.rowwise().mean();
    Mat<T> xc = x.colwise() - mu;
    Vec<T> var = xc.array().square().matrix().rowwise().mean();
    inv = (var.array() + T(kLnEps)).rsqrt();
    Mat<T> y = (inv.asDiagonal() * xc) * gamma.row(0).asDiagonal();
    y.rowwise() += beta.row(0);
    return y;
}

template <typename T>
Mat<T> layer_norm_recompute(const Mat<T>& x, const Mat<T>& gamma, const Mat<T>& beta,
                            const Vec<T>& mu, const Vec<T>& inv) {
    Mat<T> y = (inv.asDiagonal() * (x.colwise() - mu)) * gamma.row(0).asDiagonal();
    y.rowwise() += beta.row(0);
    return y;
}

// dgamma/dbeta accumulate when given; returns dx.
template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& x, const Mat<T>& gamma,
                           const Vec<T>& mu, const Vec<T>& inv, Mat<T>* dgamma, Mat<T>* dbeta) {
    Mat<T> xhat = inv.asDiagonal() * (x.colwise() - mu);
    if (dgamma) dgamma->row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
    if (dbeta) dbeta->row(0) += dy.colwise().sum();
    Mat<T> g = dy * gamma.row(0).asDiagonal();
    Vec<T> gmean = g.rowwise().mean();
    Vec<T> gxmean = (g.array() * xhat.array()).rowwise().mean();
    Mat<T> dx = inv.asDiagonal() * ((g.colwise() - gmean) - gxmean.asDiagonal() * xhat);
    return dx;
}

template <typename T>
void softmax_rows_inplace(Mat<T>& m) {
    Vec<T> mx = m.rowwise().maxCoeff();
    m = (m.colwise() - mx).array().exp().matrix();
    Vec<T> inv_sum = m.rowwise().sum().cwiseInverse();
    m = inv_sum.asDiagonal() * m;
}

// Encoder layer on a stack of B samples with S tokens each (rows grouped per
// sample). Attention never crosses sample boundaries; the per (sample, head)
// loop writes disjoint blocks, so it parallelizes without any reduction and
// results do not depend on the thread count.
template <typename T>
Mat<T> encoder_layer(const LayerParams<T>& lp, int heads, const Mat<T>& x, int batch, int s,
                     LayerTrace<T>* tr = nullptr) {
    const int d = static_cast<int>(lp.wq.rows());
    const int dh = d / heads;
    const T scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dh)));

    Vec<T> ln1_mu, ln1_inv;
    Mat<T> y1 = layer_norm(x, lp.ln1_gamma, lp.ln1_beta, ln1_mu, ln1_inv);

    Mat<T> q = y1 * lp.wq;
    q.rowwise() += lp.bq.row(0);
    Mat<T> k = y1 * lp.wk;
    k.rowwise() += lp.bk.row(0);
    Mat<T> v = y1 * lp.wv;
    v.rowwise() += lp.bv.row(0);

    Mat<T> attn(static_cast<Eigen::Index>(batch) * heads * s, s);
    Mat<T> ctx(static_cast<Eigen::Index>(batch) * s, d);
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            const Eigen::Index rb = static_cast<Eigen::Index>(b) * s;
            const Eigen::Index cb = static_cast<Eigen::Index>(h) * dh;
            Mat<T> scores = (q.block(rb, cb, s, dh) * k.block(rb, cb, s, dh).transpose()) * scale;
            softmax_rows_inplace(scores);
            ctx.block(rb, cb, s, dh).noalias() = scores * v.block(rb, cb, s, dh);
            attn.block(static_cast<Eigen::Index>(b * heads + h) * s, 0, s, s) = std::move(scores);
        }
    }

    Mat<T> attn_out = ctx * lp.wo;
    attn_out.rowwise() += lp.bo.row(0);
    Mat<T> x1 = x + attn_out;

    Vec<T> ln2_mu, ln2_inv;
    Mat<T> y2 = layer_norm(x1, lp.ln2_gamma, lp.ln2_beta, ln2_mu, ln2_inv);
    Mat<T> h1 = y2 * lp.w1;
    h1.rowwise() += lp.b1.row(0);
    Mat<T> mlp_out = h1.unaryExpr([](T e) { return gelu(e); }) * lp.w2;
    mlp_out.rowwise() += lp.b2.row(0);
    Mat<T> x2 = x1 + mlp_out;

    if (tr) {
        tr->x = x;
        tr->ln1_mu = std::move(ln1_mu);
        tr->ln1_inv = std::move(ln1_inv);
        tr->q = std::move(q);
        tr->k = std::move(k);
        tr->v = std::move(v);
        tr->attn = std::move(attn);
        tr->ctx = std::move(ctx);
        tr->x1 = std::move(x1);
        tr->ln2_mu = std::move(ln2_mu);
        tr->ln2_inv = std::move(ln2_inv);
        tr->h1 = std::move(h1);
        tr->tokens_per_sample = s;
    }
    return x2;
}

// Backward through one encoder layer; accumulates into lg when given and
// returns the gradient w.r.t. the layer input.
template <typename T>
Mat<T> encoder_layer_backward(const LayerParams<T>& lp, int heads, const LayerTrace<T>& tr, int batch,
                              const Mat<T>& dx2, LayerParams<T>* lg) {
    const int d = static_cast<int>(lp.wq.rows());
    const int s = tr.tokens_per_sample;
    const int dh = d / heads;
    const T scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dh)));

    // MLP
    Mat<T> dh1 = (dx2 * lp.w2.transpose()).array() *
                 tr.h1.unaryExpr([](T e) { return gelu_grad(e); }).array();
    if (lg) {
        Mat<T> hact = tr.h1.unaryExpr([](T e) { return gelu(e); });
        lg->w2.noalias() += hact.transpose() * dx2;
        lg->b2.row(0) += dx2.colwise().sum();
        Mat<T> y2 = layer_norm_recompute(tr.x1, lp.ln2_gamma, lp.ln2_beta, tr.ln2_mu, tr.ln2_inv);
        lg->w1.noalias() += y2.transpose() * dh1;
        lg->b1.row(0) += dh1.colwise().sum();
    }
    Mat<T> dy2 = dh1 * lp.w1.transpose();
    Mat<T> dx1 = layer_norm_backward(dy2, tr.x1, lp.ln2_gamma, tr.ln2_mu, tr.ln2_inv,
                                     lg ? &lg->ln2_gamma : nullptr, lg ? &lg->ln2_beta : nullptr);
    dx1 += dx2;  // MLP residual

    // attention output projection
    if (lg) {
        lg->wo.noalias() += tr.ctx.transpose() * dx1;
        lg->bo.row(0) += dx1.colwise().sum();
    }
    Mat<T> dctx = dx1 * lp.wo.transpose();

    Mat<T> dq(tr.q.rows(), d), dk(tr.q.rows(), d), dv(tr.q.rows(), d);
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            const Eigen::Index rb = static_cast<Eigen::Index>(b) * s;
            const Eigen::Index cb = static_cast<Eigen::Index>(h) * dh;
            auto qb = tr.q.block(rb, cb, s, dh);
            auto kb = tr.k.block(rb, cb, s, dh);
            auto vb = tr.v.block(rb, cb, s, dh);
            auto ab = tr.attn.block(static_cast<Eigen::Index>(b * heads + h) * s, 0, s, s);
            auto dcb = dctx.block(rb, cb, s, dh);
            Mat<T> da = dcb * vb.transpose();
            dv.block(rb, cb, s, dh).noalias() = ab.transpose() * dcb;
            // softmax rows: ds = a .* (da - rowsum(da .* a))
            Vec<T> dot = (da.array() * ab.array()).rowwise().sum();
            Mat<T> ds = ab.array() * (da.colwise() - dot).array();
            dq.block(rb, cb, s, dh).noalias() = ds * kb * scale;
            dk.block(rb, cb, s, dh).noalias() = ds.transpose() * qb * scale;
        }
    }

    Mat<T> dy1 = dq * lp.wq.transpose();
    dy1.noalias() += dk * lp.wk.transpose();
    dy1.noalias() += dv * lp.wv.transpose();
    if (lg) {
        Mat<T> y1 = layer_norm_recompute(tr.x, lp.ln1_gamma, lp.ln1_beta, tr.ln1_mu, tr.ln1_inv);
        lg->wq.noalias() += y1.transpose() * dq;
        lg->bq.row(0) += dq.colwise().sum();
        lg->wk.noalias() += y1.transpose() * dk;
        lg->bk.row(0) += dk.colwise().sum();
        lg->wv.noalias() += y1.transpose() * dv;
        lg->bv.row(0) += dv.colwise().sum();
    }
    Mat<T> dx = layer_norm_backward(dy1, tr.x, lp.ln1_gamma, tr.ln1_mu, tr.ln1_inv,
                                    lg ? &lg->ln1_gamma : nullptr, lg ? &lg->ln1_beta : nullptr);
    dx += dx1;  // attention residual
    return dx;
}

}  // namespace nn

// ---------------------------------------------------------------------------
// Full pipeline, batched
// ---------------------------------------------------------------------------

namespace detail {

// Flatten every patch of every image: row (b*N + p) holds patch p of sample b,
// pixels scanned row-major inside the patch, channels innermost.
template <typename T>
Mat<T> flatten_patches(const ModelConfig& cfg, const std::vector<const Image*>& images) {
    const int g = cfg.grid(), ps = cfg.patch_size, c = cfg.channels, n = cfg.num_patches();
    Mat<T> xp(static_cast<Eigen::Index>(images.size()) * n, cfg.patch_dim());
    for (std::size_t b = 0; b < images.size(); ++b) {
        const Image& im = *images[b];
        if (im.width != cfg.image_size || im.height != cfg.image_size || im.channels != c)
            throw ShapeMismatch("image dims do not match model config");
        for (int pr = 0; pr < g; ++pr) {
            for (int pc = 0; pc < g; ++pc) {
                const Eigen::Index row = static_cast<Eigen::Index>(b) * n + static_cast<Eigen::Index>(pr) * g + pc;
                int col = 0;
                for (int dy = 0; dy < ps; ++dy)
                    for (int dx = 0; dx < ps; ++dx)
                        for (int ch = 0; ch < c; ++ch)
                            xp(row, col++) = static_cast<T>(im.at(pc * ps + dx, pr * ps + dy, ch));
            }
        }
    }
    return xp;
}

}  // namespace detail

// Embed a batch: z0 has (N+1) rows per sample, class token first, position
// embeddings already added (Eq. 1 precedes masking, so dropped-and-reinjected
// tokens carry positional information through z0).
template <typename T>
Mat<T> embed_batch(const ModelParams<T>& params, const ModelConfig& cfg, const Mat<T>& xp, int batch) {
    const int n = cfg.num_patches(), d = cfg.hidden_dim;
    Mat<T> zp = xp * params.patch_proj;  // (B*N) x D
    Mat<T> z0(static_cast<Eigen::Index>(batch) * (n + 1), d);
    for (int b = 0; b < batch; ++b) {
        const Eigen::Index base = static_cast<Eigen::Index>(b) * (n + 1);
        z0.row(base) = params.cls_token.row(0) + params.pos_embed.row(0);
        z0.block(base + 1, 0, n, d) =
            zp.block(static_cast<Eigen::Index>(b) * n, 0, n, d) + params.pos_embed.block(1, 0, n, d);
    }
    return z0;
}

template <typename T>
Mat<T> forward_batch(const ModelParams<T>& params, const ModelConfig& cfg,
                     const std::vector<const Image*>& images,
                     const std::vector<const PatchMask*>& masks,  // empty => unmasked
                     ForwardTrace<T>* trace = nullptr) {
    cfg.validate();
    const int batch = static_cast<int>(images.size());
    const int n = cfg.num_patches(), d = cfg.hidden_dim;
    const bool masked = !masks.empty();
    if (masked && static_cast<int>(masks.size()) != batch)
        throw ShapeMismatch("mask count does not match batch");

    Mat<T> xp = detail::flatten_patches<T>(cfg, images);
    Mat<T> z0 = embed_batch(params, cfg, xp, batch);

    std::vector<std::vector<int>> kept(static_cast<std::size_t>(batch));
    int s = n + 1;  // tokens per sample entering the encoder
    Mat<T> x;
    if (masked) {
        int k = -1;
        for (int b = 0; b < batch; ++b) {
            if (static_cast<int>(masks[b]->size()) != n)
                throw MaskLengthMismatch("mask length does not equal patch count");
            auto& kb = kept[static_cast<std::size_t>(b)];
            for (int i = 0; i < n; ++i)
                if (masks[b]->bits[static_cast<std::size_t>(i)]) kb.push_back(i);
            if (kb.empty()) throw BadK("mask selects no patches");
            if (k < 0) k = static_cast<int>(kb.size());
            if (static_cast<int>(kb.size()) != k)
                throw MaskLengthMismatch("all masks in a batch must keep the same patch count");
        }
        if (cfg.mask_mode == MaskMode::drop) {
            s = k + 1;
            x.resize(static_cast<Eigen::Index>(batch) * s, d);
            for (int b = 0; b < batch; ++b) {
                const Eigen::Index src = static_cast<Eigen::Index>(b) * (n + 1);
                const Eigen::Index dst = static_cast<Eigen::Index>(b) * s;
                x.row(dst) = z0.row(src);
                const auto& kb = kept[static_cast<std::size_t>(b)];
                for (int j = 0; j < k; ++j) x.row(dst + 1 + j) = z0.row(src + 1 + kb[static_cast<std::size_t>(j)]);
            }
        } else {  // literal Eq. 2: masked rows become the zero vector
            x = z0;
            for (int b = 0; b < batch; ++b)
                for (int i = 0; i < n; ++i)
                    if (!masks[b]->bits[static_cast<std::size_t>(i)])
                        x.row(static_cast<Eigen::Index>(b) * (n + 1) + 1 + i).setZero();
        }
    } else {
        x = z0;
    }

    if (trace) {
        trace->batch = batch;
        trace->kept = kept;
        trace->masks.clear();
        if (masked)
            for (int b = 0; b < batch; ++b) trace->masks.push_back(*masks[b]);
        trace->xp = std::move(xp);
        trace->z0 = z0;
        trace->layers.assign(static_cast<std::size_t>(cfg.depth), {});
        trace->layer_token_counts.clear();
        trace->reinjected = false;
    }

    const int depth = cfg.depth;
    for (int l = 0; l < depth; ++l) {
        // Eq. 5 re-injection: before the last encoder layer, restore all N
        // patch positions from the unmasked initial embedding.
        if (l == depth - 1 && cfg.reinject_enabled) {
            const int cur_s = s;
            Mat<T> xr(static_cast<Eigen::Index>(batch) * (n + 1), d);
            for (int b = 0; b < batch; ++b) {
                const Eigen::Index src = static_cast<Eigen::Index>(b) * cur_s;
                const Eigen::Index dst = static_cast<Eigen::Index>(b) * (n + 1);
                xr.row(dst) = x.row(src);  // class token: no addition
                if (masked && cfg.mask_mode == MaskMode::drop) {
                    xr.block(dst + 1, 0, n, d) = z0.block(dst + 1, 0, n, d);
                    const auto& kb = kept[static_cast<std::size_t>(b)];
                    for (std::size_t j = 0; j < kb.size(); ++j)
                        xr.row(dst + 1 + kb[j]) += x.row(src + 1 + static_cast<Eigen::Index>(j));
                } else if (masked) {  // zero mode
                    for (int i = 0; i < n; ++i) {
                        if (masks[b]->bits[static_cast<std::size_t>(i)])
                            xr.row(dst + 1 + i) = x.row(src + 1 + i) + z0.row(dst + 1 + i);
                        else
                            xr.row(dst + 1 + i) = z0.row(dst + 1 + i);
                    }
                } else {  // unmasked: every patch counts as kept
                    xr.block(dst + 1, 0, n, d) = x.block(src + 1, 0, n, d) + z0.block(dst + 1, 0, n, d);
                }
            }
            x = std::move(xr);
            s = n + 1;
            if (trace) trace->reinjected = true;
        }
        x = nn::encoder_layer(params.layers[static_cast<std::size_t>(l)], cfg.heads, x, batch, s,
                              trace ? &trace->layers[static_cast<std::size_t>(l)] : nullptr);
        if (trace) trace->layer_token_counts.push_back(s);
    }

    // classification head on the class-token rows
    Mat<T> xc(batch, d);
    for (int b = 0; b < batch; ++b) xc.row(b) = x.row(static_cast<Eigen::Index>(b) * s);
    Vec<T> lnf_mu, lnf_inv;
    Mat<T> yc = nn::layer_norm(xc, params.lnf_gamma, params.lnf_beta, lnf_mu, lnf_inv);
    Mat<T> logits = yc * params.head_w;
    logits.rowwise() += params.head_b.row(0);

    if (trace) {
        trace->final_out = std::move(x);
        trace->xc = std::move(xc);
        trace->lnf_mu = std::move(lnf_mu);
        trace->lnf_inv = std::move(lnf_inv);
        trace->logits = logits;
    }
    return logits;
}

// Backward from d(logits). Accumulates parameter gradients into *grads when
// given (z0 receives gradient from the masked input path and from the Eq. 5
// additive path). When tap_layer >= 0, the gradient w.r.t. the input of
// encoder layer tap_layer is written to *dtap (used by Grad-CAM); with
// grads == nullptr the walk stops there.
template <typename T>
void backward_batch(const ModelParams<T>& params, const ModelConfig& cfg, const ForwardTrace<T>& trace,
                    const Mat<T>& dlogits, ModelParams<T>* grads, int tap_layer = -1,
                    Mat<T>* dtap = nullptr) {
    if (!trace.valid()) throw NoForwardState("backward: no retained forward trace");
    const int batch = trace.batch;
    const int n = cfg.num_patches(), d = cfg.hidden_dim;
    const bool masked = !trace.masks.empty();
    const bool drop = masked && cfg.mask_mode == MaskMode::drop;
    const int k = drop ? static_cast<int>(trace.kept[0].size()) : n;

    // head
    Mat<T> yc = nn::layer_norm_recompute(trace.xc, params.lnf_gamma, params.lnf_beta, trace.lnf_mu, trace.lnf_inv);
    if (grads) {
        grads->head_w.noalias() += yc.transpose() * dlogits;
        grads->head_b.row(0) += dlogits.colwise().sum();
    }
    Mat<T> dyc = dlogits * params.head_w.transpose();
    Mat<T> dxc = nn::layer_norm_backward(dyc, trace.xc, params.lnf_gamma, trace.lnf_mu, trace.lnf_inv,
                                         grads ? &grads->lnf_gamma : nullptr, grads ? &grads->lnf_beta : nullptr);

    const int depth = cfg.depth;
    const int s_last = depth > 0 ? trace.layers.back().tokens_per_sample : (drop ? k + 1 : n + 1);
    Mat<T> dx = Mat<T>::Zero(static_cast<Eigen::Index>(batch) * s_last, d);
    for (int b = 0; b < batch; ++b) dx.row(static_cast<Eigen::Index>(b) * s_last) = dxc.row(b);

    Mat<T> dz0_reinject;  // Eq. 5 contribution to the initial embedding
    for (int l = depth - 1; l >= 0; --l) {
        dx = nn::encoder_layer_backward(params.layers[static_cast<std::size_t>(l)], cfg.heads,
                                        trace.layers[static_cast<std::size_t>(l)], batch, dx,
                                        grads ? &grads->layers[static_cast<std::size_t>(l)] : nullptr);
        if (l == tap_layer && dtap) {
            *dtap = dx;
            if (!grads) return;  // attribution only
        }
        if (l == depth - 1 && trace.reinjected) {
            // split the gradient between the pre-reinjection state and z0
            const int s_pre = drop ? k + 1 : n + 1;
            Mat<T> dpre = Mat<T>::Zero(static_cast<Eigen::Index>(batch) * s_pre, d);
            dz0_reinject = Mat<T>::Zero(static_cast<Eigen::Index>(batch) * (n + 1), d);
            for (int b = 0; b < batch; ++b) {
                const Eigen::Index rb = static_cast<Eigen::Index>(b) * (n + 1);
                const Eigen::Index pb = static_cast<Eigen::Index>(b) * s_pre;
                dpre.row(pb) = dx.row(rb);  // class token passes straight through
                if (drop) {
                    dz0_reinject.block(rb + 1, 0, n, d) = dx.block(rb + 1, 0, n, d);
                    const auto& kb = trace.kept[static_cast<std::size_t>(b)];
                    for (std::size_t j = 0; j < kb.size(); ++j)
                        dpre.row(pb + 1 + static_cast<Eigen::Index>(j)) = dx.row(rb + 1 + kb[j]);
                } else if (masked) {  // zero mode: masked rows were overwritten by z0
                    for (int i = 0; i < n; ++i) {
                        dz0_reinject.row(rb + 1 + i) = dx.row(rb + 1 + i);
                        if (trace.masks[static_cast<std::size_t>(b)].bits[static_cast<std::size_t>(i)])
                            dpre.row(pb + 1 + i) = dx.row(rb + 1 + i);
                    }
                } else {
                    dz0_reinject.block(rb + 1, 0, n, d) = dx.block(rb + 1, 0, n, d);
                    dpre.block(pb + 1, 0, n, d) = dx.block(rb + 1, 0, n, d);
                }
            }
            dx = std::move(dpre);
        }
    }

    if (!grads) return;

    // undo masking: scatter token gradients back onto the full embedding
    Mat<T> dz0;
    if (drop) {
        const int s0 = k + 1;
        dz0 = Mat<T>::Zero(static_cast<Eigen::Index>(batch) * (n + 1), d);
        for (int b = 0; b < batch; ++b) {
            const Eigen::Index src = static_cast<Eigen::Index>(b) * s0;
            const Eigen::Index dst = static_cast<Eigen::Index>(b) * (n + 1);
            dz0.row(dst) = dx.row(src);
            const auto& kb = trace.kept[static_cast<std::size_t>(b)];
            for (std::size_t j = 0; j < kb.size(); ++j)
                dz0.row(dst + 1 + kb[j]) = dx.row(src + 1 + static_cast<Eigen::Index>(j));
        }
    } else if (masked) {  // zero mode: zeroed rows block the direct path
        dz0 = dx;
        for (int b = 0; b < batch; ++b)
            for (int i = 0; i < n; ++i)
                if (!trace.masks[static_cast<std::size_t>(b)].bits[static_cast<std::size_t>(i)])
                    dz0.row(static_cast<Eigen::Index>(b) * (n + 1) + 1 + i).setZero();
    } else {
        dz0 = dx;
    }
    if (dz0_reinject.size() > 0) dz0 += dz0_reinject;

    // embedding gradients
    Mat<T> dzp(static_cast<Eigen::Index>(batch) * n, d);
    for (int b = 0; b < batch; ++b) {
        const Eigen::Index src = static_cast<Eigen::Index>(b) * (n + 1);
        grads->cls_token.row(0) += dz0.row(src);
        grads->pos_embed.row(0) += dz0.row(src);
        grads->pos_embed.block(1, 0, n, d) += dz0.block(src + 1, 0, n, d);
        dzp.block(static_cast<Eigen::Index>(b) * n, 0, n, d) = dz0.block(src + 1, 0, n, d);
    }
    grads->patch_proj.noalias() += trace.xp.transpose() * dzp;
}

// ---------------------------------------------------------------------------
// Single-sample surface (spec-level operations)
// ---------------------------------------------------------------------------

template <typename T>
TokenSequence<T> patch_embed(const Image& image, const ModelParams<T>& params, const ModelConfig& cfg) {
    cfg.validate();
    Mat<T> xp = detail::flatten_patches<T>(cfg, {&image});
    TokenSequence<T> z;
    z.tokens = embed_batch(params, cfg, xp, 1);
    z.kept.resize(static_cast<std::size_t>(cfg.num_patches()));
    for (int i = 0; i < cfg.num_patches(); ++i) z.kept[static_cast<std::size_t>(i)] = i;
    return z;
}

template <typename T>
TokenSequence<T> apply_mask(const TokenSequence<T>& z0, const PatchMask& mask, MaskMode mode) {
    const int n = static_cast<int>(z0.tokens.rows()) - 1;
    if (static_cast<int>(mask.size()) != n) throw MaskLengthMismatch("apply_mask: mask length != N");
    TokenSequence<T> out;
    if (mode == MaskMode::drop) {
        for (int i = 0; i < n; ++i)
            if (mask.bits[static_cast<std::size_t>(i)]) out.kept.push_back(i);
        out.tokens.resize(static_cast<Eigen::Index>(out.kept.size()) + 1, z0.tokens.cols());
        out.tokens.row(0) = z0.tokens.row(0);
        for (std::size_t j = 0; j < out.kept.size(); ++j)
            out.tokens.row(static_cast<Eigen::Index>(j) + 1) = z0.tokens.row(out.kept[j] + 1);
    } else {
        out = z0;
        for (int i = 0; i < n; ++i)
            if (!mask.bits[static_cast<std::size_t>(i)]) out.tokens.row(i + 1).setZero();
    }
    return out;
}

template <typename T>
TokenSequence<T> encoder_layer_forward(const TokenSequence<T>& z, const LayerParams<T>& layer, int heads) {
    TokenSequence<T> out;
    out.kept = z.kept;
    out.tokens = nn::encoder_layer(layer, heads, z.tokens, 1, static_cast<int>(z.tokens.rows()));
    return out;
}

// Eq. 5: the class row passes through; masked positions are restored from the
// initial embedding; kept positions receive the additive connection. Output
// rows are in original patch order.
template <typename T>
TokenSequence<T> reinject(const TokenSequence<T>& z_pre_last, const TokenSequence<T>& z0_full,
                          const PatchMask& mask) {
    const int n = static_cast<int>(z0_full.tokens.rows()) - 1;
    if (static_cast<int>(mask.size()) != n) throw MaskLengthMismatch("reinject: mask length != N");
    TokenSequence<T> out;
    out.tokens = z0_full.tokens;
    out.tokens.row(0) = z_pre_last.tokens.row(0);
    out.kept.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.kept[static_cast<std::size_t>(i)] = i;
    if (static_cast<int>(z_pre_last.tokens.rows()) == n + 1 &&
        z_pre_last.kept.size() == static_cast<std::size_t>(n)) {
        // zero-mode layout: same token count; only mask=1 rows get the addition
        for (int i = 0; i < n; ++i)
            if (mask.bits[static_cast<std::size_t>(i)]) out.tokens.row(i + 1) += z_pre_last.tokens.row(i + 1);
    } else {
        for (std::size_t j = 0; j < z_pre_last.kept.size(); ++j)
            out.tokens.row(z_pre_last.kept[j] + 1) += z_pre_last.tokens.row(static_cast<Eigen::Index>(j) + 1);
    }
    return out;
}

// Full forward on one image. mask == nullptr runs the unmasked pipeline.
template <typename T>
Vec<T> forward(const Image& image, const PatchMask* mask, const ModelParams<T>& params,
               const ModelConfig& cfg, ForwardTrace<T>* trace = nullptr) {
    std::vector<const Image*> images{&image};
    std::vector<const PatchMask*> masks;
    if (mask) masks.push_back(mask);
    Mat<T> logits = forward_batch(params, cfg, images, masks, trace);
    return logits.row(0).transpose();
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

template <typename T>
Mat<T> softmax_rows(Mat<T> logits) {
    nn::softmax_rows_inplace(logits);
    return logits;
}

// Mean cross entropy over the batch; writes d(loss)/d(logits) when requested.
template <typename T>
T cross_entropy(const Mat<T>& logits, const std::vector<int>& labels, Mat<T>* dlogits = nullptr) {
    const int batch = static_cast<int>(logits.rows());
    if (static_cast<int>(labels.size()) != batch) throw ShapeMismatch("labels size != batch");
    Mat<T> probs = softmax_rows(logits);
    T loss = T(0);
    for (int b = 0; b < batch; ++b)
        loss -= static_cast<T>(
            std::log(std::max(static_cast<double>(probs(b, labels[static_cast<std::size_t>(b)])), 1e-300)));
    loss /= static_cast<T>(batch);
    if (dlogits) {
        *dlogits = probs;
        for (int b = 0; b < batch; ++b) (*dlogits)(b, labels[static_cast<std::size_t>(b)]) -= T(1);
        *dlogits /= static_cast<T>(batch);
    }
    return loss;
}

}  // namespace egvit
