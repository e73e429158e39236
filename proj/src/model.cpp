#include "circuitprobe/model.hpp"

#include "circuitprobe/safetensors.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <set>
#include <sstream>
#include <stdexcept>

namespace circuitprobe {

namespace {

// GPT-2 small/medium/large/XL all use 64-dim heads; the head count is not
// recoverable from tensor shapes alone, so this is the fallback when the
// archive carries no "n_head" metadata.
constexpr int kFamilyHeadDim = 64;

std::string shape_string(std::span<const std::int64_t> shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

class WeightReader {
public:
    explicit WeightReader(const SafetensorsFile& file) : file_(file) {
        for (const std::string& name : file.names()) {
            std::string key = name;
            if (key.rfind("transformer.", 0) == 0) key = key.substr(12);
            key_to_raw_[key] = name;
        }
    }

    bool has(const std::string& key) const { return key_to_raw_.count(key) > 0; }

    MatrixF matrix(const std::string& key, std::int64_t rows, std::int64_t cols) {
        const TensorEntry& e = entryFor(key);
        if (e.shape.size() != 2 || (rows >= 0 && e.shape[0] != rows) ||
            (cols >= 0 && e.shape[1] != cols)) {
            fail(key, e, rows, cols);
        }
        std::vector<float> data = file_.floats(key_to_raw_.at(key));
        return Eigen::Map<const MatrixF>(data.data(), e.shape[0], e.shape[1]);
    }

    VectorF vector(const std::string& key, std::int64_t size) {
        const TensorEntry& e = entryFor(key);
        if (e.shape.size() != 1 || (size >= 0 && e.shape[0] != size)) {
            fail(key, e, size, -2);
        }
        std::vector<float> data = file_.floats(key_to_raw_.at(key));
        return Eigen::Map<const VectorF>(data.data(), e.shape[0]);
    }

    const TensorEntry& entryFor(const std::string& key) {
        auto it = key_to_raw_.find(key);
        if (it == key_to_raw_.end()) {
            throw std::runtime_error("shape inconsistency: missing tensor '" + key + "'");
        }
        used_.insert(key);
        return file_.entry(it->second);
    }

    std::vector<std::string> unused() const {
        std::vector<std::string> out;
        for (const auto& [key, raw] : key_to_raw_) {
            if (!used_.count(key)) out.push_back(raw);
        }
        return out;
    }

private:
    [[noreturn]] void fail(const std::string& key, const TensorEntry& e, std::int64_t d0,
                           std::int64_t d1) {
        std::ostringstream os;
        os << "shape inconsistency: tensor '" << key << "' has shape "
           << shape_string(e.shape) << ", expected [" << d0;
        if (d1 != -2) os << ", " << (d1 >= 0 ? std::to_string(d1) : std::string("?"));
        os << "]";
        throw std::runtime_error(os.str());
    }

    const SafetensorsFile& file_;
    std::map<std::string, std::string> key_to_raw_;
    std::set<std::string> used_;
};

void apply_patches(const RunHooks& hooks, NodeSite site, int layer, int head, MatrixF& values,
                   int seq_len, int d_model) {
    for (const PatchSpec& p : hooks.patches) {
        if (p.node.site != site || p.node.layer != layer) continue;
        if (site == NodeSite::HeadOut && p.node.head != head) continue;
        int t;
        switch (p.node.position.kind) {
            case NodePos::Kind::Final:
                t = seq_len - 1;
                break;
            case NodePos::Kind::Absolute:
                t = p.node.position.index;
                if (t < 0) t += seq_len;
                break;
            default:
                throw std::runtime_error("patch position for " + to_string(p.node) +
                                         " was not resolved to a token index");
        }
        if (t < 0 || t >= seq_len) {
            throw std::runtime_error("patch node out of range: " + to_string(p.node) +
                                     " in a sequence of length " + std::to_string(seq_len));
        }
        if (p.replacement.size() != d_model) {
            throw std::runtime_error("patch replacement for " + to_string(p.node) + " has size " +
                                     std::to_string(p.replacement.size()) + ", expected " +
                                     std::to_string(d_model));
        }
        values.row(t) = p.replacement.transpose();
    }
}

struct HeadResult {
    MatrixF output;    // [T x d_model]
    MatrixF pattern;   // [T x T]
    MatrixF values;    // [T x d_head]
};

HeadResult attend_one_head(const LayerWeights& lw, const ModelConfig& cfg, const MatrixF& normed,
                           int head, bool mask_to_diagonal) {
    const int T = static_cast<int>(normed.rows());
    const int d = cfg.d_model;
    const int dh = cfg.d_head;

    MatrixF q = normed * lw.w_qkv.block(0, head * dh, d, dh);
    MatrixF k = normed * lw.w_qkv.block(0, d + head * dh, d, dh);
    MatrixF v = normed * lw.w_qkv.block(0, 2 * d + head * dh, d, dh);
    q.rowwise() += lw.b_qkv.segment(head * dh, dh).transpose();
    k.rowwise() += lw.b_qkv.segment(d + head * dh, dh).transpose();
    v.rowwise() += lw.b_qkv.segment(2 * d + head * dh, dh).transpose();

    HeadResult r;
    r.values = v;
    r.pattern = MatrixF::Zero(T, T);
    if (mask_to_diagonal) {
        r.pattern.diagonal().setOnes();
    } else {
        const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
        MatrixF scores = (q * k.transpose()) * scale;
        for (int t = 0; t < T; ++t) {
            Eigen::RowVectorXf row = scores.row(t).head(t + 1);
            softmax_inplace(row);
            r.pattern.row(t).head(t + 1) = row;
        }
    }
    r.output.noalias() = (r.pattern * v) * lw.w_attn_out.middleRows(head * dh, dh);
    return r;
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_head <= 0 || d_mlp <= 0 ||
        d_vocab <= 0 || max_context <= 0) {
        throw std::runtime_error("model config has a non-positive dimension");
    }
    if (d_head * n_heads != d_model) {
        throw std::runtime_error("model config violates d_head * n_heads == d_model");
    }
    if (!(ln_epsilon > 0.0f)) {
        throw std::runtime_error("model config requires ln_epsilon > 0");
    }
}

std::string to_string(NodeSite site) {
    switch (site) {
        case NodeSite::ResidPre: return "resid_pre";
        case NodeSite::ResidMid: return "resid_mid";
        case NodeSite::ResidPost: return "resid_post";
        case NodeSite::HeadOut: return "head_out";
        case NodeSite::MlpOut: return "mlp_out";
    }
    return "?";
}

std::string to_string(const NodeId& node) {
    std::ostringstream os;
    os << to_string(node.site) << ":" << node.layer;
    if (node.site == NodeSite::HeadOut) os << ":h" << node.head;
    switch (node.position.kind) {
        case NodePos::Kind::Final: os << ":final"; break;
        case NodePos::Kind::XSpanEnd: os << ":x-end"; break;
        case NodePos::Kind::Absolute: os << ":@" << node.position.index; break;
    }
    return os.str();
}

Model load_weights(const std::string& path) {
    const SafetensorsFile file = SafetensorsFile::open(path);
    WeightReader reader(file);

    Model model;
    ModelConfig& cfg = model.config;

    const TensorEntry& wte = reader.entryFor("wte.weight");
    if (wte.shape.size() != 2) {
        throw std::runtime_error("shape inconsistency: tensor 'wte.weight' is not 2-D");
    }
    cfg.d_vocab = static_cast<int>(wte.shape[0]);
    cfg.d_model = static_cast<int>(wte.shape[1]);

    int n_layers = 0;
    while (reader.has("h." + std::to_string(n_layers) + ".ln_1.weight")) ++n_layers;
    if (n_layers == 0) {
        throw std::runtime_error("shape inconsistency: missing tensor 'h.0.ln_1.weight'");
    }
    cfg.n_layers = n_layers;

    const TensorEntry& wpe = reader.entryFor("wpe.weight");
    cfg.max_context = static_cast<int>(wpe.shape.at(0));
    const TensorEntry& fc0 = reader.entryFor("h.0.mlp.c_fc.weight");
    if (fc0.shape.size() != 2) {
        throw std::runtime_error("shape inconsistency: tensor 'h.0.mlp.c_fc.weight' is not 2-D");
    }
    cfg.d_mlp = static_cast<int>(fc0.shape[1]);

    auto meta_it = file.metadata().find("n_head");
    if (meta_it != file.metadata().end()) {
        cfg.n_heads = std::atoi(meta_it->second.c_str());
        if (cfg.n_heads <= 0 || cfg.d_model % cfg.n_heads != 0) {
            throw std::runtime_error("archive metadata n_head=" + meta_it->second +
                                     " does not divide d_model=" + std::to_string(cfg.d_model));
        }
    } else {
        if (cfg.d_model % kFamilyHeadDim != 0) {
            throw std::runtime_error(
                "cannot infer head count: d_model=" + std::to_string(cfg.d_model) +
                " is not a multiple of the family head width 64 and the archive carries no "
                "n_head metadata");
        }
        cfg.n_heads = cfg.d_model / kFamilyHeadDim;
    }
    cfg.d_head = cfg.d_model / cfg.n_heads;

    Weights& w = model.weights;
    w.token_embedding = reader.matrix("wte.weight", cfg.d_vocab, cfg.d_model);
    w.positional_embedding = reader.matrix("wpe.weight", cfg.max_context, cfg.d_model);
    w.ln_f_gamma = reader.vector("ln_f.weight", cfg.d_model);
    w.ln_f_beta = reader.vector("ln_f.bias", cfg.d_model);

    w.layers.resize(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "h." + std::to_string(l) + ".";
        LayerWeights& lw = w.layers[l];
        lw.ln1_gamma = reader.vector(p + "ln_1.weight", cfg.d_model);
        lw.ln1_beta = reader.vector(p + "ln_1.bias", cfg.d_model);
        lw.w_qkv = reader.matrix(p + "attn.c_attn.weight", cfg.d_model, 3 * cfg.d_model);
        lw.b_qkv = reader.vector(p + "attn.c_attn.bias", 3 * cfg.d_model);
        lw.w_attn_out = reader.matrix(p + "attn.c_proj.weight", cfg.d_model, cfg.d_model);
        lw.b_attn_out = reader.vector(p + "attn.c_proj.bias", cfg.d_model);
        lw.ln2_gamma = reader.vector(p + "ln_2.weight", cfg.d_model);
        lw.ln2_beta = reader.vector(p + "ln_2.bias", cfg.d_model);
        lw.w_mlp_in = reader.matrix(p + "mlp.c_fc.weight", cfg.d_model, cfg.d_mlp);
        lw.b_mlp_in = reader.vector(p + "mlp.c_fc.bias", cfg.d_mlp);
        lw.w_mlp_out = reader.matrix(p + "mlp.c_proj.weight", cfg.d_mlp, cfg.d_model);
        lw.b_mlp_out = reader.vector(p + "mlp.c_proj.bias", cfg.d_model);
    }

    if (reader.has("lm_head.weight")) {
        w.unembedding = reader.matrix("lm_head.weight", cfg.d_vocab, cfg.d_model);
    } else {
        w.unembedding = w.token_embedding;  // GPT-2 ties the unembedding
    }

    cfg.validate();
    model.weight_hash = file.content_hash();
    for (const std::string& name : reader.unused()) {
        // Attention-mask buffers ship with some exports of these checkpoints;
        // they carry no weights.
        if (name.find(".attn.masked_bias") != std::string::npos) continue;
        if (name.size() > 10 && name.ends_with(".attn.bias") &&
            !name.ends_with(".c_attn.bias")) {
            continue;
        }
        model.extra_tensors.push_back(name);
    }
    return model;
}

int ActivationCache::resolve_position(int position) const {
    int t = position;
    if (t < 0) t += seq_len;
    if (t < 0 || t >= seq_len) {
        throw std::runtime_error("position " + std::to_string(position) +
                                 " out of range for sequence of length " +
                                 std::to_string(seq_len));
    }
    return t;
}

VectorF ActivationCache::node_value(const NodeId& node) const {
    if (node.position.kind != NodePos::Kind::Absolute &&
        node.position.kind != NodePos::Kind::Final) {
        throw std::runtime_error("node " + to_string(node) + " has an unresolved position");
    }
    const int t = node.position.kind == NodePos::Kind::Final
                      ? seq_len - 1
                      : resolve_position(node.position.index);
    const std::size_t l = static_cast<std::size_t>(node.layer);
    if (l >= resid_pre.size()) {
        throw std::runtime_error("node layer out of range: " + to_string(node));
    }
    switch (node.site) {
        case NodeSite::ResidPre: return resid_pre[l].row(t).transpose();
        case NodeSite::ResidMid: return resid_mid[l].row(t).transpose();
        case NodeSite::ResidPost: return resid_post[l].row(t).transpose();
        case NodeSite::MlpOut: return mlp_out[l].row(t).transpose();
        case NodeSite::HeadOut:
            if (node.head < 0 || static_cast<std::size_t>(node.head) >= head_out[l].size()) {
                throw std::runtime_error("node head out of range: " + to_string(node));
            }
            return head_out[l][static_cast<std::size_t>(node.head)].row(t).transpose();
    }
    throw std::runtime_error("unknown node site");
}

namespace {
std::atomic<std::uint64_t> g_forward_passes{0};
}

std::uint64_t forward_pass_count() { return g_forward_passes.load(); }

ActivationCache forward_with_cache(const Model& model, std::span<const int> tokens,
                                   const RunHooks& hooks) {
    const ModelConfig& cfg = model.config;
    const Weights& w = model.weights;
    const int T = static_cast<int>(tokens.size());
    if (T < 1 || T > cfg.max_context) {
        throw std::runtime_error("sequence length " + std::to_string(T) +
                                 " outside [1, " + std::to_string(cfg.max_context) + "]");
    }
    for (int id : tokens) {
        if (id < 0 || id >= cfg.d_vocab) {
            throw std::runtime_error("invalid token id " + std::to_string(id));
        }
    }
    for (const PatchSpec& p : hooks.patches) {
        if (p.node.layer < 0 || p.node.layer >= cfg.n_layers ||
            (p.node.site == NodeSite::HeadOut &&
             (p.node.head < 0 || p.node.head >= cfg.n_heads))) {
            throw std::runtime_error("patch node out of range: " + to_string(p.node));
        }
    }

    ActivationCache cache;
    cache.tokens.assign(tokens.begin(), tokens.end());
    cache.seq_len = T;
    cache.resid_pre.resize(cfg.n_layers);
    cache.resid_mid.resize(cfg.n_layers);
    cache.resid_post.resize(cfg.n_layers);
    cache.head_out.assign(cfg.n_layers, std::vector<MatrixF>(cfg.n_heads));
    cache.mlp_out.resize(cfg.n_layers);
    cache.attn_pattern.assign(cfg.n_layers, std::vector<MatrixF>(cfg.n_heads));
    cache.value_vectors.assign(cfg.n_layers, std::vector<MatrixF>(cfg.n_heads));

    MatrixF x(T, cfg.d_model);
    for (int t = 0; t < T; ++t) {
        x.row(t) = w.token_embedding.row(tokens[static_cast<std::size_t>(t)]) +
                   w.positional_embedding.row(t);
    }

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[static_cast<std::size_t>(l)];

        cache.resid_pre[l] = x;
        apply_patches(hooks, NodeSite::ResidPre, l, -1, cache.resid_pre[l], T, cfg.d_model);
        x = cache.resid_pre[l];

        const MatrixF normed = layer_norm_rows(x, lw.ln1_gamma, lw.ln1_beta, cfg.ln_epsilon);
        MatrixF head_sum = MatrixF::Zero(T, cfg.d_model);
        for (int h = 0; h < cfg.n_heads; ++h) {
            bool masked = false;
            if (hooks.suppression != nullptr) {
                for (const auto& [ml, mh] : hooks.suppression->masked_heads) {
                    if (ml == l && mh == h) {
                        masked = true;
                        break;
                    }
                }
            }
            HeadResult r = attend_one_head(lw, cfg, normed, h, masked);
            cache.attn_pattern[l][h] = std::move(r.pattern);
            cache.value_vectors[l][h] = std::move(r.values);
            cache.head_out[l][h] = std::move(r.output);
            apply_patches(hooks, NodeSite::HeadOut, l, h, cache.head_out[l][h], T, cfg.d_model);
            head_sum += cache.head_out[l][h];
        }
        // The attention output bias is head-independent: it joins the residual
        // once here and is attributed to no individual head.
        x += head_sum;
        x.rowwise() += lw.b_attn_out.transpose();

        cache.resid_mid[l] = x;
        apply_patches(hooks, NodeSite::ResidMid, l, -1, cache.resid_mid[l], T, cfg.d_model);
        x = cache.resid_mid[l];

        MatrixF hidden = layer_norm_rows(x, lw.ln2_gamma, lw.ln2_beta, cfg.ln_epsilon) *
                         lw.w_mlp_in;
        hidden.rowwise() += lw.b_mlp_in.transpose();
        for (Eigen::Index i = 0; i < hidden.size(); ++i) {
            hidden.data()[i] = gelu_tanh(hidden.data()[i]);
        }
        cache.mlp_out[l].noalias() = hidden * lw.w_mlp_out;
        cache.mlp_out[l].rowwise() += lw.b_mlp_out.transpose();

        for (const MlpLinearSubstitution& sub : hooks.mlp_substitutions) {
            if (sub.layer != l) continue;
            if (static_cast<int>(sub.w_head.size()) != cfg.n_heads ||
                sub.intercept.size() != cfg.d_model) {
                throw std::runtime_error("MLP substitution for layer " + std::to_string(l) +
                                         " has wrong dimensions");
            }
            VectorF replaced = sub.intercept;
            for (int h = 0; h < cfg.n_heads; ++h) {
                replaced += sub.w_head[static_cast<std::size_t>(h)] *
                            cache.head_out[l][h].row(T - 1).transpose();
            }
            replaced += sub.w_resid * cache.resid_pre[l].row(T - 1).transpose();
            cache.mlp_out[l].row(T - 1) = replaced.transpose();
        }
        apply_patches(hooks, NodeSite::MlpOut, l, -1, cache.mlp_out[l], T, cfg.d_model);

        x += cache.mlp_out[l];
        cache.resid_post[l] = x;
        if (hooks.suppression != nullptr) {
            for (const auto& [sl, vec] : hooks.suppression->subtract_vectors) {
                if (sl != l) continue;
                if (vec.size() != cfg.d_model) {
                    throw std::runtime_error("suppression vector for layer " + std::to_string(l) +
                                             " has wrong dimension");
                }
                cache.resid_post[l].row(T - 1) -= vec.transpose();
            }
        }
        apply_patches(hooks, NodeSite::ResidPost, l, -1, cache.resid_post[l], T, cfg.d_model);
        x = cache.resid_post[l];
    }

    const MatrixF normed = layer_norm_rows(x, w.ln_f_gamma, w.ln_f_beta, cfg.ln_epsilon);
    cache.final_logits.noalias() = normed * w.unembedding.transpose();
    g_forward_passes.fetch_add(1, std::memory_order_relaxed);
    return cache;
}

std::pair<MatrixF, MatrixF> head_output(const Model& model, int layer, int head,
                                        const MatrixF& normed_residuals) {
    const ModelConfig& cfg = model.config;
    if (layer < 0 || layer >= cfg.n_layers || head < 0 || head >= cfg.n_heads) {
        throw std::runtime_error("layer/head out of range");
    }
    if (normed_residuals.cols() != cfg.d_model) {
        throw std::runtime_error("head_output expects [T x d_model] residuals");
    }
    HeadResult r = attend_one_head(model.weights.layers[static_cast<std::size_t>(layer)], cfg,
                                   normed_residuals, head, false);
    return {std::move(r.output), std::move(r.pattern)};
}

VectorF ov_apply(const Model& model, int layer, int head, const VectorF& v) {
    const ModelConfig& cfg = model.config;
    if (layer < 0 || layer >= cfg.n_layers || head < 0 || head >= cfg.n_heads) {
        throw std::runtime_error("layer/head out of range");
    }
    const LayerWeights& lw = model.weights.layers[static_cast<std::size_t>(layer)];
    const int d = cfg.d_model;
    const int dh = cfg.d_head;
    Eigen::RowVectorXf value = v.transpose() * lw.w_qkv.block(0, 2 * d + head * dh, d, dh);
    return (value * lw.w_attn_out.middleRows(head * dh, dh)).transpose();
}

MatrixF qk_matrix(const Model& model, int layer, int head) {
    const ModelConfig& cfg = model.config;
    if (layer < 0 || layer >= cfg.n_layers || head < 0 || head >= cfg.n_heads) {
        throw std::runtime_error("layer/head out of range");
    }
    const LayerWeights& lw = model.weights.layers[static_cast<std::size_t>(layer)];
    const int d = cfg.d_model;
    const int dh = cfg.d_head;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    return lw.w_qkv.block(0, head * dh, d, dh) *
           lw.w_qkv.block(0, d + head * dh, d, dh).transpose() * scale;
}

MatrixF ov_matrix(const Model& model, int layer, int head) {
    const ModelConfig& cfg = model.config;
    if (layer < 0 || layer >= cfg.n_layers || head < 0 || head >= cfg.n_heads) {
        throw std::runtime_error("layer/head out of range");
    }
    const LayerWeights& lw = model.weights.layers[static_cast<std::size_t>(layer)];
    const int d = cfg.d_model;
    const int dh = cfg.d_head;
    return lw.w_qkv.block(0, 2 * d + head * dh, d, dh) * lw.w_attn_out.middleRows(head * dh, dh);
}

VectorF unembed(const Model& model, const VectorF& v) {
    if (v.size() != model.config.d_model) {
        throw std::runtime_error("unembed expects a d_model vector");
    }
    const VectorF normed =
        layer_norm(v, model.weights.ln_f_gamma, model.weights.ln_f_beta, model.config.ln_epsilon);
    return model.weights.unembedding * normed;
}

}  // namespace circuitprobe
