#pragma once

#include <algorithm>
#include <memory>
#include <numeric>
#include <vector>

#include "metalora/lora.hpp"
#include "metalora/ops.hpp"
#include "metalora/optim.hpp"
#include "metalora/tensor.hpp"
#include "metalora/util.hpp"
#include "metalora/vit_config.hpp"

namespace metalora {

template <typename T>
struct AttentionRecordT {
    int layer;
    std::vector<T> a_cls; // head-averaged CLS attention, length = seq at that layer
};

template <typename T>
struct ForwardOutputT {
    TensorT<T> cls_embedding;                   // [D]
    std::vector<AttentionRecordT<T>> records;   // one per layer
    std::vector<int> kept_token_positions;      // original patch ids, ascending
    std::vector<LayerSeqLens> seq_lens;         // realized per-layer lengths
};

// Selects the sequence indices that survive pruning: CLS plus the
// top-ceil(y*m) image tokens by a_cls, ties broken by lower index. The
// result is ascending, so surviving tokens keep their order.
template <typename T>
std::vector<int> select_kept_tokens(const std::vector<T>& a_cls, double keep_fraction) {
    const int seq = static_cast<int>(a_cls.size());
    const int m = seq - 1;
    if (m <= 0) return {0};
    const int k = keep_count(keep_fraction, m);
    std::vector<int> idx(m);
    std::iota(idx.begin(), idx.end(), 1);
    std::stable_sort(idx.begin(), idx.end(), [&](int i, int j) {
        if (a_cls[i] != a_cls[j]) return a_cls[i] > a_cls[j];
        return i < j;
    });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    std::vector<int> kept;
    kept.reserve(k + 1);
    kept.push_back(0);
    kept.insert(kept.end(), idx.begin(), idx.end());
    return kept;
}

struct ForwardOptions {
    const PrunePlan* plan = nullptr;
    const std::vector<int>* kept_patches = nullptr; // sparse-token input subset
};

// Pre-norm ViT with per-layer CLS-attention records, optional LoRA on the
// q/v projections, and mid-layer token pruning.
template <typename T>
class ViTModelT {
public:
    struct Layer {
        TensorT<T> ln1_g, ln1_b;
        TensorT<T> wq, bq, wk, bk, wv, bv, wo, bo;
        TensorT<T> ln2_g, ln2_b;
        TensorT<T> w1, b1, w2, b2;
    };

    ViTConfig cfg;
    TensorT<T> patch_w; // [patch_dim x D]
    TensorT<T> patch_b; // [D]
    TensorT<T> cls_token; // [1 x D]
    TensorT<T> pos;     // [(n+1) x D]
    std::vector<Layer> layers;
    TensorT<T> final_ln_g, final_ln_b;

    static ViTModelT create(const ViTConfig& cfg, uint64_t seed) {
        cfg.validate();
        ViTModelT m;
        m.cfg = cfg;
        auto rng = make_rng(seed, rng_tag::backbone);
        const int d = cfg.embed_dim;
        const T std02 = static_cast<T>(0.02);
        auto gauss = [&](Shape s) { return TensorT<T>::randn(std::move(s), rng, T(0), std02); };
        m.patch_w = gauss({cfg.patch_dim(), d});
        m.patch_b = TensorT<T>::zeros({d});
        m.cls_token = gauss({1, d});
        m.pos = gauss({cfg.seq_len(), d});
        for (int l = 0; l < cfg.depth; ++l) {
            Layer layer;
            layer.ln1_g = TensorT<T>::full({d}, T(1));
            layer.ln1_b = TensorT<T>::zeros({d});
            layer.wq = gauss({d, d});
            layer.bq = TensorT<T>::zeros({d});
            layer.wk = gauss({d, d});
            layer.bk = TensorT<T>::zeros({d});
            layer.wv = gauss({d, d});
            layer.bv = TensorT<T>::zeros({d});
            layer.wo = gauss({d, d});
            layer.bo = TensorT<T>::zeros({d});
            layer.ln2_g = TensorT<T>::full({d}, T(1));
            layer.ln2_b = TensorT<T>::zeros({d});
            layer.w1 = gauss({d, d * cfg.mlp_ratio});
            layer.b1 = TensorT<T>::zeros({d * cfg.mlp_ratio});
            layer.w2 = gauss({d * cfg.mlp_ratio, d});
            layer.b2 = TensorT<T>::zeros({d});
            m.layers.push_back(std::move(layer));
        }
        m.final_ln_g = TensorT<T>::full({d}, T(1));
        m.final_ln_b = TensorT<T>::zeros({d});
        m.build_patch_index();
        return m;
    }

    std::vector<TensorT<T>> parameters() const {
        std::vector<TensorT<T>> out = {patch_w, patch_b, cls_token, pos};
        for (const auto& l : layers) {
            for (const auto& t : {l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv,
                                  l.wo, l.bo, l.ln2_g, l.ln2_b, l.w1, l.b1, l.w2, l.b2})
                out.push_back(t);
        }
        out.push_back(final_ln_g);
        out.push_back(final_ln_b);
        return out;
    }

    void set_trainable(bool trainable) {
        for (auto p : parameters()) p.set_requires_grad(trainable);
    }

    uint64_t weight_hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& p : parameters()) h = hash_values(p.data(), h);
        return h;
    }

    // Patch-pixel matrix [n x patch_dim]; differentiable in the image.
    TensorT<T> extract_patches(const TensorT<T>& image) const {
        check_image(image);
        auto flat = reshape(image, Shape{static_cast<int>(image.numel())});
        return gather_flat(flat, patch_index_, Shape{cfg.num_patches(), cfg.patch_dim()});
    }

    // Linear patch embeddings before position encodings, [n x D].
    TensorT<T> patch_tokens(const TensorT<T>& image) const {
        return linear(extract_patches(image), patch_w, patch_b);
    }

    struct Embedded {
        TensorT<T> tokens;          // [(k+1) x D], CLS at row 0
        std::vector<int> positions; // original patch ids of image tokens
    };

    // Tokenizes an image: CLS + (a subset of) patch embeddings, each with
    // its own position encoding. kept_patches selects the sparse-token
    // subset; null means all patches.
    Embedded embed(const TensorT<T>& image, const std::vector<int>* kept_patches = nullptr) const {
        auto tokens = patch_tokens(image);
        std::vector<int> positions;
        if (kept_patches) {
            positions = *kept_patches;
            std::sort(positions.begin(), positions.end());
            if (positions.empty()) throw count_error("embed: empty token subset");
            for (int p : positions)
                if (p < 0 || p >= cfg.num_patches())
                    throw index_error("embed: patch index " + std::to_string(p));
            tokens = take_rows(tokens, positions);
        } else {
            positions.resize(cfg.num_patches());
            std::iota(positions.begin(), positions.end(), 0);
        }
        auto seq = concat_rows<T>({cls_token, tokens});
        std::vector<int> pos_rows = {0};
        for (int p : positions) pos_rows.push_back(p + 1);
        auto pe = take_rows(pos, pos_rows);
        return {add(seq, pe), std::move(positions)};
    }

    // Runs the transformer stack over an embedded sequence.
    ForwardOutputT<T> forward_tokens(TensorT<T> x, std::vector<int> positions,
                                     const LoRAAdapterT<T>* adapter = nullptr,
                                     const PrunePlan* plan = nullptr) const {
        if (!x.valid() || x.ndim() != 2 || x.dim(0) < 1)
            throw dimension_error("forward: token sequence must be [(S>=1) x D]");
        if (plan) plan->validate(cfg.depth);
        const int d = cfg.embed_dim;
        const int heads = cfg.num_heads;
        const int hd = cfg.head_dim();
        const T attn_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

        ForwardOutputT<T> out;
        for (int l = 0; l < cfg.depth; ++l) {
            const auto& layer = layers[l];
            const int seq = x.dim(0);
            auto h = layernorm(x, layer.ln1_g, layer.ln1_b);
            auto q = linear(h, layer.wq, layer.bq);
            auto k = linear(h, layer.wk, layer.bk);
            auto v = linear(h, layer.wv, layer.bv);
            if (adapter) {
                if (const auto* e = adapter->find(l, LoraSite::q))
                    q = add(q, matmul(matmul(h, e->a), e->b));
                if (const auto* e = adapter->find(l, LoraSite::v))
                    v = add(v, matmul(matmul(h, e->a), e->b));
            }
            std::vector<TensorT<T>> head_outs;
            std::vector<T> a_cls(seq, T(0));
            for (int hi = 0; hi < heads; ++hi) {
                auto qh = slice_cols(q, hi * hd, hd);
                auto kh = slice_cols(k, hi * hd, hd);
                auto vh = slice_cols(v, hi * hd, hd);
                auto attn = softmax(scale(matmul(qh, transpose(kh)), attn_scale), 1);
                for (int j = 0; j < seq; ++j) a_cls[j] += attn.data()[j];
                head_outs.push_back(matmul(attn, vh));
            }
            const T inv_heads = T(1) / static_cast<T>(heads);
            for (auto& w : a_cls) w *= inv_heads;
            out.records.push_back({l, a_cls});

            auto attn_out = linear(concat_cols(head_outs), layer.wo, layer.bo);
            x = add(x, attn_out);

            const int64_t attn_len = seq;
            if (plan) {
                auto it = plan->keep.find(l);
                if (it != plan->keep.end()) {
                    auto kept = select_kept_tokens(a_cls, it->second);
                    x = take_rows(x, kept);
                    std::vector<int> new_positions;
                    for (size_t i = 1; i < kept.size(); ++i)
                        new_positions.push_back(positions[kept[i] - 1]);
                    positions = std::move(new_positions);
                }
            }
            out.seq_lens.push_back({attn_len, x.dim(0)});

            auto h2 = layernorm(x, layer.ln2_g, layer.ln2_b);
            x = add(x, linear(gelu(linear(h2, layer.w1, layer.b1)), layer.w2, layer.b2));
        }
        auto final_x = layernorm(x, final_ln_g, final_ln_b);
        out.cls_embedding = reshape(take_rows(final_x, {0}), Shape{d});
        out.kept_token_positions = std::move(positions);
        return out;
    }

    ForwardOutputT<T> forward(const TensorT<T>& image, const LoRAAdapterT<T>* adapter = nullptr,
                              const ForwardOptions& opts = {}) const {
        auto emb = embed(image, opts.kept_patches);
        return forward_tokens(emb.tokens, std::move(emb.positions), adapter, opts.plan);
    }

    void check_image(const TensorT<T>& image) const {
        if (image.ndim() != 3 || image.dim(0) != cfg.channels || image.dim(1) != cfg.image_size ||
            image.dim(2) != cfg.image_size)
            throw dimension_error("image shape " + shape_str(image.shape()) +
                                  " does not match config");
    }

private:
    std::shared_ptr<const std::vector<int64_t>> patch_index_;

    void build_patch_index() {
        auto idx = std::make_shared<std::vector<int64_t>>();
        const int g = cfg.grid(), p = cfg.patch_size, hw = cfg.image_size;
        idx->reserve(static_cast<size_t>(cfg.num_patches()) * cfg.patch_dim());
        for (int gy = 0; gy < g; ++gy)
            for (int gx = 0; gx < g; ++gx)
                for (int c = 0; c < cfg.channels; ++c)
                    for (int py = 0; py < p; ++py)
                        for (int px = 0; px < p; ++px)
                            idx->push_back((static_cast<int64_t>(c) * hw + gy * p + py) * hw +
                                           gx * p + px);
        patch_index_ = idx;
    }
};

using ViTModel = ViTModelT<float>;
using ForwardOutput = ForwardOutputT<float>;
using AttentionRecord = AttentionRecordT<float>;

// Classifier logits for a batch of CLS embeddings via the head.
template <typename T>
TensorT<T> head_logits(const ClassificationHeadT<T>& head, const std::vector<TensorT<T>>& embeddings) {
    std::vector<TensorT<T>> rows;
    rows.reserve(embeddings.size());
    for (const auto& e : embeddings)
        rows.push_back(reshape(e, Shape{1, static_cast<int>(e.numel())}));
    return linear(concat_rows(rows), head.weight, head.bias);
}

} // namespace metalora
