#include "lcc/model.hpp"

#include <cmath>
#include <limits>

#include "lcc/serial.hpp"

namespace lcc {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr uint16_t kModelVersion = 1;
} // namespace

ModelWeights ModelWeights::random_init(const ModelConfig& cfg, RngState& rng) {
    cfg.validate();
    ModelWeights w;
    w.config = cfg;
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    const double down_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
    w.tok_embed = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, proj_std);
    w.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& layer : w.layers) {
        layer.attn_norm = Tensor::full({cfg.d_model}, 1.0);
        layer.wq = Tensor::randn({cfg.d_model, cfg.d_model}, rng, proj_std);
        layer.wk = Tensor::randn({cfg.d_model, cfg.d_model}, rng, proj_std);
        layer.wv = Tensor::randn({cfg.d_model, cfg.d_model}, rng, proj_std);
        layer.wo = Tensor::randn({cfg.d_model, cfg.d_model}, rng, proj_std);
        layer.mlp_norm = Tensor::full({cfg.d_model}, 1.0);
        layer.w_gate = Tensor::randn({cfg.d_ff, cfg.d_model}, rng, proj_std);
        layer.w_up = Tensor::randn({cfg.d_ff, cfg.d_model}, rng, proj_std);
        layer.w_down = Tensor::randn({cfg.d_model, cfg.d_ff}, rng, down_std);
    }
    w.final_norm = Tensor::full({cfg.d_model}, 1.0);
    w.lm_head = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, proj_std);
    return w;
}

std::vector<Tensor*> ModelWeights::parameters() {
    std::vector<Tensor*> out;
    out.push_back(&tok_embed);
    for (auto& layer : layers) {
        out.push_back(&layer.attn_norm);
        out.push_back(&layer.wq);
        out.push_back(&layer.wk);
        out.push_back(&layer.wv);
        out.push_back(&layer.wo);
        out.push_back(&layer.mlp_norm);
        out.push_back(&layer.w_gate);
        out.push_back(&layer.w_up);
        out.push_back(&layer.w_down);
    }
    out.push_back(&final_norm);
    out.push_back(&lm_head);
    return out;
}

std::vector<const Tensor*> ModelWeights::parameters() const {
    auto mut = const_cast<ModelWeights*>(this)->parameters();
    return std::vector<const Tensor*>(mut.begin(), mut.end());
}

void ModelWeights::set_trainable(bool on) {
    for (Tensor* t : parameters()) t->set_requires_grad(on);
}

Hash256 ModelWeights::content_hash() const {
    auto bytes = serialize_model(*this);
    // drop the trailing hash itself
    bytes.resize(bytes.size() - 32);
    return sha256(bytes);
}

void ModelWeights::freeze() {
    set_trainable(false);
    fingerprint = content_hash();
    frozen = true;
}

void ModelWeights::check_frozen_intact() const {
    if (!frozen) throw FingerprintError("model weights were never frozen");
    if (content_hash() != fingerprint)
        throw FingerprintError("frozen weights were mutated: fingerprint mismatch");
}

// ---- sequences ---------------------------------------------------------------

SequenceInput make_compression_sequence(const SegmentLayout& layout, std::span<const int> ctx,
                                        std::span<const int> query, std::span<const int> resp) {
    layout.validate();
    if (static_cast<int>(ctx.size()) != layout.n_ctx ||
        static_cast<int>(query.size()) != layout.n_query ||
        static_cast<int>(resp.size()) != layout.n_resp)
        throw ShapeError("compression sequence: token spans do not match layout");
    SequenceInput seq;
    const int total = layout.total();
    seq.tokens.reserve(static_cast<size_t>(total));
    seq.segments.reserve(static_cast<size_t>(total));
    seq.positions.reserve(static_cast<size_t>(total));
    for (int t : ctx) seq.tokens.push_back(t);
    for (int i = 0; i < layout.k_buf; ++i) seq.tokens.push_back(kBufferSlot);
    for (int t : query) seq.tokens.push_back(t);
    for (int t : resp) seq.tokens.push_back(t);
    for (int i = 0; i < total; ++i) {
        seq.segments.push_back(layout.segment_of(i));
        seq.positions.push_back(i);
    }
    return seq;
}

SequenceInput make_plain_sequence(std::span<const int> tokens, int start_pos, Segment seg) {
    SequenceInput seq;
    for (size_t i = 0; i < tokens.size(); ++i) {
        seq.tokens.push_back(tokens[i]);
        seq.segments.push_back(seg);
        seq.positions.push_back(start_pos + static_cast<int>(i));
    }
    return seq;
}

void KvCache::validate() const {
    if (k.size() != static_cast<size_t>(n_layers) || v.size() != static_cast<size_t>(n_layers))
        throw ShapeError("kv cache: layer count mismatch");
    for (int l = 0; l < n_layers; ++l) {
        if (k[static_cast<size_t>(l)].dim(0) != length() ||
            v[static_cast<size_t>(l)].dim(0) != length())
            throw ShapeError("kv cache: per-layer lengths differ");
    }
    for (size_t i = 1; i < positions.size(); ++i)
        if (positions[i] <= positions[i - 1])
            throw ShapeError("kv cache: positions must be strictly increasing");
}

// ---- forward ------------------------------------------------------------------

namespace {

// context/query/response rows come from the vocab table, buffer slots from the
// trainable buffer matrix; consecutive runs keep the graph small
Tensor assemble_embeddings(const ModelWeights& w, const SequenceInput& seq,
                           const Tensor* buffer_embeddings) {
    const int t = static_cast<int>(seq.length());
    std::vector<Tensor> parts;
    int i = 0;
    int buffer_row = 0;
    while (i < t) {
        if (seq.tokens[static_cast<size_t>(i)] == kBufferSlot) {
            int j = i;
            while (j < t && seq.tokens[static_cast<size_t>(j)] == kBufferSlot) ++j;
            if (buffer_embeddings == nullptr)
                throw ShapeError("forward: sequence has buffer slots but no buffer embeddings");
            const int k0 = buffer_row, k1 = buffer_row + (j - i);
            if (k1 > buffer_embeddings->dim(0))
                throw ShapeError("forward: more buffer slots than buffer-embedding rows");
            parts.push_back(slice_rows(*buffer_embeddings, k0, k1));
            buffer_row = k1;
            i = j;
        } else {
            std::vector<int> ids;
            while (i < t && seq.tokens[static_cast<size_t>(i)] != kBufferSlot) {
                const int id = seq.tokens[static_cast<size_t>(i)];
                if (id < 0 || id >= w.config.vocab_size)
                    throw ShapeError("forward: token id " + std::to_string(id) +
                                     " out of range [0, " + std::to_string(w.config.vocab_size) + ")");
                ids.push_back(id);
                ++i;
            }
            parts.push_back(embedding_rows(w.tok_embed, ids));
        }
    }
    if (buffer_embeddings != nullptr && buffer_row != 0 && buffer_row != buffer_embeddings->dim(0))
        throw ShapeError("forward: buffer slots do not cover all buffer-embedding rows");
    if (parts.empty()) throw ShapeError("forward: empty sequence");
    return parts.size() == 1 ? parts[0] : concat_rows(parts);
}

} // namespace

ForwardResult forward(const ModelWeights& w, const SequenceInput& seq, const SegmentMask& mask,
                      const LoraAdapter* adapter, const Tensor* buffer_embeddings,
                      const KvCache* cache_in, bool want_cache) {
    const ModelConfig& cfg = w.config;
    const int t = static_cast<int>(seq.length());
    if (t == 0) throw ShapeError("forward: empty sequence");
    if (seq.segments.size() != seq.tokens.size() || seq.positions.size() != seq.tokens.size())
        throw ShapeError("forward: tokens/segments/positions lengths differ");
    const int n_cached = cache_in ? cache_in->length() : 0;
    const int total = n_cached + t;
    if (mask.n != total)
        throw MaskError("forward: mask covers " + std::to_string(mask.n) + " positions, need " +
                        std::to_string(total));
    for (int p : seq.positions)
        if (p < 0 || p >= cfg.max_position)
            throw PositionError("forward: position " + std::to_string(p) + " outside [0, " +
                                std::to_string(cfg.max_position) + ")");
    if (cache_in) {
        cache_in->validate();
        if (cache_in->n_layers != cfg.n_layers || cache_in->n_heads != cfg.n_heads ||
            cache_in->head_dim != cfg.head_dim)
            throw ShapeError("forward: cache geometry does not match the model");
        if (n_cached > 0 && t > 0 && seq.positions.front() <= cache_in->positions.back())
            throw PositionError("forward: new positions must follow cached positions");
    }

    const bool use_adapter = adapter != nullptr && !adapter->discarded;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));

    // additive mask bias for the new rows, shared across layers and heads
    Tensor bias = Tensor::zeros({t, total});
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < total; ++j)
            if (!mask.at(n_cached + i, j)) bias.at2(i, j) = kNegInf;

    Tensor x = assemble_embeddings(w, seq, buffer_embeddings);

    KvCache cache_out;
    if (want_cache) {
        cache_out.n_layers = cfg.n_layers;
        cache_out.n_heads = cfg.n_heads;
        cache_out.head_dim = cfg.head_dim;
        if (cache_in) cache_out.positions = cache_in->positions;
        for (int p : seq.positions) cache_out.positions.push_back(p);
    }

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& layer = w.layers[static_cast<size_t>(l)];
        Tensor h = rms_norm(x, layer.attn_norm);

        auto proj = [&](const Tensor& wt, Proj p) {
            const LoraSlot* slot = use_adapter ? adapter->slot(l, p) : nullptr;
            return apply_projection(wt, slot, use_adapter ? adapter->rank : 1,
                                    use_adapter ? adapter->alpha : 0.0, h, seq.segments,
                                    use_adapter ? adapter->active_segments : SegmentSet{});
        };
        Tensor q = rotary(proj(layer.wq, Proj::Q), seq.positions, cfg.n_heads, cfg.head_dim,
                          cfg.rope_base, cfg.rope_dims);
        Tensor k = rotary(proj(layer.wk, Proj::K), seq.positions, cfg.n_heads, cfg.head_dim,
                          cfg.rope_base, cfg.rope_dims);
        Tensor v = proj(layer.wv, Proj::V);

        Tensor k_all = k, v_all = v;
        if (n_cached > 0) {
            k_all = concat_rows({cache_in->k[static_cast<size_t>(l)], k});
            v_all = concat_rows({cache_in->v[static_cast<size_t>(l)], v});
        }
        if (want_cache) {
            cache_out.k.push_back(k_all.detached());
            cache_out.v.push_back(v_all.detached());
        }

        std::vector<Tensor> head_outs;
        head_outs.reserve(static_cast<size_t>(cfg.n_heads));
        for (int hd = 0; hd < cfg.n_heads; ++hd) {
            const int c0 = hd * cfg.head_dim, c1 = (hd + 1) * cfg.head_dim;
            Tensor qh = slice_cols(q, c0, c1);
            Tensor kh = slice_cols(k_all, c0, c1);
            Tensor vh = slice_cols(v_all, c0, c1);
            Tensor scores = add(scale(matmul(qh, transpose(kh)), att_scale), bias);
            Tensor probs = softmax_rows(scores);
            head_outs.push_back(matmul(probs, vh));
        }
        Tensor attn = concat_cols(head_outs);

        const LoraSlot* slot_o = use_adapter ? adapter->slot(l, Proj::O) : nullptr;
        Tensor o = apply_projection(layer.wo, slot_o, use_adapter ? adapter->rank : 1,
                                    use_adapter ? adapter->alpha : 0.0, attn, seq.segments,
                                    use_adapter ? adapter->active_segments : SegmentSet{});
        x = add(x, o);

        Tensor h2 = rms_norm(x, layer.mlp_norm);
        Tensor act = mul(silu(linear(h2, layer.w_gate)), linear(h2, layer.w_up));
        x = add(x, linear(act, layer.w_down));
    }

    Tensor logits = linear(rms_norm(x, w.final_norm), w.lm_head);
    return ForwardResult{logits, std::move(cache_out)};
}

std::vector<int> decode_greedy(const ModelWeights& w, const SequenceInput& prompt, KvCache cache,
                               int max_new, int stop_token, const MaskBuilder& mask_builder,
                               const LoraAdapter* adapter, Segment gen_segment) {
    if (max_new < 1) throw ShapeError("decode_greedy: max_new must be >= 1");
    if (prompt.length() == 0) throw ShapeError("decode_greedy: empty prompt");
    const MaskBuilder causal = [](int n) { return build_causal_mask(n); };
    const MaskBuilder& build = mask_builder ? mask_builder : causal;

    std::vector<int> out;
    SequenceInput current = prompt;
    int next_pos = prompt.positions.back() + 1;
    for (int step = 0; step < max_new; ++step) {
        const int total = cache.length() + static_cast<int>(current.length());
        ForwardResult res = forward(w, current, build(total), adapter, nullptr,
                                    cache.length() ? &cache : nullptr, true);
        const int last = res.logits.dim(0) - 1;
        const int v = res.logits.dim(1);
        const int tok = argmax_lowest(
            std::span<const double>(res.logits.data().data() + static_cast<size_t>(last) * v,
                                    static_cast<size_t>(v)));
        out.push_back(tok);
        if (tok == stop_token) break;
        cache = std::move(res.cache);
        current = make_plain_sequence(std::span<const int>(&tok, 1), next_pos, gen_segment);
        ++next_pos;
    }
    return out;
}

KvCache extract_buffer_cache(const ModelWeights& w, std::span<const int> ctx,
                             const SegmentLayout& layout, const LoraAdapter* adapter,
                             const Tensor& buffer_embeddings) {
    layout.validate();
    if (layout.n_query != 0 || layout.n_resp != 0)
        throw ShapeError("extract_buffer_cache: layout must have no query/response spans");
    if (buffer_embeddings.dim(0) != layout.k_buf)
        throw ShapeError("extract_buffer_cache: buffer rows != k_buf");
    SequenceInput seq = make_compression_sequence(layout, ctx, {}, {});
    ForwardResult res =
        forward(w, seq, build_segment_mask(layout), adapter, &buffer_embeddings, nullptr, true);

    KvCache buf;
    buf.n_layers = w.config.n_layers;
    buf.n_heads = w.config.n_heads;
    buf.head_dim = w.config.head_dim;
    for (int l = 0; l < w.config.n_layers; ++l) {
        buf.k.push_back(
            slice_rows(res.cache.k[static_cast<size_t>(l)], layout.n_ctx, layout.total()).detached());
        buf.v.push_back(
            slice_rows(res.cache.v[static_cast<size_t>(l)], layout.n_ctx, layout.total()).detached());
    }
    for (int i = 0; i < layout.k_buf; ++i) buf.positions.push_back(layout.n_ctx + i);
    return buf;
}

// ---- checkpoint io -------------------------------------------------------------

std::vector<uint8_t> serialize_model(const ModelWeights& w) {
    ByteWriter out;
    out.magic("LCCM");
    out.u16(kModelVersion);
    out.u32(static_cast<uint32_t>(w.config.vocab_size));
    out.u32(static_cast<uint32_t>(w.config.d_model));
    out.u32(static_cast<uint32_t>(w.config.n_layers));
    out.u32(static_cast<uint32_t>(w.config.n_heads));
    out.u32(static_cast<uint32_t>(w.config.head_dim));
    out.u32(static_cast<uint32_t>(w.config.d_ff));
    out.u32(static_cast<uint32_t>(w.config.max_position));
    out.f64(w.config.rope_base);
    out.u32(static_cast<uint32_t>(w.config.rope_dims));
    for (const Tensor* t : w.parameters()) out.f64_span(t->data());
    const Hash256 h = sha256(out.data());
    out.bytes(std::span<const uint8_t>(h.data(), h.size()));
    return out.take();
}

ModelWeights deserialize_model(std::span<const uint8_t> bytes) {
    if (bytes.size() < 32 + 4) throw TruncatedError("model checkpoint: too short");
    const Hash256 expected = sha256(bytes.subspan(0, bytes.size() - 32));
    Hash256 stored{};
    std::copy_n(bytes.data() + bytes.size() - 32, 32, stored.data());
    if (expected != stored)
        throw FingerprintError("model checkpoint: content hash mismatch (corrupted file)");

    ByteReader r(bytes.subspan(0, bytes.size() - 32));
    if (r.magic() != "LCCM") throw BadMagicError("model checkpoint: bad magic");
    const uint16_t version = r.u16();
    if (version != kModelVersion)
        throw BadVersionError("model checkpoint: unsupported version " + std::to_string(version));
    ModelConfig cfg;
    cfg.vocab_size = static_cast<int>(r.u32());
    cfg.d_model = static_cast<int>(r.u32());
    cfg.n_layers = static_cast<int>(r.u32());
    cfg.n_heads = static_cast<int>(r.u32());
    cfg.head_dim = static_cast<int>(r.u32());
    cfg.d_ff = static_cast<int>(r.u32());
    cfg.max_position = static_cast<int>(r.u32());
    cfg.rope_base = r.f64();
    cfg.rope_dims = static_cast<int>(r.u32());
    cfg.validate();

    RngState unused(0);
    ModelWeights w = ModelWeights::random_init(cfg, unused);
    for (Tensor* t : w.parameters()) r.f64_span(t->data());
    if (r.remaining() != 0) throw FormatError("model checkpoint: trailing bytes");
    w.fingerprint = stored;
    w.frozen = true;
    w.set_trainable(false);
    return w;
}

void save_checkpoint(const ModelWeights& w, const std::string& path) {
    write_file_bytes(path, serialize_model(w));
}

ModelWeights load_checkpoint(const std::string& path) {
    return deserialize_model(read_file_bytes(path));
}

} // namespace lcc
