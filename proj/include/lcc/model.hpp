#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lcc/hashing.hpp"
#include "lcc/lora.hpp"
#include "lcc/mask.hpp"
#include "lcc/model_config.hpp"
#include "lcc/rng.hpp"
#include "lcc/tensor.hpp"

namespace lcc {

struct LayerWeights {
    Tensor attn_norm; // [d]
    Tensor wq, wk, wv, wo; // [d × d]
    Tensor mlp_norm; // [d]
    Tensor w_gate, w_up; // [d_ff × d]
    Tensor w_down; // [d × d_ff]
};

struct ModelWeights {
    ModelConfig config;
    Tensor tok_embed; // [V × d]
    std::vector<LayerWeights> layers;
    Tensor final_norm; // [d]
    Tensor lm_head; // [V × d]
    Hash256 fingerprint{}; // valid once frozen
    bool frozen = false;

    static ModelWeights random_init(const ModelConfig& cfg, RngState& rng);

    // serialization order: tok_embed, per layer (attn_norm, wq, wk, wv, wo,
    // mlp_norm, w_gate, w_up, w_down), final_norm, lm_head
    std::vector<Tensor*> parameters();
    std::vector<const Tensor*> parameters() const;
    void set_trainable(bool on);

    // content hash over the serialized header+weights bytes
    Hash256 content_hash() const;
    void freeze();
    void check_frozen_intact() const; // FingerprintError on any drift
};

// token id kBufferSlot marks a position fed from the buffer-embedding table
inline constexpr int kBufferSlot = -1;

struct SequenceInput {
    std::vector<int> tokens;
    std::vector<Segment> segments;
    std::vector<int> positions;

    size_t length() const { return tokens.size(); }
};

// [context][buffer][query][response] with contiguous absolute positions from 0
SequenceInput make_compression_sequence(const SegmentLayout& layout, std::span<const int> ctx,
                                        std::span<const int> query, std::span<const int> resp);
// flat run of vocab tokens in one segment, positions from start_pos
SequenceInput make_plain_sequence(std::span<const int> tokens, int start_pos, Segment seg);

struct KvCache {
    int n_layers = 0, n_heads = 0, head_dim = 0;
    std::vector<Tensor> k, v; // per layer [T × d_model], rotation baked into k
    std::vector<int> positions;

    int length() const { return static_cast<int>(positions.size()); }
    void validate() const;
};

struct ForwardResult {
    Tensor logits; // [T_new × vocab]
    KvCache cache; // cached + new entries
};

// One decoder pass over the new tokens. The mask covers cached + new length;
// adapter deltas apply to a token iff its segment is gated on.
ForwardResult forward(const ModelWeights& w, const SequenceInput& seq, const SegmentMask& mask,
                      const LoraAdapter* adapter = nullptr,
                      const Tensor* buffer_embeddings = nullptr,
                      const KvCache* cache_in = nullptr, bool want_cache = true);

using MaskBuilder = std::function<SegmentMask(int total_len)>;

// Greedy decode; ties break to the lowest token id. Emits up to max_new
// tokens and includes stop_token when it fires. The prompt must be nonempty.
std::vector<int> decode_greedy(const ModelWeights& w, const SequenceInput& prompt, KvCache cache,
                               int max_new, int stop_token,
                               const MaskBuilder& mask_builder = nullptr,
                               const LoraAdapter* adapter = nullptr,
                               Segment gen_segment = Segment::Response);

// Final forward over [context][buffer] with the compression mask, sliced to
// the buffer rows. Positions carry the absolute ids n_ctx .. n_ctx+K-1.
KvCache extract_buffer_cache(const ModelWeights& w, std::span<const int> ctx,
                             const SegmentLayout& layout, const LoraAdapter* adapter,
                             const Tensor& buffer_embeddings);

// "LCCM" checkpoint: header+weights followed by a 32-byte content hash that
// doubles as the frozen fingerprint.
std::vector<uint8_t> serialize_model(const ModelWeights& w);
ModelWeights deserialize_model(std::span<const uint8_t> bytes);
void save_checkpoint(const ModelWeights& w, const std::string& path);
ModelWeights load_checkpoint(const std::string& path);

} // namespace lcc
