#pragma once

#include <array>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "lcc/mask.hpp"
#include "lcc/model_config.hpp"
#include "lcc/rng.hpp"
#include "lcc/tensor.hpp"

namespace lcc {

enum class Proj : int { Q = 0, K = 1, V = 2, O = 3 };
inline constexpr int kNumProj = 4;

struct SegmentSet {
    uint8_t bits = 0;

    static SegmentSet of(std::initializer_list<Segment> segs) {
        SegmentSet s;
        for (Segment g : segs) s.bits |= static_cast<uint8_t>(1u << static_cast<int>(g));
        return s;
    }
    // compression stage only: the gate that keeps generation on frozen weights
    static SegmentSet compression() { return of({Segment::Context, Segment::Buffer}); }
    static SegmentSet all() {
        return of({Segment::Context, Segment::Buffer, Segment::Query, Segment::Response});
    }
    bool contains(Segment g) const {
        return (bits >> static_cast<int>(g)) & 1u;
    }
    bool operator==(const SegmentSet&) const = default;
};

// Low-rank delta for one projection: effective weight change (alpha/r)·B·A.
// B starts all-zero, so a fresh adapter is the exact identity delta.
struct LoraSlot {
    Tensor a; // [r × d_in]
    Tensor b; // [d_out × r]
};

struct LoraAdapter {
    int rank = 8;
    double alpha = 16.0;
    uint8_t projections = 0xF; // bit per Proj
    SegmentSet active_segments = SegmentSet::compression();
    std::vector<std::array<LoraSlot, kNumProj>> layers;
    bool discarded = false;

    static LoraAdapter init(const ModelConfig& cfg, int rank, double alpha, RngState& rng,
                            uint8_t projections = 0xF);

    bool has(Proj p) const { return (projections >> static_cast<int>(p)) & 1u; }
    const LoraSlot* slot(int layer, Proj p) const {
        if (discarded || !has(p)) return nullptr;
        return &layers[static_cast<size_t>(layer)][static_cast<size_t>(p)];
    }

    std::vector<Tensor*> trainable_tensors();
    void set_trainable(bool on);

    // Frees the adapter after buffer extraction. A coupled adapter (gate open
    // on query/response) must ship with the artifact instead; dropping it is
    // refused.
    void discard();
};

// Projection with the stage gate applied per row: rows whose segment is in
// active get base + (alpha/rank)·B·(A·x); other rows get the base projection
// bit-exactly. Gradient reaches A and B only, never base_w.
Tensor apply_projection(const Tensor& base_w, const LoraSlot* slot, int rank, double alpha,
                        const Tensor& x, std::span<const Segment> row_segments,
                        SegmentSet active);

// Single-vector form: x is rank-1 [d_in], result rank-1 [d_out].
Tensor apply_projection(const Tensor& base_w, const LoraSlot* slot, int rank, double alpha,
                        const Tensor& x, Segment token_segment, SegmentSet active);

// "LCCA" sidecar, written only for coupled-mode compiles.
std::vector<uint8_t> serialize_adapter(const LoraAdapter& adapter, int d_model);
LoraAdapter deserialize_adapter(std::span<const uint8_t> bytes);
void save_adapter(const LoraAdapter& adapter, int d_model, const std::string& path);
LoraAdapter load_adapter(const std::string& path);

} // namespace lcc
