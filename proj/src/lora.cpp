#include "lcc/lora.hpp"

#include <cmath>

#include "lcc/serial.hpp"

namespace lcc {

LoraAdapter LoraAdapter::init(const ModelConfig& cfg, int rank, double alpha, RngState& rng,
                              uint8_t projections) {
    cfg.validate();
    if (rank < 1) throw ShapeError("lora rank must be >= 1");
    if (rank > cfg.d_model)
        throw ShapeError("lora rank " + std::to_string(rank) + " exceeds d_model " +
                         std::to_string(cfg.d_model));
    LoraAdapter ad;
    ad.rank = rank;
    ad.alpha = alpha;
    ad.projections = projections;
    ad.layers.resize(static_cast<size_t>(cfg.n_layers));
    const double std_a = 1.0 / std::sqrt(static_cast<double>(rank));
    for (auto& layer : ad.layers)
        for (int p = 0; p < kNumProj; ++p) {
            layer[static_cast<size_t>(p)].a = Tensor::randn({rank, cfg.d_model}, rng, std_a);
            layer[static_cast<size_t>(p)].b = Tensor::zeros({cfg.d_model, rank});
        }
    return ad;
}

std::vector<Tensor*> LoraAdapter::trainable_tensors() {
    std::vector<Tensor*> out;
    for (auto& layer : layers)
        for (int p = 0; p < kNumProj; ++p) {
            if (!has(static_cast<Proj>(p))) continue;
            out.push_back(&layer[static_cast<size_t>(p)].a);
            out.push_back(&layer[static_cast<size_t>(p)].b);
        }
    return out;
}

void LoraAdapter::set_trainable(bool on) {
    for (Tensor* t : trainable_tensors()) t->set_requires_grad(on);
}

void LoraAdapter::discard() {
    if (active_segments.contains(Segment::Query) || active_segments.contains(Segment::Response))
        throw Error("coupled adapter is part of the generation path; persist it as a sidecar "
                    "instead of discarding");
    layers.clear();
    discarded = true;
}

Tensor apply_projection(const Tensor& base_w, const LoraSlot* slot, int rank, double alpha,
                        const Tensor& x, std::span<const Segment> row_segments,
                        SegmentSet active) {
    Tensor base = linear(x, base_w);
    if (slot == nullptr) return base;
    const int t = x.dim(0);
    if (static_cast<int>(row_segments.size()) != t)
        throw ShapeError("apply_projection: segment count " + std::to_string(row_segments.size()) +
                         " != rows " + std::to_string(t));
    bool any = false, every = true;
    std::vector<double> gate(static_cast<size_t>(t));
    for (int i = 0; i < t; ++i) {
        const bool on = active.contains(row_segments[static_cast<size_t>(i)]);
        gate[static_cast<size_t>(i)] = on ? 1.0 : 0.0;
        any = any || on;
        every = every && on;
    }
    if (!any && !slot->a.requires_grad() && !slot->b.requires_grad()) return base;
    Tensor delta = scale(linear(linear(x, slot->a), slot->b), alpha / rank);
    if (!every) delta = row_scale(delta, std::move(gate));
    return add(base, delta);
}

Tensor apply_projection(const Tensor& base_w, const LoraSlot* slot, int rank, double alpha,
                        const Tensor& x, Segment token_segment, SegmentSet active) {
    if (x.rank() != 1) throw ShapeError("apply_projection: expected rank-1 input");
    Tensor row = Tensor::from({1, x.dim(0)}, x.data(), x.requires_grad());
    const Segment segs[1] = {token_segment};
    Tensor out = apply_projection(base_w, slot, rank, alpha, row, segs, active);
    return Tensor::from({out.dim(1)}, out.data());
}

namespace {
constexpr uint16_t kAdapterVersion = 1;
}

std::vector<uint8_t> serialize_adapter(const LoraAdapter& adapter, int d_model) {
    if (adapter.discarded) throw Error("serialize_adapter: adapter was discarded");
    ByteWriter w;
    w.magic("LCCA");
    w.u16(kAdapterVersion);
    w.u32(static_cast<uint32_t>(adapter.rank));
    w.f64(adapter.alpha);
    w.u32(static_cast<uint32_t>(adapter.layers.size()));
    w.u8(adapter.projections);
    w.u8(adapter.active_segments.bits);
    w.u32(static_cast<uint32_t>(d_model));
    for (const auto& layer : adapter.layers)
        for (int p = 0; p < kNumProj; ++p) {
            if (!adapter.has(static_cast<Proj>(p))) continue;
            w.f64_span(layer[static_cast<size_t>(p)].a.data());
            w.f64_span(layer[static_cast<size_t>(p)].b.data());
        }
    return w.take();
}

LoraAdapter deserialize_adapter(std::span<const uint8_t> bytes) {
    ByteReader r(bytes);
    if (r.magic() != "LCCA") throw BadMagicError("adapter sidecar: bad magic");
    const uint16_t version = r.u16();
    if (version != kAdapterVersion)
        throw BadVersionError("adapter sidecar: unsupported version " + std::to_string(version));
    LoraAdapter ad;
    ad.rank = static_cast<int>(r.u32());
    ad.alpha = r.f64();
    const auto n_layers = r.u32();
    ad.projections = r.u8();
    ad.active_segments.bits = r.u8();
    const auto d_model = static_cast<int>(r.u32());
    if (ad.rank < 1 || d_model < 1) throw FormatError("adapter sidecar: bad dimensions");
    ad.layers.resize(n_layers);
    for (auto& layer : ad.layers)
        for (int p = 0; p < kNumProj; ++p) {
            if (!ad.has(static_cast<Proj>(p))) continue;
            Tensor a = Tensor::zeros({ad.rank, d_model});
            Tensor b = Tensor::zeros({d_model, ad.rank});
            r.f64_span(a.data());
            r.f64_span(b.data());
            layer[static_cast<size_t>(p)] = LoraSlot{a, b};
        }
    if (r.remaining() != 0) throw FormatError("adapter sidecar: trailing bytes");
    return ad;
}

void save_adapter(const LoraAdapter& adapter, int d_model, const std::string& path) {
    const auto bytes = serialize_adapter(adapter, d_model);
    write_file_bytes(path, bytes);
}

LoraAdapter load_adapter(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    return deserialize_adapter(bytes);
}

} // namespace lcc
