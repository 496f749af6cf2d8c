#include "lcc/mask.hpp"

#include <string>

namespace lcc {

const char* segment_name(Segment s) {
    switch (s) {
        case Segment::Context: return "context";
        case Segment::Buffer: return "buffer";
        case Segment::Query: return "query";
        case Segment::Response: return "response";
    }
    return "?";
}

Segment SegmentLayout::segment_of(int pos) const {
    if (pos < n_ctx) return Segment::Context;
    if (pos < n_ctx + k_buf) return Segment::Buffer;
    if (pos < n_ctx + k_buf + n_query) return Segment::Query;
    return Segment::Response;
}

void SegmentLayout::validate() const {
    if (n_ctx < 0 || n_query < 0 || n_resp < 0)
        throw MaskError("segment layout: negative span length");
    if (k_buf < 1) throw MaskError("segment layout: k_buf must be >= 1");
}

SegmentMask build_segment_mask(const SegmentLayout& layout) {
    layout.validate();
    const int n = layout.total();
    SegmentMask mask;
    mask.n = n;
    mask.allow.assign(static_cast<size_t>(n) * n, 0);
    for (int i = 0; i < n; ++i) {
        const Segment si = layout.segment_of(i);
        for (int j = 0; j <= i; ++j) {
            const Segment sj = layout.segment_of(j);
            bool ok = false;
            switch (si) {
                case Segment::Context:
                    ok = sj == Segment::Context;
                    break;
                case Segment::Buffer:
                    ok = sj == Segment::Context || sj == Segment::Buffer;
                    break;
                case Segment::Query:
                case Segment::Response:
                    ok = sj == Segment::Buffer || sj == Segment::Query || sj == Segment::Response;
                    break;
            }
            if (ok) mask.allow[static_cast<size_t>(i) * n + j] = 1;
        }
    }
    return mask;
}

SegmentMask build_causal_mask(int n) {
    if (n < 0) throw MaskError("causal mask: negative length");
    SegmentMask mask;
    mask.n = n;
    mask.allow.assign(static_cast<size_t>(n) * n, 0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) mask.allow[static_cast<size_t>(i) * n + j] = 1;
    return mask;
}

} // namespace lcc
