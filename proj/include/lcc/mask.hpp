#pragma once

#include <cstdint>
#include <vector>

#include "lcc/errors.hpp"

namespace lcc {

enum class Segment : uint8_t { Context = 0, Buffer = 1, Query = 2, Response = 3 };

const char* segment_name(Segment s);

// Contiguous spans in fixed order: context, buffer, query, response.
struct SegmentLayout {
    int n_ctx = 0;
    int k_buf = 1;
    int n_query = 0;
    int n_resp = 0;

    int total() const { return n_ctx + k_buf + n_query + n_resp; }
    Segment segment_of(int pos) const;
    void validate() const;
};

// Attention visibility: allow[i*n + j] == 1 means position i may attend to j.
struct SegmentMask {
    int n = 0;
    std::vector<uint8_t> allow;

    bool at(int i, int j) const { return allow[static_cast<size_t>(i) * n + j] != 0; }
};

// Visibility rules for the compression-stage sequence:
//   context   -> earlier-or-same context
//   buffer    -> all context, earlier-or-same buffer
//   query/resp-> all buffer, earlier-or-same query/response
// Everything else (notably query/response -> context) is forbidden.
SegmentMask build_segment_mask(const SegmentLayout& layout);

// Plain causal mask over n positions.
SegmentMask build_causal_mask(int n);

} // namespace lcc
