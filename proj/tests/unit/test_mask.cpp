#include <doctest.h>

#include <string>

#include "lcc/mask.hpp"

using namespace lcc;

namespace {
// per-pair restatement of the visibility rules, independent of the builder
bool rule_oracle(const SegmentLayout& lay, int i, int j) {
    if (j > i) return false;
    const Segment si = lay.segment_of(i), sj = lay.segment_of(j);
    switch (si) {
        case Segment::Context: return sj == Segment::Context;
        case Segment::Buffer: return sj == Segment::Context || sj == Segment::Buffer;
        default: return sj != Segment::Context;
    }
}

std::string row_string(const SegmentMask& m, int i) {
    std::string s;
    for (int j = 0; j < m.n; ++j) s += m.at(i, j) ? '1' : '0';
    return s;
}
} // namespace

TEST_CASE("mask for (2,1,1,1) matches the forced rows") {
    SegmentMask m = build_segment_mask({2, 1, 1, 1});
    REQUIRE(m.n == 5);
    CHECK(row_string(m, 0) == "10000");
    CHECK(row_string(m, 1) == "11000");
    CHECK(row_string(m, 2) == "11100");
    CHECK(row_string(m, 3) == "00110");
    CHECK(row_string(m, 4) == "00111");
}

TEST_CASE("mask for empty context (0,1,1,0)") {
    SegmentMask m = build_segment_mask({0, 1, 1, 0});
    REQUIRE(m.n == 2);
    CHECK(row_string(m, 0) == "10");
    CHECK(row_string(m, 1) == "11");
}

TEST_CASE("mask for (3,2,2,2) matches the exhaustive rule oracle") {
    const SegmentLayout lay{3, 2, 2, 2};
    SegmentMask m = build_segment_mask(lay);
    REQUIRE(m.n == 9);
    for (int i = 0; i < 9; ++i)
        for (int j = 0; j < 9; ++j) CHECK(m.at(i, j) == rule_oracle(lay, i, j));
}

TEST_CASE("mask equals rule oracle on the full grid") {
    for (int c = 0; c <= 3; ++c)
        for (int k = 1; k <= 3; ++k)
            for (int q = 0; q <= 2; ++q)
                for (int r = 0; r <= 2; ++r) {
                    const SegmentLayout lay{c, k, q, r};
                    SegmentMask m = build_segment_mask(lay);
                    for (int i = 0; i < m.n; ++i)
                        for (int j = 0; j < m.n; ++j)
                            REQUIRE(m.at(i, j) == rule_oracle(lay, i, j));
                }
}

TEST_CASE("buffer-only layout reduces to a causal mask") {
    SegmentMask a = build_segment_mask({0, 3, 0, 0});
    SegmentMask b = build_causal_mask(3);
    REQUIRE(a.n == b.n);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(a.at(i, j) == b.at(i, j));
}

TEST_CASE("no future attention anywhere") {
    const SegmentLayout lay{3, 2, 2, 2};
    SegmentMask m = build_segment_mask(lay);
    for (int i = 0; i < m.n; ++i)
        for (int j = i + 1; j < m.n; ++j) CHECK_FALSE(m.at(i, j));
}

TEST_CASE("layout validation") {
    CHECK_THROWS_AS(build_segment_mask({2, 0, 1, 1}), MaskError);
    CHECK_THROWS_AS(build_segment_mask({-1, 1, 0, 0}), MaskError);
    SegmentLayout lay{2, 1, 1, 1};
    CHECK(lay.total() == 5);
    CHECK(lay.segment_of(0) == Segment::Context);
    CHECK(lay.segment_of(2) == Segment::Buffer);
    CHECK(lay.segment_of(3) == Segment::Query);
    CHECK(lay.segment_of(4) == Segment::Response);
}
