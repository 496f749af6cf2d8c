#include <doctest.h>

#include <cmath>
#include <cstring>

#include "lcc/artifact.hpp"
#include "lcc/trainer.hpp"

using namespace lcc;

namespace {
ModelWeights frozen_model(uint64_t seed) {
    const ModelConfig cfg{24, 12, 2, 2, 6, 20, 64, 1000.0, 0};
    RngState rng(seed);
    ModelWeights w = ModelWeights::random_init(cfg, rng);
    w.freeze();
    return w;
}

BufferArtifact sample_artifact(const ModelWeights& w, const std::string& dtype,
                               uint64_t seed = 300) {
    RngState rng(seed);
    Tensor buf = Tensor::randn({2, w.config.d_model}, rng, 0.4);
    const std::vector<int> ctx = {3, 9, 1, 5, 7, 2};
    KvCache cache = extract_buffer_cache(w, ctx, SegmentLayout{6, 2, 0, 0}, nullptr, buf);
    return BufferArtifact::from_cache(cache, w.fingerprint, dtype, 6, 3, Hash256{});
}
} // namespace

TEST_CASE("size law: minimal shape has a 16-byte payload") {
    // 1 layer, 1 head, head_dim 2, one token, f32: 2 tensors x 2 floats x 4 bytes
    CHECK(artifact_file_size(1, 1, 1, 2, "f32") == kArtifactHeaderSize + 16 + 4);
}

TEST_CASE("size law holds across a grid of shapes") {
    const int grid[10][4] = {{1, 1, 1, 2},  {1, 2, 3, 4} , {2, 2, 2, 8}, {3, 4, 16, 8},
                             {2, 4, 1, 12}, {4, 2, 7, 6},  {1, 8, 2, 2}, {5, 1, 3, 10},
                             {2, 3, 5, 4},  {3, 2, 9, 16}};
    for (const auto& g : grid) {
        for (const std::string dtype : {"f32", "f64"}) {
            const size_t elem = dtype == "f32" ? 4 : 8;
            const size_t expected =
                kArtifactHeaderSize +
                elem * 2 * static_cast<size_t>(g[0]) * g[1] * g[2] * g[3] + 4;
            CHECK(artifact_file_size(g[0], g[1], g[2], g[3], dtype) == expected);
        }
    }
}

TEST_CASE("serialized artifact matches the size law exactly") {
    ModelWeights w = frozen_model(301);
    BufferArtifact a = sample_artifact(w, "f32");
    CHECK(serialize_artifact(a).size() ==
          artifact_file_size(a.n_layers, a.n_heads, a.k_tokens, a.head_dim, "f32"));
    BufferArtifact b = sample_artifact(w, "f64");
    CHECK(serialize_artifact(b).size() ==
          artifact_file_size(b.n_layers, b.n_heads, b.k_tokens, b.head_dim, "f64"));
}

TEST_CASE("serialize then deserialize is the identity") {
    ModelWeights w = frozen_model(302);
    for (const std::string dtype : {"f32", "f64"}) {
        BufferArtifact a = sample_artifact(w, dtype);
        const auto bytes = serialize_artifact(a);
        BufferArtifact back = deserialize_artifact(bytes);
        CHECK(back.dtype == dtype);
        CHECK(back.model_fingerprint == a.model_fingerprint);
        CHECK(back.k_tokens == a.k_tokens);
        CHECK(back.first_free_position == a.first_free_position);
        CHECK(back.context_length == 6);
        CHECK(back.ratio == 3);
        // bitwise identical payload and bytes
        for (int l = 0; l < a.n_layers; ++l)
            for (int64_t i = 0; i < a.k[static_cast<size_t>(l)].size(); ++i) {
                CHECK(back.k[static_cast<size_t>(l)].at(i) == a.k[static_cast<size_t>(l)].at(i));
                CHECK(back.v[static_cast<size_t>(l)].at(i) == a.v[static_cast<size_t>(l)].at(i));
            }
        CHECK(serialize_artifact(back) == bytes);
    }
}

TEST_CASE("every single-byte corruption triggers a CRC error") {
    ModelWeights w = frozen_model(303);
    BufferArtifact a = sample_artifact(w, "f32");
    const auto bytes = serialize_artifact(a);
    RngState rng(304);
    for (int trial = 0; trial < 100; ++trial) {
        auto mutated = bytes;
        const size_t pos = static_cast<size_t>(rng.next_below(bytes.size()));
        const uint8_t bit = static_cast<uint8_t>(1u << rng.next_below(8));
        mutated[pos] ^= bit;
        CHECK_THROWS_AS(deserialize_artifact(mutated), CrcError);
    }
}

TEST_CASE("distinct failure modes raise distinct errors") {
    ModelWeights w = frozen_model(305);
    BufferArtifact a = sample_artifact(w, "f32");
    const auto bytes = serialize_artifact(a);

    SUBCASE("empty stream: truncation") {
        CHECK_THROWS_AS(deserialize_artifact(std::span<const uint8_t>()), TruncatedError);
    }
    SUBCASE("short stream: truncation") {
        std::vector<uint8_t> prefix(bytes.begin(), bytes.begin() + 40);
        CHECK_THROWS_AS(deserialize_artifact(prefix), TruncatedError);
    }
    SUBCASE("bad magic with a recomputed checksum") {
        auto mutated = bytes;
        mutated[0] = 'X';
        const uint32_t crc = crc32_of(
            std::span<const uint8_t>(mutated.data(), mutated.size() - 4));
        std::memcpy(mutated.data() + mutated.size() - 4, &crc, 4);
        CHECK_THROWS_AS(deserialize_artifact(mutated), BadMagicError);
    }
    SUBCASE("version 999 names the version") {
        auto mutated = bytes;
        const uint16_t v999 = 999;
        std::memcpy(mutated.data() + 4, &v999, 2);
        const uint32_t crc = crc32_of(
            std::span<const uint8_t>(mutated.data(), mutated.size() - 4));
        std::memcpy(mutated.data() + mutated.size() - 4, &crc, 4);
        try {
            deserialize_artifact(mutated);
            FAIL("expected BadVersionError");
        } catch (const BadVersionError& e) {
            CHECK(std::string(e.what()).find("999") != std::string::npos);
        }
    }
}

TEST_CASE("f32 narrowing happens at artifact creation, so roundtrip attach is exact") {
    ModelWeights w = frozen_model(306);
    BufferArtifact a = sample_artifact(w, "f32");
    KvCache direct = attach(w, a);
    BufferArtifact b = deserialize_artifact(serialize_artifact(a));
    KvCache roundtrip = attach(w, b);
    for (int l = 0; l < a.n_layers; ++l)
        for (int64_t i = 0; i < direct.k[static_cast<size_t>(l)].size(); ++i) {
            CHECK(direct.k[static_cast<size_t>(l)].at(i) == roundtrip.k[static_cast<size_t>(l)].at(i));
            CHECK(direct.v[static_cast<size_t>(l)].at(i) == roundtrip.v[static_cast<size_t>(l)].at(i));
        }
}

TEST_CASE("attach restores the recorded absolute positions") {
    ModelWeights w = frozen_model(307);
    BufferArtifact a = sample_artifact(w, "f64");
    CHECK(a.first_free_position == 8);
    KvCache cache = attach(w, a);
    REQUIRE(cache.positions.size() == 2);
    CHECK(cache.positions[0] == 6);
    CHECK(cache.positions[1] == 7);
}

TEST_CASE("attach rejects a model with any perturbed weight") {
    ModelWeights w = frozen_model(308);
    BufferArtifact a = sample_artifact(w, "f32");
    ModelWeights other = frozen_model(308);
    other.layers[0].wq.at2(0, 0) += 1e-9;
    other.freeze(); // refreeze: fingerprint differs from the artifact's
    CHECK_THROWS_AS(attach(other, a), FingerprintError);
}

TEST_CASE("f64 artifacts attach bit-exactly to the source cache") {
    ModelWeights w = frozen_model(309);
    RngState rng(310);
    Tensor buf = Tensor::randn({2, w.config.d_model}, rng, 0.4);
    const std::vector<int> ctx = {3, 9, 1, 5, 7, 2};
    KvCache cache = extract_buffer_cache(w, ctx, SegmentLayout{6, 2, 0, 0}, nullptr, buf);
    BufferArtifact a = BufferArtifact::from_cache(cache, w.fingerprint, "f64", 6, 3, Hash256{});
    KvCache attached = attach(w, a);
    for (int l = 0; l < w.config.n_layers; ++l)
        for (int64_t i = 0; i < cache.k[static_cast<size_t>(l)].size(); ++i) {
            CHECK(attached.k[static_cast<size_t>(l)].at(i) == cache.k[static_cast<size_t>(l)].at(i));
            CHECK(attached.v[static_cast<size_t>(l)].at(i) == cache.v[static_cast<size_t>(l)].at(i));
        }
}

TEST_CASE("artifacts are stateless: repeated queries leave them untouched") {
    ModelWeights w = frozen_model(311);
    BufferArtifact a = sample_artifact(w, "f32");
    const auto before = serialize_artifact(a);

    const std::vector<int> query = {3, 5};
    auto run = [&] {
        KvCache cache = attach(w, a);
        SequenceInput seq = make_plain_sequence(query, a.first_free_position, Segment::Query);
        return decode_greedy(w, seq, std::move(cache), 4, 0);
    };
    const auto out1 = run();
    const auto out2 = run();
    CHECK(out1 == out2);
    CHECK(serialize_artifact(a) == before);

    // two attaches serve independent caches
    KvCache c1 = attach(w, a);
    KvCache c2 = attach(w, a);
    c1.k[0].at(0) += 1.0;
    CHECK(c2.k[0].at(0) != c1.k[0].at(0));
}
