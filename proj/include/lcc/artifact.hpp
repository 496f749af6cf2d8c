#pragma once

#include <span>
#include <string>
#include <vector>

#include "lcc/hashing.hpp"
#include "lcc/model.hpp"

namespace lcc {

// Portable compiled memory: the buffer tokens' per-layer K/V plus enough
// metadata to attach it to the producing frozen model. Deliberately excludes
// the raw context and the adapter.
struct BufferArtifact {
    Hash256 model_fingerprint{};
    int n_layers = 0;
    int n_heads = 0;
    int head_dim = 0;
    int k_tokens = 0;
    int first_free_position = 0; // query tokens resume here
    std::string dtype = "f32";   // payload storage; in-memory stays 64-bit
    std::vector<Tensor> k, v;            // per layer [n_heads × k_tokens × head_dim]
    int context_length = 0;
    int ratio = 0;
    Hash256 config_hash{};

    // Reorders a buffer KvCache into head-major tensors. f32 mode rounds the
    // payload once, here, so a serialize/deserialize trip is the identity.
    static BufferArtifact from_cache(const KvCache& cache, const Hash256& fingerprint,
                                     const std::string& dtype, int context_length, int ratio,
                                     const Hash256& config_hash);

    int64_t elems_per_tensor() const {
        return static_cast<int64_t>(n_heads) * k_tokens * head_dim;
    }
};

inline constexpr size_t kArtifactHeaderSize = 99;

// header size + payload + trailing CRC-32
size_t artifact_file_size(int n_layers, int n_heads, int k_tokens, int head_dim,
                          const std::string& dtype);

std::vector<uint8_t> serialize_artifact(const BufferArtifact& a);
BufferArtifact deserialize_artifact(std::span<const uint8_t> bytes);
void save_artifact(const BufferArtifact& a, const std::string& path);
BufferArtifact load_artifact(const std::string& path);

// Rebuilds a KvCache at the recorded absolute positions. The artifact is
// read-only; every attach hands out an independent cache.
KvCache attach(const ModelWeights& w, const BufferArtifact& a);

} // namespace lcc
