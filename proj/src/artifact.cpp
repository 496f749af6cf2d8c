#include "lcc/artifact.hpp"

#include "lcc/serial.hpp"

namespace lcc {

namespace {
constexpr uint16_t kArtifactVersion = 1;

uint8_t dtype_tag(const std::string& dtype) {
    if (dtype == "f32") return 0;
    if (dtype == "f64") return 1;
    throw FormatError("artifact dtype must be f32 or f64, got " + dtype);
}
} // namespace

BufferArtifact BufferArtifact::from_cache(const KvCache& cache, const Hash256& fingerprint,
                                          const std::string& dtype, int context_length, int ratio,
                                          const Hash256& config_hash) {
    dtype_tag(dtype);
    cache.validate();
    BufferArtifact a;
    a.model_fingerprint = fingerprint;
    a.n_layers = cache.n_layers;
    a.n_heads = cache.n_heads;
    a.head_dim = cache.head_dim;
    a.k_tokens = cache.length();
    a.first_free_position = cache.positions.empty() ? 0 : cache.positions.back() + 1;
    a.dtype = dtype;
    a.context_length = context_length;
    a.ratio = ratio;
    a.config_hash = config_hash;

    const int d_model = cache.n_heads * cache.head_dim;
    const bool narrow = dtype == "f32";
    auto reorder = [&](const Tensor& src) {
        Tensor dst = Tensor::zeros({a.n_heads, a.k_tokens, a.head_dim});
        for (int h = 0; h < a.n_heads; ++h)
            for (int t = 0; t < a.k_tokens; ++t)
                for (int d = 0; d < a.head_dim; ++d) {
                    double val = src.data()[static_cast<size_t>(t) * d_model + h * a.head_dim + d];
                    if (narrow) val = static_cast<double>(static_cast<float>(val));
                    dst.data()[(static_cast<size_t>(h) * a.k_tokens + t) * a.head_dim + d] = val;
                }
        return dst;
    };
    for (int l = 0; l < a.n_layers; ++l) {
        a.k.push_back(reorder(cache.k[static_cast<size_t>(l)]));
        a.v.push_back(reorder(cache.v[static_cast<size_t>(l)]));
    }
    return a;
}

size_t artifact_file_size(int n_layers, int n_heads, int k_tokens, int head_dim,
                          const std::string& dtype) {
    const size_t elem = dtype_tag(dtype) == 0 ? 4 : 8;
    const size_t payload =
        elem * 2 * static_cast<size_t>(n_layers) * n_heads * k_tokens * head_dim;
    return kArtifactHeaderSize + payload + 4;
}

std::vector<uint8_t> serialize_artifact(const BufferArtifact& a) {
    const uint8_t tag = dtype_tag(a.dtype);
    ByteWriter w;
    w.magic("LCC1");
    w.u16(kArtifactVersion);
    w.bytes(std::span<const uint8_t>(a.model_fingerprint.data(), a.model_fingerprint.size()));
    w.u32(static_cast<uint32_t>(a.n_layers));
    w.u32(static_cast<uint32_t>(a.n_heads));
    w.u32(static_cast<uint32_t>(a.head_dim));
    w.u32(static_cast<uint32_t>(a.k_tokens));
    w.u32(static_cast<uint32_t>(a.first_free_position));
    w.u8(tag);
    w.u32(static_cast<uint32_t>(a.context_length));
    w.u32(static_cast<uint32_t>(a.ratio));
    w.bytes(std::span<const uint8_t>(a.config_hash.data(), a.config_hash.size()));
    auto emit = [&](const Tensor& t) {
        if (tag == 0) w.f32_span(t.data());
        else w.f64_span(t.data());
    };
    for (const Tensor& t : a.k) emit(t);
    for (const Tensor& t : a.v) emit(t);
    const uint32_t crc = crc32_of(w.data());
    w.u32(crc);
    return w.take();
}

BufferArtifact deserialize_artifact(std::span<const uint8_t> bytes) {
    if (bytes.size() < kArtifactHeaderSize + 4)
        throw TruncatedError("artifact: stream of " + std::to_string(bytes.size()) +
                             " bytes is shorter than header + checksum");
    // integrity first: any flipped byte surfaces as a CRC failure
    const uint32_t stored_crc = static_cast<uint32_t>(bytes[bytes.size() - 4]) |
                                (static_cast<uint32_t>(bytes[bytes.size() - 3]) << 8) |
                                (static_cast<uint32_t>(bytes[bytes.size() - 2]) << 16) |
                                (static_cast<uint32_t>(bytes[bytes.size() - 1]) << 24);
    const uint32_t actual_crc = crc32_of(bytes.subspan(0, bytes.size() - 4));
    if (stored_crc != actual_crc)
        throw CrcError("artifact: CRC mismatch (stored " + std::to_string(stored_crc) +
                       ", computed " + std::to_string(actual_crc) + ")");

    ByteReader r(bytes.subspan(0, bytes.size() - 4));
    if (r.magic() != "LCC1") throw BadMagicError("artifact: bad magic");
    const uint16_t version = r.u16();
    if (version != kArtifactVersion)
        throw BadVersionError("artifact: unsupported version " + std::to_string(version));

    BufferArtifact a;
    r.bytes(std::span<uint8_t>(a.model_fingerprint.data(), a.model_fingerprint.size()));
    a.n_layers = static_cast<int>(r.u32());
    a.n_heads = static_cast<int>(r.u32());
    a.head_dim = static_cast<int>(r.u32());
    a.k_tokens = static_cast<int>(r.u32());
    a.first_free_position = static_cast<int>(r.u32());
    const uint8_t tag = r.u8();
    if (tag > 1) throw FormatError("artifact: unknown dtype tag " + std::to_string(tag));
    a.dtype = tag == 0 ? "f32" : "f64";
    a.context_length = static_cast<int>(r.u32());
    a.ratio = static_cast<int>(r.u32());
    r.bytes(std::span<uint8_t>(a.config_hash.data(), a.config_hash.size()));

    if (a.n_layers < 1 || a.n_heads < 1 || a.head_dim < 1 || a.k_tokens < 1)
        throw FormatError("artifact: degenerate geometry in header");
    const size_t expected = artifact_file_size(a.n_layers, a.n_heads, a.k_tokens, a.head_dim, a.dtype);
    if (bytes.size() != expected)
        throw FormatError("artifact: size " + std::to_string(bytes.size()) + " does not match header (expected " +
                          std::to_string(expected) + ")");

    auto read_tensor = [&] {
        Tensor t = Tensor::zeros({a.n_heads, a.k_tokens, a.head_dim});
        if (tag == 0) r.f32_span(t.data());
        else r.f64_span(t.data());
        return t;
    };
    for (int l = 0; l < a.n_layers; ++l) a.k.push_back(read_tensor());
    for (int l = 0; l < a.n_layers; ++l) a.v.push_back(read_tensor());
    return a;
}

void save_artifact(const BufferArtifact& a, const std::string& path) {
    write_file_bytes(path, serialize_artifact(a));
}

BufferArtifact load_artifact(const std::string& path) {
    return deserialize_artifact(read_file_bytes(path));
}

KvCache attach(const ModelWeights& w, const BufferArtifact& a) {
    if (!w.frozen) throw FingerprintError("attach: model is not frozen");
    if (a.model_fingerprint != w.fingerprint)
        throw FingerprintError("attach: artifact fingerprint " + hex(a.model_fingerprint) +
                               " does not match model " + hex(w.fingerprint));
    const ModelConfig& cfg = w.config;
    if (a.n_layers != cfg.n_layers || a.n_heads != cfg.n_heads || a.head_dim != cfg.head_dim)
        throw FingerprintError("attach: artifact geometry does not match the model");

    KvCache cache;
    cache.n_layers = a.n_layers;
    cache.n_heads = a.n_heads;
    cache.head_dim = a.head_dim;
    const int d_model = a.n_heads * a.head_dim;
    auto restore = [&](const Tensor& src) {
        Tensor dst = Tensor::zeros({a.k_tokens, d_model});
        for (int h = 0; h < a.n_heads; ++h)
            for (int t = 0; t < a.k_tokens; ++t)
                for (int d = 0; d < a.head_dim; ++d)
                    dst.data()[static_cast<size_t>(t) * d_model + h * a.head_dim + d] =
                        src.data()[(static_cast<size_t>(h) * a.k_tokens + t) * a.head_dim + d];
        return dst;
    };
    for (int l = 0; l < a.n_layers; ++l) {
        cache.k.push_back(restore(a.k[static_cast<size_t>(l)]));
        cache.v.push_back(restore(a.v[static_cast<size_t>(l)]));
    }
    for (int t = 0; t < a.k_tokens; ++t)
        cache.positions.push_back(a.first_free_position - a.k_tokens + t);
    cache.validate();
    return cache;
}

} // namespace lcc
