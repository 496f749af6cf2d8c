#pragma once

#include <string>

#include "lcc/errors.hpp"

namespace lcc {

// Decoder geometry. Pre-norm RMS stack, rotary positions, untied head.
struct ModelConfig {
    int vocab_size = 96;
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int head_dim = 32;
    int d_ff = 512;
    int max_position = 512;
    double rope_base = 10000.0;
    int rope_dims = 0; // rotated dims per head; 0 rotates the whole head

    void validate() const {
        if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || head_dim < 1 ||
            d_ff < 1 || max_position < 1)
            throw ShapeError("model config: all dimensions must be >= 1");
        if (d_model != n_heads * head_dim)
            throw ShapeError("model config: d_model " + std::to_string(d_model) +
                             " != n_heads * head_dim " + std::to_string(n_heads * head_dim));
        if (head_dim % 2 != 0) throw ShapeError("model config: head_dim must be even for rotary");
        if (rope_dims < 0 || rope_dims > head_dim || rope_dims % 2 != 0)
            throw ShapeError("model config: rope_dims must be even and within head_dim");
        if (vocab_size > 512) throw ShapeError("model config: vocab_size capped at 512");
    }

    bool operator==(const ModelConfig&) const = default;
};

} // namespace lcc
