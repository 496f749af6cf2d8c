#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lcc/artifact.hpp"
#include "lcc/lora.hpp"
#include "lcc/model.hpp"
#include "lcc/surrogate.hpp"

namespace lcc {

// K trainable rows that become the compressed memory. Every row starts at the
// mean of the vocabulary embedding; rotary offsets and the adapter break the
// symmetry.
struct BufferEmbeddings {
    Tensor rows; // [K × d_model]

    static BufferEmbeddings init(const ModelWeights& w, int k);
};

int buffer_token_count(int n_ctx, int ratio); // max(1, floor(n_ctx / ratio))

enum class LossKind { Kl, Mse };
LossKind loss_kind_from_string(const std::string& s);
std::string to_string(LossKind k);

struct CompileConfig {
    int ratio = 16;
    int explicit_k = 0; // overrides ratio when > 0
    int epochs = 45;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    std::string lr_schedule = "linear"; // constant | linear
    LossKind loss_kind = LossKind::Kl;
    bool coupled = false;
    bool adapter_enabled = true; // false: embeddings-only diagnostic
    bool agnostic_teacher_uses_context = true;
    int n_recon = 2000;
    int n_agnostic = 2000;
    int agnostic_pool = 0; // 0: one distinct query per agnostic sample
    int max_decode_len = 32;
    int batch_size = 8; // gradient accumulation
    int lora_rank = 8;
    double lora_alpha = 16.0;
    uint8_t lora_projections = 0xF;
    std::string artifact_dtype = "f32"; // f32 | f64
    uint64_t seed = 1;

    void validate() const;
    std::string to_json() const;
    static CompileConfig from_json(const std::string& text);
    std::string canonical_json() const; // sorted keys, stable across runs
    Hash256 config_hash() const;
};

struct EpochStats {
    int epoch = 0;
    int presentations = 0;
    double mean_recon_loss = 0.0;
    double mean_reg_loss = 0.0;
    double mean_total_loss = 0.0;
    double mean_grad_norm = 0.0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    std::string config_hash_hex;
    uint64_t seed = 0;
    double wall_seconds = 0.0; // volatile; serialized only on request

    std::string to_json(bool include_timing = false) const;
    std::string to_csv() const; // one row per epoch
};

// logits of the full-context teacher at the rows predicting each target token
Tensor teacher_logits(const ModelWeights& w, std::span<const int> ctx, std::span<const int> query,
                      std::span<const int> target);

enum class StudentMaskMode {
    Bottleneck,     // [ctx][buffer][query][target] under the compression mask
    RelaxedIdentity // diagnostic: no buffer, full-causal; must reproduce the teacher
};

Tensor student_logits(const ModelWeights& w, const LoraAdapter* adapter,
                      const BufferEmbeddings& buffer, std::span<const int> ctx,
                      std::span<const int> query, std::span<const int> target,
                      StudentMaskMode mode = StudentMaskMode::Bottleneck);

// teacher-vs-student objective for one sample; the sample kind only labels
// the value for reporting
Tensor sample_loss(const SurrogateSample& sample, const Tensor& teacher_block,
                   const Tensor& student_block, LossKind kind);

// AdamW over an explicit parameter set; nothing else may move.
struct AdamW {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0;
    int64_t t = 0;
    struct Slot {
        Tensor* param;
        std::vector<double> m, v;
    };
    std::vector<Slot> slots;

    void add(Tensor* p);
    void step(double lr);
    void zero_grad();
};

struct TrainState {
    const ModelWeights* weights = nullptr;
    const SyntheticContext* context = nullptr;
    CompileConfig config;
    int k_buf = 0;
    BufferEmbeddings buffer;
    std::optional<LoraAdapter> adapter;
    AdamW optimizer;
    int64_t step_index = 0;
    int64_t total_steps = 0;

    const LoraAdapter* adapter_ptr() const { return adapter ? &*adapter : nullptr; }
    double current_lr() const;
};

TrainState make_train_state(const ModelWeights& w, const SyntheticContext& ctx,
                            const CompileConfig& config);

struct StepStats {
    double batch_loss = 0.0;
    double recon_loss_sum = 0.0;
    double reg_loss_sum = 0.0;
    int recon_count = 0;
    int reg_count = 0;
    double grad_norm = 0.0;
};

// one accumulated AdamW update over the batch; aborts on non-finite loss
StepStats train_step(TrainState& state, std::span<const SurrogateSample> batch);

struct CompileResult {
    BufferArtifact artifact;
    TrainReport report;
    std::optional<LoraAdapter> coupled_adapter; // present iff config.coupled
};

CompileResult compile(const ModelWeights& w, const SyntheticContext& ctx,
                      const CompileConfig& config);

} // namespace lcc
