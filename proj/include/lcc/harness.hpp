#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lcc/artifact.hpp"
#include "lcc/model.hpp"
#include "lcc/surrogate.hpp"
#include "lcc/trainer.hpp"

namespace lcc {

// exit codes shared by the CLI and the pipeline helpers
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitDivergence = 2;
inline constexpr int kExitPretrainBudget = 3;
inline constexpr int kExitFingerprint = 4;
inline constexpr int kExitMissingInput = 5;

// ---- pretraining ----------------------------------------------------------------

struct PretrainConfig {
    ModelConfig model{96, 48, 2, 4, 12, 128, 256, 10000.0};
    double learning_rate = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    int batch_size = 16;
    int max_steps = 4000;
    int min_steps = 50;
    int eval_every = 100;
    double recall_target = 0.95;
    int eval_contexts = 12;
    int n_facts = 8;   // facts per held-out context
    int ctx_len = 64;  // held-out context budget; training lengths vary below it
    double grad_clip = 1.0;
    double mix_recall = 0.5;
    double mix_repeat = 0.25; // remainder is agnostic
    uint64_t seed = 7;

    void validate() const;
    std::string to_json() const;
    static PretrainConfig from_json(const std::string& text);
    std::string canonical_json() const;
    Hash256 config_hash() const;
};

struct PretrainReport {
    int steps = 0;
    double final_loss = 0.0;
    double full_context_recall = 0.0;
    double no_context_recall = 0.0;
    double chance_level = 0.0;
    bool reached_target = false;
    std::string config_hash_hex;
    uint64_t seed = 0;
    double wall_seconds = 0.0;

    std::string to_json(bool include_timing = false) const;
};

// Trains the base model on the synthetic mixture until held-out full-context
// recall reaches the target, then freezes and fingerprints it. Throws
// BudgetError when the budget runs out first.
ModelWeights run_pretrain(const PretrainConfig& cfg, PretrainReport& report);

// ---- evaluation ------------------------------------------------------------------

// exact-match accuracy of greedy decodes against the gold value spans
double probe_accuracy_full_context(const ModelWeights& w, const SyntheticContext& ctx,
                                   const ProbeSet& probes);
double probe_accuracy_no_context(const ModelWeights& w, const ProbeSet& probes);
// through an attached buffer cache; adapter only for coupled artifacts
double probe_accuracy_buffer(const ModelWeights& w, const BufferArtifact& artifact,
                             const ProbeSet& probes, const LoraAdapter* adapter = nullptr);

// mean KL(teacher(C, q, y) || student(q, y)) over held-out agnostic queries,
// teacher-forced on the teacher's own greedy answer y. `artifact == nullptr`
// scores the bare no-context model.
double mean_agnostic_drift(const ModelWeights& w, const SyntheticContext& ctx,
                           const BufferArtifact* artifact, uint64_t query_seed, int n_queries,
                           int max_decode_len, const LoraAdapter* adapter = nullptr);

// TLM-style reference condition: brief adapter-only tuning on the raw context
// (plain LM loss), context discarded afterwards, adapter kept for querying.
struct TlmOptions {
    int steps = 60;
    double learning_rate = 1e-3;
    int rank = 8;
    double alpha = 16.0;
    uint64_t seed = 11;
};
double probe_accuracy_tlm(const ModelWeights& w, const SyntheticContext& ctx,
                          const ProbeSet& probes, const TlmOptions& opt);

struct EvalRow {
    std::string condition; // full_context | no_context | buffer | coupled | tlm
    std::string axis;       // sweep rows only
    std::string axis_value; // sweep rows only
    uint64_t context_seed = 0;
    uint64_t seed = 0;
    int ratio = 0;
    double probe_accuracy = 0.0;
    double mean_kl_drift = 0.0;
    int64_t artifact_bytes = 0;
    double compile_seconds = 0.0; // volatile; serialized only on request
    std::string status = "ok";
};

struct EvalReport {
    std::vector<EvalRow> rows;
    uint64_t seed = 0;
    std::string config_hash_hex;

    std::string to_json(bool include_timing = false) const;
    std::string to_csv(bool include_timing = false) const; // tidy, one metric per row
};

// ---- sweeps ---------------------------------------------------------------------

struct SweepSpec {
    std::string axis; // ratio | n_agnostic | n_recon | loss | coupled
    std::vector<std::string> values;
    std::vector<uint64_t> seeds;
    int n_facts = 8;
    int ctx_len = 64;
    CompileConfig base;
    int drift_queries = 16;
    uint64_t drift_seed = 0xD81F7;

    void validate() const;
    static SweepSpec from_json(const std::string& text);
};

// one compile + evaluation per (value, seed) cell; failures are recorded
// in-row and the sweep continues
EvalReport run_sweep(const ModelWeights& w, const SweepSpec& spec, int jobs);

// ---- CLI commands ----------------------------------------------------------------

struct CommonOptions {
    bool timing = false;
};

int cmd_pretrain(const std::string& config_path, const std::string& out_path,
                 std::optional<uint64_t> seed, const CommonOptions& common);

struct CompileOverrides {
    std::optional<int> ratio;
    std::optional<std::string> loss;
    std::optional<bool> coupled;
    std::optional<uint64_t> seed;
};
int cmd_compile(const std::string& model_path, const std::string& context_path,
                const std::string& config_path, const std::string& out_path,
                const CompileOverrides& over, const CommonOptions& common);

int cmd_query(const std::string& model_path, const std::string& artifact_path,
              const std::vector<int>& query_tokens, const std::string& adapter_path, int max_new,
              const CommonOptions& common);

int cmd_eval(const std::string& model_path, const std::string& contexts_dir,
             const std::string& artifacts_dir, const std::string& out_dir, bool with_tlm,
             const CommonOptions& common);

int cmd_ablate(const std::string& model_path, const std::string& spec_path,
               const std::string& out_dir, int jobs, const CommonOptions& common);

// fast invariant suite; optional fault injection proves the checks can fail
int cmd_verify(const std::string& inject_fault);

// helper shared by eval/ablate/tests: generate the standard context/probe pair
// for a seed
SyntheticContext eval_context_for_seed(uint64_t seed, int n_facts, int ctx_len);

} // namespace lcc
