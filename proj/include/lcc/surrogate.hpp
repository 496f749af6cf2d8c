#pragma once

#include <span>
#include <string>
#include <vector>

#include "lcc/model.hpp"
#include "lcc/rng.hpp"
#include "lcc/tensor.hpp"

namespace lcc {

// Closed synthetic vocabulary. Contexts are key=value clauses with filler;
// queries are either fact lookups, the fixed repeat trigger, or small
// context-free instruction templates.
namespace vocab {
inline constexpr int kEos = 0;
inline constexpr int kSep = 1;
inline constexpr int kEq = 2;
inline constexpr int kAsk = 3;
inline constexpr int kRepeat0 = 4; // two-token repeat trigger
inline constexpr int kRepeat1 = 5;
inline constexpr int kGreet = 6;
inline constexpr int kGreetReply = 7;
inline constexpr int kCopy = 8;
inline constexpr int kFirst = 9;
inline constexpr int kLast = 10;
inline constexpr int kSwap = 11;
inline constexpr int kFillerBase = 16;
inline constexpr int kNumFiller = 16;
inline constexpr int kKeyBase = 32;
inline constexpr int kNumKeys = 16;
inline constexpr int kValueBase = 48;
inline constexpr int kNumValues = 48;
inline constexpr int kVocabSize = 96;

std::string token_name(int id);
std::string render(std::span<const int> tokens);
std::vector<int> trigger_tokens(); // {kRepeat0, kRepeat1}
bool is_key(int id);
bool is_value(int id);
bool is_filler(int id);
} // namespace vocab

struct Fact {
    int key_token = 0;
    int value_token = 0;
};

struct SyntheticContext {
    uint64_t seed = 0;
    std::vector<Fact> facts;
    std::vector<int> tokens;
};

// key=value clauses with filler between them, exactly ctx_len tokens
SyntheticContext gen_context(uint64_t seed, int n_facts, int ctx_len);

// context-free instruction queries from fixed templates; operands come from
// the filler alphabet so they never collide with keys or values
std::vector<std::vector<int>> gen_agnostic_pool(uint64_t seed, int n);

// the template's own ground-truth continuation (without EOS); used to build
// the pretraining corpus, never consumed by the compile loop
std::vector<int> agnostic_reference_answer(std::span<const int> query);

struct Probe {
    std::vector<int> query; // [ASK key]
    std::vector<int> gold;  // [value]
    std::string difficulty; // easy | medium | hard by distance from the query
};

struct ProbeSet {
    uint64_t seed = 0;
    std::vector<Probe> probes;
};

ProbeSet make_probe_set(const SyntheticContext& ctx);

enum class SampleKind { Reconstruction, Agnostic };

struct SurrogateSample {
    SampleKind kind = SampleKind::Reconstruction;
    std::vector<int> query_tokens;
    std::vector<int> target_tokens;
    std::vector<int> teacher_logit_positions; // rows of the teacher forward that predict targets
    Tensor teacher_logits;                    // [targets × vocab], plain data
};

struct SurrogateOptions {
    int agnostic_pool = 0; // 0: one distinct query per agnostic sample
    int max_decode_len = 32;
    bool agnostic_teacher_uses_context = true;
};

// n_recon presentations of the repeat-the-context sample plus n_agnostic
// teacher-labelled instruction samples, deterministically shuffled. Teacher
// logits are attached once per distinct sample and shared by duplicates.
std::vector<SurrogateSample> build_surrogate(const SyntheticContext& ctx,
                                             const ModelWeights& teacher, int n_recon,
                                             int n_agnostic, RngState& rng,
                                             const SurrogateOptions& opt = {});

// line-delimited token-id files with a one-line header
void save_context(const SyntheticContext& ctx, const std::string& path);
SyntheticContext load_context(const std::string& path);
void save_probes(const ProbeSet& probes, const std::string& path);
ProbeSet load_probes(const std::string& path);

} // namespace lcc
