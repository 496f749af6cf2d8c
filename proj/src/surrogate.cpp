#include "lcc/surrogate.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include "lcc/trainer.hpp"

namespace lcc {

namespace vocab {

std::string token_name(int id) {
    switch (id) {
        case kEos: return "<eos>";
        case kSep: return ";";
        case kEq: return "=";
        case kAsk: return "ask";
        case kRepeat0: return "repeat";
        case kRepeat1: return "ctx";
        case kGreet: return "greet";
        case kGreetReply: return "hello";
        case kCopy: return "copy";
        case kFirst: return "first";
        case kLast: return "last";
        case kSwap: return "swap";
        default: break;
    }
    if (is_filler(id)) return "f" + std::to_string(id - kFillerBase);
    if (is_key(id)) return "K" + std::to_string(id - kKeyBase);
    if (is_value(id)) return "V" + std::to_string(id - kValueBase);
    return "tok" + std::to_string(id);
}

std::string render(std::span<const int> tokens) {
    std::string s;
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (i) s += ' ';
        s += token_name(tokens[i]);
    }
    return s;
}

std::vector<int> trigger_tokens() { return {kRepeat0, kRepeat1}; }

bool is_key(int id) { return id >= kKeyBase && id < kKeyBase + kNumKeys; }
bool is_value(int id) { return id >= kValueBase && id < kValueBase + kNumValues; }
bool is_filler(int id) { return id >= kFillerBase && id < kFillerBase + kNumFiller; }

} // namespace vocab

SyntheticContext gen_context(uint64_t seed, int n_facts, int ctx_len) {
    if (n_facts < 1 || n_facts > vocab::kNumKeys)
        throw Error("gen_context: n_facts must be in [1, " + std::to_string(vocab::kNumKeys) + "]");
    const int fact_tokens = 3 * n_facts; // key value ;
    if (ctx_len < fact_tokens)
        throw Error("gen_context: budget " + std::to_string(ctx_len) + " too small for " +
                    std::to_string(n_facts) + " facts (need " + std::to_string(fact_tokens) + ")");

    RngState rng(seed);
    std::vector<int> keys(vocab::kNumKeys);
    std::iota(keys.begin(), keys.end(), vocab::kKeyBase);
    rng.shuffle(keys);
    keys.resize(static_cast<size_t>(n_facts));

    SyntheticContext ctx;
    ctx.seed = seed;
    for (int i = 0; i < n_facts; ++i) {
        Fact f;
        f.key_token = keys[static_cast<size_t>(i)];
        f.value_token = vocab::kValueBase + static_cast<int>(rng.next_below(vocab::kNumValues));
        ctx.facts.push_back(f);
    }

    // spread the filler budget over the n_facts+1 gaps between clauses
    const int filler_total = ctx_len - fact_tokens;
    std::vector<int> gap(static_cast<size_t>(n_facts) + 1, 0);
    for (int i = 0; i < filler_total; ++i)
        ++gap[static_cast<size_t>(rng.next_below(gap.size()))];

    auto emit_filler = [&](int n) {
        for (int i = 0; i < n; ++i)
            ctx.tokens.push_back(vocab::kFillerBase +
                                 static_cast<int>(rng.next_below(vocab::kNumFiller)));
    };
    for (int i = 0; i < n_facts; ++i) {
        emit_filler(gap[static_cast<size_t>(i)]);
        ctx.tokens.push_back(ctx.facts[static_cast<size_t>(i)].key_token);
        ctx.tokens.push_back(ctx.facts[static_cast<size_t>(i)].value_token);
        ctx.tokens.push_back(vocab::kSep);
    }
    emit_filler(gap[static_cast<size_t>(n_facts)]);
    return ctx;
}

std::vector<std::vector<int>> gen_agnostic_pool(uint64_t seed, int n) {
    if (n < 1) throw Error("gen_agnostic_pool: n must be >= 1");
    RngState rng(seed);
    auto filler = [&] {
        return vocab::kFillerBase + static_cast<int>(rng.next_below(vocab::kNumFiller));
    };
    std::vector<std::vector<int>> pool;
    pool.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        switch (rng.next_below(5)) {
            case 0: pool.push_back({vocab::kGreet}); break;
            case 1: pool.push_back({vocab::kCopy, filler(), filler()}); break;
            case 2: pool.push_back({vocab::kFirst, filler(), filler(), filler()}); break;
            case 3: pool.push_back({vocab::kLast, filler(), filler(), filler()}); break;
            default: pool.push_back({vocab::kSwap, filler(), filler()}); break;
        }
    }
    return pool;
}

std::vector<int> agnostic_reference_answer(std::span<const int> query) {
    if (query.empty()) throw Error("agnostic_reference_answer: empty query");
    switch (query[0]) {
        case vocab::kGreet: return {vocab::kGreetReply};
        case vocab::kCopy: return {query[1], query[2]};
        case vocab::kFirst: return {query[1]};
        case vocab::kLast: return {query[3]};
        case vocab::kSwap: return {query[2], query[1]};
        default: break;
    }
    throw Error("agnostic_reference_answer: unknown template head " + std::to_string(query[0]));
}

ProbeSet make_probe_set(const SyntheticContext& ctx) {
    ProbeSet set;
    set.seed = ctx.seed;
    const int n = static_cast<int>(ctx.facts.size());
    for (int i = 0; i < n; ++i) {
        Probe p;
        p.query = {vocab::kAsk, ctx.facts[static_cast<size_t>(i)].key_token};
        p.gold = {ctx.facts[static_cast<size_t>(i)].value_token};
        // later clauses sit closer to the query
        if (3 * i < n) p.difficulty = "hard";
        else if (3 * i < 2 * n) p.difficulty = "medium";
        else p.difficulty = "easy";
        set.probes.push_back(std::move(p));
    }
    return set;
}

std::vector<SurrogateSample> build_surrogate(const SyntheticContext& ctx,
                                             const ModelWeights& teacher, int n_recon,
                                             int n_agnostic, RngState& rng,
                                             const SurrogateOptions& opt) {
    if (!teacher.frozen) throw Error("build_surrogate: teacher must be frozen");
    if (n_recon < 0 || n_agnostic < 0 || n_recon + n_agnostic < 1)
        throw Error("build_surrogate: need at least one sample");

    std::vector<SurrogateSample> unique;

    if (n_recon > 0) {
        SurrogateSample recon;
        recon.kind = SampleKind::Reconstruction;
        recon.query_tokens = vocab::trigger_tokens();
        recon.target_tokens = ctx.tokens;
        recon.teacher_logits =
            teacher_logits(teacher, ctx.tokens, recon.query_tokens, recon.target_tokens).detached();
        const int base = static_cast<int>(ctx.tokens.size() + recon.query_tokens.size()) - 1;
        for (size_t i = 0; i < recon.target_tokens.size(); ++i)
            recon.teacher_logit_positions.push_back(base + static_cast<int>(i));
        unique.push_back(std::move(recon));
    }

    const int pool_size = opt.agnostic_pool > 0 ? opt.agnostic_pool : n_agnostic;
    std::vector<std::vector<int>> pool;
    if (n_agnostic > 0) {
        pool = gen_agnostic_pool(rng.next_u64(), pool_size);
        const std::vector<int> empty_ctx;
        for (const auto& query : pool) {
            const std::vector<int>& teacher_ctx =
                opt.agnostic_teacher_uses_context ? ctx.tokens : empty_ctx;
            std::vector<int> prompt = teacher_ctx;
            prompt.insert(prompt.end(), query.begin(), query.end());
            SequenceInput seq = make_plain_sequence(prompt, 0, Segment::Context);
            std::vector<int> target =
                decode_greedy(teacher, seq, KvCache{}, opt.max_decode_len, vocab::kEos);
            SurrogateSample s;
            s.kind = SampleKind::Agnostic;
            s.query_tokens = query;
            s.target_tokens = std::move(target);
            s.teacher_logits =
                teacher_logits(teacher, teacher_ctx, s.query_tokens, s.target_tokens).detached();
            const int base = static_cast<int>(teacher_ctx.size() + query.size()) - 1;
            for (size_t i = 0; i < s.target_tokens.size(); ++i)
                s.teacher_logit_positions.push_back(base + static_cast<int>(i));
            unique.push_back(std::move(s));
        }
    }

    // duplicates share teacher-logit storage
    std::vector<SurrogateSample> out;
    out.reserve(static_cast<size_t>(n_recon + n_agnostic));
    for (int i = 0; i < n_recon; ++i) out.push_back(unique[0]);
    const size_t agnostic_base = n_recon > 0 ? 1 : 0;
    for (int i = 0; i < n_agnostic; ++i)
        out.push_back(unique[agnostic_base + static_cast<size_t>(i % pool_size)]);
    rng.shuffle(out);
    return out;
}

// ---- file io -------------------------------------------------------------------

void save_context(const SyntheticContext& ctx, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write context file: " + path);
    out << "# lcc-context seed=" << ctx.seed << " n_facts=" << ctx.facts.size()
        << " ctx_len=" << ctx.tokens.size() << "\n";
    for (int t : ctx.tokens) out << t << "\n";
    if (!out) throw Error("failed writing context file: " + path);
}

SyntheticContext load_context(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingInputError("cannot open context file: " + path);
    std::string header;
    std::getline(in, header);
    SyntheticContext ctx;
    if (header.rfind("# lcc-context", 0) != 0)
        throw FormatError("context file: missing header line: " + path);
    const auto seed_pos = header.find("seed=");
    if (seed_pos != std::string::npos)
        ctx.seed = std::stoull(header.substr(seed_pos + 5));
    int tok = 0;
    while (in >> tok) ctx.tokens.push_back(tok);
    // recover the fact table from the clause structure
    for (size_t i = 0; i + 2 < ctx.tokens.size(); ++i) {
        if (vocab::is_key(ctx.tokens[i]) && vocab::is_value(ctx.tokens[i + 1]) &&
            ctx.tokens[i + 2] == vocab::kSep)
            ctx.facts.push_back({ctx.tokens[i], ctx.tokens[i + 1]});
    }
    return ctx;
}

void save_probes(const ProbeSet& probes, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write probe file: " + path);
    out << "# lcc-probes seed=" << probes.seed << " n=" << probes.probes.size() << "\n";
    for (const Probe& p : probes.probes) {
        for (size_t i = 0; i < p.query.size(); ++i) out << (i ? " " : "") << p.query[i];
        out << " | ";
        for (size_t i = 0; i < p.gold.size(); ++i) out << (i ? " " : "") << p.gold[i];
        out << " | " << p.difficulty << "\n";
    }
    if (!out) throw Error("failed writing probe file: " + path);
}

ProbeSet load_probes(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingInputError("cannot open probe file: " + path);
    std::string line;
    std::getline(in, line);
    ProbeSet set;
    if (line.rfind("# lcc-probes", 0) != 0)
        throw FormatError("probe file: missing header line: " + path);
    const auto seed_pos = line.find("seed=");
    if (seed_pos != std::string::npos) set.seed = std::stoull(line.substr(seed_pos + 5));
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        Probe p;
        std::string field;
        int part = 0;
        while (ls >> field) {
            if (field == "|") {
                ++part;
                continue;
            }
            if (part == 0) p.query.push_back(std::stoi(field));
            else if (part == 1) p.gold.push_back(std::stoi(field));
            else p.difficulty = field;
        }
        if (p.query.empty() || p.gold.empty())
            throw FormatError("probe file: malformed line: " + line);
        set.probes.push_back(std::move(p));
    }
    return set;
}

} // namespace lcc
