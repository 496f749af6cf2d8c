#include "lcc/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "lcc/gradcheck.hpp"
#include "lcc/serial.hpp"

namespace lcc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_text_file(const std::string& path, const std::string& text) {
    write_file_bytes(path, std::span<const uint8_t>(
                               reinterpret_cast<const uint8_t*>(text.data()), text.size()));
}

std::string read_text_file(const std::string& path) {
    auto bytes = read_file_bytes(path);
    return std::string(bytes.begin(), bytes.end());
}

} // namespace

// ---- pretrain config ---------------------------------------------------------

void PretrainConfig::validate() const {
    model.validate();
    if (model.vocab_size < vocab::kVocabSize)
        throw Error("pretrain config: vocab_size must cover the synthetic grammar (" +
                    std::to_string(vocab::kVocabSize) + ")");
    if (batch_size < 1 || max_steps < 1 || eval_every < 1)
        throw Error("pretrain config: batch_size, max_steps and eval_every must be >= 1");
    if (n_facts < 1 || n_facts > vocab::kNumKeys)
        throw Error("pretrain config: n_facts out of range");
    if (ctx_len < 3 * n_facts) throw Error("pretrain config: ctx_len too small for n_facts");
    if (2 * ctx_len + 4 > model.max_position)
        throw Error("pretrain config: repeat samples overflow max_position");
    if (mix_recall < 0 || mix_repeat < 0 || mix_recall + mix_repeat > 1.0)
        throw Error("pretrain config: bad mixture weights");
    if (recall_target < 0 || recall_target > 1) throw Error("pretrain config: bad recall target");
}

namespace {
json pretrain_to_json_obj(const PretrainConfig& c) {
    json m;
    m["vocab_size"] = c.model.vocab_size;
    m["d_model"] = c.model.d_model;
    m["n_layers"] = c.model.n_layers;
    m["n_heads"] = c.model.n_heads;
    m["head_dim"] = c.model.head_dim;
    m["d_ff"] = c.model.d_ff;
    m["max_position"] = c.model.max_position;
    m["rope_base"] = c.model.rope_base;
    m["rope_dims"] = c.model.rope_dims;
    json j;
    j["model"] = m;
    j["learning_rate"] = c.learning_rate;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["batch_size"] = c.batch_size;
    j["max_steps"] = c.max_steps;
    j["min_steps"] = c.min_steps;
    j["eval_every"] = c.eval_every;
    j["recall_target"] = c.recall_target;
    j["eval_contexts"] = c.eval_contexts;
    j["n_facts"] = c.n_facts;
    j["ctx_len"] = c.ctx_len;
    j["grad_clip"] = c.grad_clip;
    j["mix_recall"] = c.mix_recall;
    j["mix_repeat"] = c.mix_repeat;
    j["seed"] = c.seed;
    return j;
}
} // namespace

std::string PretrainConfig::to_json() const { return pretrain_to_json_obj(*this).dump(2) + "\n"; }

PretrainConfig PretrainConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    PretrainConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "model") {
            for (const auto& [mk, mv] : value.items()) {
                if (mk == "vocab_size") c.model.vocab_size = mv.get<int>();
                else if (mk == "d_model") c.model.d_model = mv.get<int>();
                else if (mk == "n_layers") c.model.n_layers = mv.get<int>();
                else if (mk == "n_heads") c.model.n_heads = mv.get<int>();
                else if (mk == "head_dim") c.model.head_dim = mv.get<int>();
                else if (mk == "d_ff") c.model.d_ff = mv.get<int>();
                else if (mk == "max_position") c.model.max_position = mv.get<int>();
                else if (mk == "rope_base") c.model.rope_base = mv.get<double>();
                else if (mk == "rope_dims") c.model.rope_dims = mv.get<int>();
                else throw Error("pretrain config: unknown model key \"" + mk + "\"");
            }
        } else if (key == "learning_rate") c.learning_rate = value.get<double>();
        else if (key == "beta1") c.beta1 = value.get<double>();
        else if (key == "beta2") c.beta2 = value.get<double>();
        else if (key == "batch_size") c.batch_size = value.get<int>();
        else if (key == "max_steps") c.max_steps = value.get<int>();
        else if (key == "min_steps") c.min_steps = value.get<int>();
        else if (key == "eval_every") c.eval_every = value.get<int>();
        else if (key == "recall_target") c.recall_target = value.get<double>();
        else if (key == "eval_contexts") c.eval_contexts = value.get<int>();
        else if (key == "n_facts") c.n_facts = value.get<int>();
        else if (key == "ctx_len") c.ctx_len = value.get<int>();
        else if (key == "grad_clip") c.grad_clip = value.get<double>();
        else if (key == "mix_recall") c.mix_recall = value.get<double>();
        else if (key == "mix_repeat") c.mix_repeat = value.get<double>();
        else if (key == "seed") c.seed = value.get<uint64_t>();
        else throw Error("pretrain config: unknown key \"" + key + "\"");
    }
    c.validate();
    return c;
}

std::string PretrainConfig::canonical_json() const { return pretrain_to_json_obj(*this).dump(); }
Hash256 PretrainConfig::config_hash() const { return sha256(canonical_json()); }

std::string PretrainReport::to_json(bool include_timing) const {
    json j;
    j["steps"] = steps;
    j["final_loss"] = final_loss;
    j["full_context_recall"] = full_context_recall;
    j["no_context_recall"] = no_context_recall;
    j["chance_level"] = chance_level;
    j["reached_target"] = reached_target;
    j["config_hash"] = config_hash_hex;
    j["seed"] = seed;
    if (include_timing) j["wall_seconds"] = wall_seconds;
    return j.dump(2) + "\n";
}

// ---- pretraining ----------------------------------------------------------------

namespace {

// Token stream plus the positions whose next-token predictions carry loss.
struct PretrainSample {
    std::vector<int> tokens;
    std::vector<int> loss_rows; // row i supervises predicting tokens[i+1]
    std::vector<int> loss_ids;

    void supervise_from(size_t first) {
        for (size_t i = first; i < tokens.size(); ++i) {
            loss_rows.push_back(static_cast<int>(i) - 1);
            loss_ids.push_back(tokens[i]);
        }
    }
};

PretrainSample make_pretrain_sample(RngState& rng, const PretrainConfig& cfg) {
    const double pick = rng.next_double();
    PretrainSample s;
    auto random_context = [&](int max_facts) {
        // short samples dominate to keep steps cheap; the long tail still
        // covers the full probe lag range
        const int cap = rng.next_double() < 0.6 ? std::min(24, cfg.ctx_len) : cfg.ctx_len;
        const int nf = 1 + static_cast<int>(rng.next_below(
                               static_cast<uint64_t>(std::min(max_facts, cap / 3))));
        const int min_len = 3 * nf;
        const int len =
            min_len + static_cast<int>(rng.next_below(static_cast<uint64_t>(cap - min_len + 1)));
        return gen_context(rng.next_u64(), nf, len);
    };
    if (pick < cfg.mix_recall) {
        // every fact gets queried, in shuffled order; recency is never a shortcut
        SyntheticContext ctx = random_context(cfg.n_facts);
        s.tokens = ctx.tokens;
        std::vector<size_t> order(ctx.facts.size());
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        for (size_t fi : order) {
            s.tokens.push_back(vocab::kAsk);
            s.tokens.push_back(ctx.facts[fi].key_token);
            s.loss_rows.push_back(static_cast<int>(s.tokens.size()) - 1);
            s.loss_ids.push_back(ctx.facts[fi].value_token);
            s.tokens.push_back(ctx.facts[fi].value_token);
        }
        s.loss_rows.push_back(static_cast<int>(s.tokens.size()) - 1);
        s.loss_ids.push_back(vocab::kEos);
        s.tokens.push_back(vocab::kEos);
    } else if (pick < cfg.mix_recall + cfg.mix_repeat) {
        SyntheticContext ctx = random_context(cfg.n_facts);
        s.tokens = ctx.tokens;
        for (int t : vocab::trigger_tokens()) s.tokens.push_back(t);
        const size_t first = s.tokens.size();
        s.tokens.insert(s.tokens.end(), ctx.tokens.begin(), ctx.tokens.end());
        s.tokens.push_back(vocab::kEos);
        s.supervise_from(first);
    } else {
        const auto query = gen_agnostic_pool(rng.next_u64(), 1)[0];
        if (rng.next_double() < 0.5) {
            SyntheticContext ctx = random_context(cfg.n_facts);
            s.tokens = ctx.tokens;
        }
        s.tokens.insert(s.tokens.end(), query.begin(), query.end());
        const size_t first = s.tokens.size();
        const auto answer = agnostic_reference_answer(query);
        s.tokens.insert(s.tokens.end(), answer.begin(), answer.end());
        s.tokens.push_back(vocab::kEos);
        s.supervise_from(first);
    }
    return s;
}

bool probe_match(const std::vector<int>& decoded, const std::vector<int>& gold) {
    if (decoded.size() < gold.size()) return false;
    return std::equal(gold.begin(), gold.end(), decoded.begin());
}

std::vector<int> decode_plain(const ModelWeights& w, const std::vector<int>& prompt_tokens,
                              int max_new) {
    SequenceInput seq = make_plain_sequence(prompt_tokens, 0, Segment::Context);
    return decode_greedy(w, seq, KvCache{}, max_new, vocab::kEos);
}

struct RecallEval {
    double full_context = 0.0;
    double no_context = 0.0;
};

RecallEval eval_recall(const ModelWeights& w, const PretrainConfig& cfg) {
    RngState eval_rng = RngState(cfg.seed).derive(0x6576616C); // "eval"
    int total = 0, full_hit = 0, none_hit = 0;
    for (int i = 0; i < cfg.eval_contexts; ++i) {
        SyntheticContext ctx = gen_context(eval_rng.next_u64(), cfg.n_facts, cfg.ctx_len);
        ProbeSet probes = make_probe_set(ctx);
        for (const Probe& p : probes.probes) {
            std::vector<int> with_ctx = ctx.tokens;
            with_ctx.insert(with_ctx.end(), p.query.begin(), p.query.end());
            const int max_new = static_cast<int>(p.gold.size()) + 1;
            if (probe_match(decode_plain(w, with_ctx, max_new), p.gold)) ++full_hit;
            if (probe_match(decode_plain(w, p.query, max_new), p.gold)) ++none_hit;
            ++total;
        }
    }
    RecallEval r;
    r.full_context = total ? static_cast<double>(full_hit) / total : 0.0;
    r.no_context = total ? static_cast<double>(none_hit) / total : 0.0;
    return r;
}

} // namespace

ModelWeights run_pretrain(const PretrainConfig& cfg, PretrainReport& report) {
    const auto t0 = std::chrono::steady_clock::now();
    cfg.validate();
    report = PretrainReport{};
    report.config_hash_hex = hex(cfg.config_hash());
    report.seed = cfg.seed;
    report.chance_level = 1.0 / vocab::kNumValues;

    RngState init_rng = RngState(cfg.seed).derive(0x696E6974); // "init"
    ModelWeights w = ModelWeights::random_init(cfg.model, init_rng);
    w.set_trainable(true);

    AdamW opt;
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    for (Tensor* p : w.parameters()) opt.add(p);

    RngState data_rng = RngState(cfg.seed).derive(0x64617461); // "data"
    double last_loss = 0.0;
    int step = 0;
    while (step < cfg.max_steps) {
        double batch_loss = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            PretrainSample s = make_pretrain_sample(data_rng, cfg);
            SequenceInput seq = make_plain_sequence(s.tokens, 0, Segment::Context);
            ForwardResult res = forward(w, seq, build_causal_mask(static_cast<int>(s.tokens.size())),
                                        nullptr, nullptr, nullptr, false);
            Tensor rows = gather_rows(res.logits, s.loss_rows);
            Tensor loss = cross_entropy(rows, s.loss_ids);
            const double v = loss.item();
            if (!std::isfinite(v)) throw TrainingError("pretrain: non-finite loss");
            batch_loss += v / cfg.batch_size;
            scale(loss, 1.0 / cfg.batch_size).backward();
        }
        last_loss = batch_loss;
        if (cfg.grad_clip > 0) {
            double norm_sq = 0.0;
            for (const AdamW::Slot& sl : opt.slots)
                for (double g : sl.param->grad()) norm_sq += g * g;
            const double norm = std::sqrt(norm_sq);
            if (norm > cfg.grad_clip) {
                const double sc = cfg.grad_clip / norm;
                for (AdamW::Slot& sl : opt.slots)
                    for (double& g : sl.param->grad()) g *= sc;
            }
        }
        opt.step(cfg.learning_rate);
        opt.zero_grad();
        ++step;

        if (step % cfg.eval_every == 0 && step >= cfg.min_steps) {
            RecallEval r = eval_recall(w, cfg);
            std::cerr << "pretrain step " << step << " loss " << batch_loss << " recall "
                      << r.full_context << "\n";
            if (r.full_context >= cfg.recall_target) break;
        }
    }

    const RecallEval final_eval = eval_recall(w, cfg);
    report.steps = step;
    report.final_loss = last_loss;
    report.full_context_recall = final_eval.full_context;
    report.no_context_recall = final_eval.no_context;
    report.reached_target = final_eval.full_context >= cfg.recall_target;
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!report.reached_target)
        throw BudgetError("pretrain: held-out recall " + std::to_string(final_eval.full_context) +
                          " below target " + std::to_string(cfg.recall_target) + " after " +
                          std::to_string(step) + " steps");
    w.freeze();
    return w;
}

// ---- evaluation -----------------------------------------------------------------

double probe_accuracy_full_context(const ModelWeights& w, const SyntheticContext& ctx,
                                   const ProbeSet& probes) {
    if (probes.probes.empty()) return 0.0;
    int hit = 0;
    for (const Probe& p : probes.probes) {
        std::vector<int> prompt = ctx.tokens;
        prompt.insert(prompt.end(), p.query.begin(), p.query.end());
        if (probe_match(decode_plain(w, prompt, static_cast<int>(p.gold.size()) + 1), p.gold)) ++hit;
    }
    return static_cast<double>(hit) / probes.probes.size();
}

double probe_accuracy_no_context(const ModelWeights& w, const ProbeSet& probes) {
    if (probes.probes.empty()) return 0.0;
    int hit = 0;
    for (const Probe& p : probes.probes)
        if (probe_match(decode_plain(w, p.query, static_cast<int>(p.gold.size()) + 1), p.gold))
            ++hit;
    return static_cast<double>(hit) / probes.probes.size();
}

double probe_accuracy_buffer(const ModelWeights& w, const BufferArtifact& artifact,
                             const ProbeSet& probes, const LoraAdapter* adapter) {
    if (probes.probes.empty()) return 0.0;
    const KvCache cache = attach(w, artifact);
    int hit = 0;
    for (const Probe& p : probes.probes) {
        SequenceInput seq =
            make_plain_sequence(p.query, artifact.first_free_position, Segment::Query);
        auto decoded = decode_greedy(w, seq, cache, static_cast<int>(p.gold.size()) + 1,
                                     vocab::kEos, nullptr, adapter);
        if (probe_match(decoded, p.gold)) ++hit;
    }
    return static_cast<double>(hit) / probes.probes.size();
}

double mean_agnostic_drift(const ModelWeights& w, const SyntheticContext& ctx,
                           const BufferArtifact* artifact, uint64_t query_seed, int n_queries,
                           int max_decode_len, const LoraAdapter* adapter) {
    const auto pool = gen_agnostic_pool(query_seed, n_queries);
    KvCache cache;
    if (artifact) cache = attach(w, *artifact);
    double total = 0.0;
    for (const auto& query : pool) {
        std::vector<int> prompt = ctx.tokens;
        prompt.insert(prompt.end(), query.begin(), query.end());
        const std::vector<int> answer = decode_plain(w, prompt, max_decode_len);
        const Tensor teacher = teacher_logits(w, ctx.tokens, query, answer);

        std::vector<int> qa = query;
        qa.insert(qa.end(), answer.begin(), answer.end());
        SequenceInput seq;
        const int start = artifact ? artifact->first_free_position : 0;
        for (size_t i = 0; i < qa.size(); ++i) {
            seq.tokens.push_back(qa[i]);
            seq.segments.push_back(i < query.size() ? Segment::Query : Segment::Response);
            seq.positions.push_back(start + static_cast<int>(i));
        }
        const int total_len = (artifact ? cache.length() : 0) + static_cast<int>(qa.size());
        ForwardResult res = forward(w, seq, build_causal_mask(total_len), adapter, nullptr,
                                    artifact ? &cache : nullptr, false);
        const int q = static_cast<int>(query.size());
        const int r = static_cast<int>(answer.size());
        Tensor student = slice_rows(res.logits, q - 1, q + r - 1);
        total += kl_divergence(softmax_rows(teacher), student).item();
    }
    return pool.empty() ? 0.0 : total / static_cast<double>(pool.size());
}

double probe_accuracy_tlm(const ModelWeights& w, const SyntheticContext& ctx,
                          const ProbeSet& probes, const TlmOptions& opt) {
    RngState rng = RngState(opt.seed).derive(0x746C6D); // "tlm"
    LoraAdapter adapter = LoraAdapter::init(w.config, opt.rank, opt.alpha, rng);
    adapter.active_segments = SegmentSet::all();
    adapter.set_trainable(true);
    AdamW optim;
    for (Tensor* t : adapter.trainable_tensors()) optim.add(t);

    // brief LM tuning on the raw context; the adapter weights become the memory
    const int c = static_cast<int>(ctx.tokens.size());
    SequenceInput seq = make_plain_sequence(ctx.tokens, 0, Segment::Context);
    const SegmentMask mask = build_causal_mask(c);
    const std::vector<int> next(ctx.tokens.begin() + 1, ctx.tokens.end());
    for (int step = 0; step < opt.steps; ++step) {
        ForwardResult res = forward(w, seq, mask, &adapter, nullptr, nullptr, false);
        Tensor loss = cross_entropy(slice_rows(res.logits, 0, c - 1), next);
        if (!std::isfinite(loss.item())) throw TrainingError("tlm tuning: non-finite loss");
        loss.backward();
        optim.step(opt.learning_rate);
        optim.zero_grad();
    }
    adapter.set_trainable(false);

    if (probes.probes.empty()) return 0.0;
    int hit = 0;
    for (const Probe& p : probes.probes) {
        SequenceInput prompt = make_plain_sequence(p.query, 0, Segment::Query);
        auto decoded = decode_greedy(w, prompt, KvCache{}, static_cast<int>(p.gold.size()) + 1,
                                     vocab::kEos, nullptr, &adapter);
        if (probe_match(decoded, p.gold)) ++hit;
    }
    return static_cast<double>(hit) / probes.probes.size();
}

// ---- eval report ----------------------------------------------------------------

namespace {
json row_to_json(const EvalRow& r, bool include_timing) {
    json j;
    j["condition"] = r.condition;
    if (!r.axis.empty()) {
        j["axis"] = r.axis;
        j["axis_value"] = r.axis_value;
    }
    j["context_seed"] = r.context_seed;
    j["seed"] = r.seed;
    j["ratio"] = r.ratio;
    j["probe_accuracy"] = r.probe_accuracy;
    j["mean_kl_drift"] = r.mean_kl_drift;
    j["artifact_bytes"] = r.artifact_bytes;
    if (include_timing) j["compile_seconds"] = r.compile_seconds;
    j["status"] = r.status;
    return j;
}
} // namespace

std::string EvalReport::to_json(bool include_timing) const {
    json j;
    j["config_hash"] = config_hash_hex;
    j["seed"] = seed;
    json rows_json = json::array();
    for (const EvalRow& r : rows) rows_json.push_back(row_to_json(r, include_timing));
    j["rows"] = rows_json;
    return j.dump(2) + "\n";
}

std::string EvalReport::to_csv(bool include_timing) const {
    std::string s = "condition,axis,axis_value,context_seed,seed,ratio,metric,value,status\n";
    for (const EvalRow& r : rows) {
        auto emit = [&](const std::string& metric, const std::string& value) {
            s += r.condition + "," + r.axis + "," + r.axis_value + "," +
                 std::to_string(r.context_seed) + "," + std::to_string(r.seed) + "," +
                 std::to_string(r.ratio) + "," + metric + "," + value + "," + r.status + "\n";
        };
        emit("probe_accuracy", fmt_double(r.probe_accuracy));
        emit("mean_kl_drift", fmt_double(r.mean_kl_drift));
        emit("artifact_bytes", std::to_string(r.artifact_bytes));
        if (include_timing) emit("compile_seconds", fmt_double(r.compile_seconds));
    }
    return s;
}

// ---- sweeps ---------------------------------------------------------------------

void SweepSpec::validate() const {
    static const std::vector<std::string> axes = {"ratio", "n_agnostic", "n_recon", "loss",
                                                  "coupled"};
    if (std::find(axes.begin(), axes.end(), axis) == axes.end())
        throw Error("sweep spec: unknown axis \"" + axis + "\"");
    if (values.empty()) throw Error("sweep spec: values must be nonempty");
    if (seeds.empty()) throw Error("sweep spec: seeds must be nonempty");
    base.validate();
}

SweepSpec SweepSpec::from_json(const std::string& text) {
    json j = json::parse(text);
    SweepSpec s;
    for (const auto& [key, value] : j.items()) {
        if (key == "axis") s.axis = value.get<std::string>();
        else if (key == "values") {
            for (const auto& v : value)
                s.values.push_back(v.is_string() ? v.get<std::string>() : v.dump());
        } else if (key == "seeds") {
            for (const auto& v : value) s.seeds.push_back(v.get<uint64_t>());
        } else if (key == "n_facts") s.n_facts = value.get<int>();
        else if (key == "ctx_len") s.ctx_len = value.get<int>();
        else if (key == "base") s.base = CompileConfig::from_json(value.dump());
        else if (key == "drift_queries") s.drift_queries = value.get<int>();
        else if (key == "drift_seed") s.drift_seed = value.get<uint64_t>();
        else throw Error("sweep spec: unknown key \"" + key + "\"");
    }
    s.validate();
    return s;
}

SyntheticContext eval_context_for_seed(uint64_t seed, int n_facts, int ctx_len) {
    return gen_context(seed, n_facts, ctx_len);
}

namespace {
CompileConfig apply_axis(const CompileConfig& base, const std::string& axis,
                         const std::string& value) {
    CompileConfig c = base;
    if (axis == "ratio") c.ratio = std::stoi(value);
    else if (axis == "n_agnostic") c.n_agnostic = std::stoi(value);
    else if (axis == "n_recon") c.n_recon = std::stoi(value);
    else if (axis == "loss") c.loss_kind = loss_kind_from_string(value);
    else if (axis == "coupled") c.coupled = value == "true" || value == "1";
    return c;
}
} // namespace

EvalReport run_sweep(const ModelWeights& w, const SweepSpec& spec, int jobs) {
    spec.validate();
    const size_t n_cells = spec.values.size() * spec.seeds.size();
    std::vector<EvalRow> rows(n_cells);

    auto run_cell = [&](size_t cell) {
        const std::string& value = spec.values[cell / spec.seeds.size()];
        const uint64_t seed = spec.seeds[cell % spec.seeds.size()];
        EvalRow& row = rows[cell];
        row.axis = spec.axis;
        row.axis_value = value;
        row.seed = seed;
        row.context_seed = seed;
        try {
            CompileConfig config = apply_axis(spec.base, spec.axis, value);
            config.seed = seed;
            row.condition = config.coupled ? "coupled" : "buffer";
            row.ratio = config.ratio;
            const SyntheticContext ctx = eval_context_for_seed(seed, spec.n_facts, spec.ctx_len);
            CompileResult result = compile(w, ctx, config);
            const ProbeSet probes = make_probe_set(ctx);
            const LoraAdapter* adapter =
                result.coupled_adapter ? &*result.coupled_adapter : nullptr;
            row.probe_accuracy = probe_accuracy_buffer(w, result.artifact, probes, adapter);
            row.mean_kl_drift =
                mean_agnostic_drift(w, ctx, &result.artifact, spec.drift_seed, spec.drift_queries,
                                    config.max_decode_len, adapter);
            row.artifact_bytes = static_cast<int64_t>(serialize_artifact(result.artifact).size());
            row.compile_seconds = result.report.wall_seconds;
        } catch (const std::exception& e) {
            row.status = std::string("error: ") + e.what();
        }
    };

    const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(n_cells)));
    if (workers == 1) {
        for (size_t i = 0; i < n_cells; ++i) run_cell(i);
    } else {
        std::atomic<size_t> next{0};
        std::vector<std::thread> pool;
        for (int t = 0; t < workers; ++t)
            pool.emplace_back([&] {
                while (true) {
                    const size_t i = next.fetch_add(1);
                    if (i >= n_cells) return;
                    run_cell(i);
                }
            });
        for (auto& t : pool) t.join();
    }

    EvalReport report;
    report.rows = std::move(rows);
    report.config_hash_hex = hex(spec.base.config_hash());
    return report;
}

// ---- CLI commands ----------------------------------------------------------------

namespace {
int map_exception(const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (dynamic_cast<const TrainingError*>(&e)) return kExitDivergence;
    if (dynamic_cast<const BudgetError*>(&e)) return kExitPretrainBudget;
    if (dynamic_cast<const FingerprintError*>(&e)) return kExitFingerprint;
    if (dynamic_cast<const MissingInputError*>(&e)) return kExitMissingInput;
    return kExitFailure;
}

std::string sibling_path(const std::string& path, const std::string& new_ext) {
    return fs::path(path).replace_extension(new_ext).string();
}
} // namespace

int cmd_pretrain(const std::string& config_path, const std::string& out_path,
                 std::optional<uint64_t> seed, const CommonOptions& common) {
    try {
        PretrainConfig cfg;
        if (!config_path.empty()) cfg = PretrainConfig::from_json(read_text_file(config_path));
        if (seed) cfg.seed = *seed;
        PretrainReport report;
        ModelWeights w;
        try {
            w = run_pretrain(cfg, report);
        } catch (const BudgetError&) {
            // leave the diagnostics on disk before reporting exit 3
            write_text_file(sibling_path(out_path, ".report.json"), report.to_json(common.timing));
            throw;
        }
        save_checkpoint(w, out_path);
        write_text_file(sibling_path(out_path, ".report.json"), report.to_json(common.timing));
        std::cout << "checkpoint " << out_path << " fingerprint " << hex(w.fingerprint) << "\n"
                  << "full_context_recall " << report.full_context_recall << "\n"
                  << "no_context_recall " << report.no_context_recall << "\n";
        return kExitOk;
    } catch (const std::exception& e) {
        return map_exception(e);
    }
}

int cmd_compile(const std::string& model_path, const std::string& context_path,
                const std::string& config_path, const std::string& out_path,
                const CompileOverrides& over, const CommonOptions& common) {
    try {
        ModelWeights w = load_checkpoint(model_path);
        SyntheticContext ctx = load_context(context_path);
        CompileConfig config;
        if (!config_path.empty()) config = CompileConfig::from_json(read_text_file(config_path));
        if (over.ratio) config.ratio = *over.ratio;
        if (over.loss) config.loss_kind = loss_kind_from_string(*over.loss);
        if (over.coupled) config.coupled = *over.coupled;
        if (over.seed) config.seed = *over.seed;
        config.validate();

        CompileResult result = compile(w, ctx, config);
        save_artifact(result.artifact, out_path);
        write_text_file(sibling_path(out_path, ".report.json"),
                        result.report.to_json(common.timing));
        write_text_file(sibling_path(out_path, ".report.csv"), result.report.to_csv());
        if (result.coupled_adapter)
            save_adapter(*result.coupled_adapter, w.config.d_model,
                         sibling_path(out_path, ".lcca"));
        std::cout << "artifact " << out_path << " ("
                  << serialize_artifact(result.artifact).size()
                  << " bytes, k=" << result.artifact.k_tokens << ")\n";
        return kExitOk;
    } catch (const std::exception& e) {
        return map_exception(e);
    }
}

int cmd_query(const std::string& model_path, const std::string& artifact_path,
              const std::vector<int>& query_tokens, const std::string& adapter_path, int max_new,
              const CommonOptions&) {
    try {
        if (query_tokens.empty()) throw MissingInputError("query: no tokens given");
        ModelWeights w = load_checkpoint(model_path);
        BufferArtifact artifact = load_artifact(artifact_path);
        std::optional<LoraAdapter> adapter;
        if (!adapter_path.empty()) adapter = load_adapter(adapter_path);
        KvCache cache = attach(w, artifact);
        SequenceInput prompt =
            make_plain_sequence(query_tokens, artifact.first_free_position, Segment::Query);
        auto decoded = decode_greedy(w, prompt, std::move(cache), max_new, vocab::kEos, nullptr,
                                     adapter ? &*adapter : nullptr);
        std::cout << "tokens:";
        for (int t : decoded) std::cout << " " << t;
        std::cout << "\ntext: " << vocab::render(decoded) << "\n";
        return kExitOk;
    } catch (const std::exception& e) {
        return map_exception(e);
    }
}

int cmd_eval(const std::string& model_path, const std::string& contexts_dir,
             const std::string& artifacts_dir, const std::string& out_dir, bool with_tlm,
             const CommonOptions& common) {
    try {
        ModelWeights w = load_checkpoint(model_path);

        std::vector<std::string> names;
        if (!fs::is_directory(contexts_dir))
            throw MissingInputError("eval: contexts dir not found: " + contexts_dir);
        for (const auto& entry : fs::directory_iterator(contexts_dir))
            if (entry.path().extension() == ".ctx") names.push_back(entry.path().stem().string());
        std::sort(names.begin(), names.end());
        if (names.empty()) throw MissingInputError("eval: no .ctx files in " + contexts_dir);

        std::vector<std::string> gaps;
        for (const auto& name : names)
            if (!fs::exists(fs::path(artifacts_dir) / (name + ".lcc")))
                gaps.push_back(name + ".lcc");
        if (!gaps.empty()) {
            std::string list;
            for (const auto& g : gaps) list += " " + g;
            throw MissingInputError("eval: missing artifacts:" + list);
        }

        constexpr int kDriftQueries = 16;
        constexpr uint64_t kDriftSeed = 0xD81F7;
        EvalReport report;
        for (const auto& name : names) {
            const SyntheticContext ctx =
                load_context((fs::path(contexts_dir) / (name + ".ctx")).string());
            const ProbeSet probes =
                load_probes((fs::path(contexts_dir) / (name + ".probes")).string());
            const BufferArtifact artifact =
                load_artifact((fs::path(artifacts_dir) / (name + ".lcc")).string());
            const std::string sidecar = (fs::path(artifacts_dir) / (name + ".lcca")).string();
            std::optional<LoraAdapter> adapter;
            if (fs::exists(sidecar)) adapter = load_adapter(sidecar);

            EvalRow full;
            full.condition = "full_context";
            full.context_seed = ctx.seed;
            full.probe_accuracy = probe_accuracy_full_context(w, ctx, probes);
            report.rows.push_back(full);

            EvalRow none;
            none.condition = "no_context";
            none.context_seed = ctx.seed;
            none.probe_accuracy = probe_accuracy_no_context(w, probes);
            none.mean_kl_drift = mean_agnostic_drift(w, ctx, nullptr, kDriftSeed, kDriftQueries, 32);
            report.rows.push_back(none);

            EvalRow buf;
            buf.condition = adapter ? "coupled" : "buffer";
            buf.context_seed = ctx.seed;
            buf.ratio = artifact.ratio;
            buf.probe_accuracy =
                probe_accuracy_buffer(w, artifact, probes, adapter ? &*adapter : nullptr);
            buf.mean_kl_drift = mean_agnostic_drift(w, ctx, &artifact, kDriftSeed, kDriftQueries,
                                                    32, adapter ? &*adapter : nullptr);
            buf.artifact_bytes =
                static_cast<int64_t>(fs::file_size(fs::path(artifacts_dir) / (name + ".lcc")));
            report.rows.push_back(buf);

            if (with_tlm) {
                EvalRow tlm;
                tlm.condition = "tlm";
                tlm.context_seed = ctx.seed;
                tlm.probe_accuracy = probe_accuracy_tlm(w, ctx, probes, TlmOptions{});
                report.rows.push_back(tlm);
            }
        }

        fs::create_directories(out_dir);
        write_text_file((fs::path(out_dir) / "eval.json").string(), report.to_json(common.timing));
        write_text_file((fs::path(out_dir) / "eval.csv").string(), report.to_csv(common.timing));
        std::cout << "eval rows: " << report.rows.size() << "\n";
        return kExitOk;
    } catch (const std::exception& e) {
        return map_exception(e);
    }
}

int cmd_ablate(const std::string& model_path, const std::string& spec_path,
               const std::string& out_dir, int jobs, const CommonOptions& common) {
    try {
        ModelWeights w = load_checkpoint(model_path);
        SweepSpec spec = SweepSpec::from_json(read_text_file(spec_path));
        EvalReport report = run_sweep(w, spec, jobs);
        fs::create_directories(out_dir);
        write_text_file((fs::path(out_dir) / "sweep.csv").string(), report.to_csv(common.timing));
        write_text_file((fs::path(out_dir) / "sweep.json").string(), report.to_json(common.timing));
        int failed = 0;
        for (const auto& row : report.rows)
            if (row.status != "ok") ++failed;
        std::cout << "sweep cells: " << report.rows.size() << " (" << failed << " failed)\n";
        return failed == 0 ? kExitOk : kExitFailure;
    } catch (const std::exception& e) {
        return map_exception(e);
    }
}

// ---- verify ---------------------------------------------------------------------

namespace {

// independent restatement of the visibility rules, kept apart from
// build_segment_mask on purpose
bool mask_rule_oracle(const SegmentLayout& lay, int i, int j) {
    if (j > i) return false;
    const Segment si = lay.segment_of(i), sj = lay.segment_of(j);
    if (si == Segment::Context) return sj == Segment::Context;
    if (si == Segment::Buffer) return sj == Segment::Context || sj == Segment::Buffer;
    return sj == Segment::Buffer || sj == Segment::Query || sj == Segment::Response;
}

bool check_gradcheck_kernels() {
    RngState rng(41);
    const double tol = 1e-4;
    {
        Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor b = Tensor::randn({4, 2}, rng, 1.0);
        if (grad_check([&](const Tensor& x) { return sum(matmul(x, b)); }, a, 1e-5) > tol)
            return false;
    }
    {
        Tensor x = Tensor::randn({2, 5}, rng, 1.0, true);
        if (grad_check([](const Tensor& t) { return sum(mul(softmax_rows(t), t)); }, x, 1e-5) > tol)
            return false;
    }
    {
        Tensor q = Tensor::randn({2, 6}, rng, 1.0, true);
        Tensor p = softmax_rows(Tensor::randn({2, 6}, rng, 1.0));
        if (grad_check([&](const Tensor& t) { return kl_divergence(p, t); }, q, 1e-5) > tol)
            return false;
    }
    {
        Tensor x = Tensor::randn({3, 6}, rng, 1.0, true);
        Tensor g = Tensor::randn({6}, rng, 1.0);
        if (grad_check([&](const Tensor& t) { return sum(rms_norm(t, g)); }, x, 1e-5) > tol)
            return false;
    }
    {
        Tensor x = Tensor::randn({3, 8}, rng, 1.0, true);
        const std::vector<int> pos = {0, 3, 7};
        if (grad_check([&](const Tensor& t) { return sum(silu(rotary(t, pos, 2, 4, 100.0))); }, x,
                       1e-5) > tol)
            return false;
    }
    {
        Tensor logits = Tensor::randn({4, 7}, rng, 1.0, true);
        const std::vector<int> ys = {1, 0, 6, 3};
        if (grad_check([&](const Tensor& t) { return cross_entropy(t, ys); }, logits, 1e-5) > tol)
            return false;
    }
    return true;
}

bool check_segment_mask_oracle(bool inject_fault) {
    for (int c = 0; c <= 3; ++c)
        for (int k = 1; k <= 3; ++k)
            for (int q = 0; q <= 2; ++q)
                for (int r = 0; r <= 2; ++r) {
                    const SegmentLayout lay{c, k, q, r};
                    SegmentMask m = build_segment_mask(lay);
                    if (inject_fault && m.n > 1) m.allow[1] ^= 1; // simulated rule bug
                    for (int i = 0; i < m.n; ++i)
                        for (int j = 0; j < m.n; ++j)
                            if (m.at(i, j) != mask_rule_oracle(lay, i, j)) return false;
                }
    return true;
}

bool check_identity_at_init() {
    ModelConfig cfg{32, 16, 2, 2, 8, 32, 64, 10000.0};
    RngState rng(5);
    ModelWeights w = ModelWeights::random_init(cfg, rng);
    w.freeze();
    RngState arng(6);
    LoraAdapter adapter = LoraAdapter::init(cfg, 4, 8.0, arng);
    const std::vector<int> ctx = {1, 2, 3, 4, 5, 6};
    const std::vector<int> query = {7, 8};
    const std::vector<int> target = {9, 10, 11};
    Tensor teacher = teacher_logits(w, ctx, query, target);
    BufferEmbeddings buf = BufferEmbeddings::init(w, 1);
    Tensor student =
        student_logits(w, &adapter, buf, ctx, query, target, StudentMaskMode::RelaxedIdentity);
    if (teacher.shape() != student.shape()) return false;
    for (int64_t i = 0; i < teacher.size(); ++i)
        if (teacher.at(i) != student.at(i)) return false;
    return kl_divergence(softmax_rows(teacher), student).item() <= 1e-10;
}

bool check_artifact_roundtrip() {
    ModelConfig cfg{32, 16, 2, 2, 8, 32, 64, 10000.0};
    RngState rng(9);
    ModelWeights w = ModelWeights::random_init(cfg, rng);
    w.freeze();
    BufferEmbeddings buf = BufferEmbeddings::init(w, 2);
    for (double& x : buf.rows.data()) x += rng.next_normal() * 0.1;
    const std::vector<int> ctx = {3, 1, 4, 1, 5, 9};
    KvCache cache = extract_buffer_cache(w, ctx, SegmentLayout{6, 2, 0, 0}, nullptr, buf.rows);
    BufferArtifact a = BufferArtifact::from_cache(cache, w.fingerprint, "f32", 6, 3, Hash256{});
    const auto bytes = serialize_artifact(a);
    if (bytes.size() != artifact_file_size(2, 2, 2, 8, "f32")) return false;
    BufferArtifact b = deserialize_artifact(bytes);
    if (serialize_artifact(b) != bytes) return false;
    KvCache attached = attach(w, b);
    for (int l = 0; l < cfg.n_layers; ++l)
        for (int64_t i = 0; i < attached.k[static_cast<size_t>(l)].size(); ++i) {
            const double narrowed =
                static_cast<double>(static_cast<float>(cache.k[static_cast<size_t>(l)].at(i)));
            if (attached.k[static_cast<size_t>(l)].at(i) != narrowed) return false;
        }
    // wrong model must be rejected
    RngState rng2(10);
    ModelWeights w2 = ModelWeights::random_init(cfg, rng2);
    w2.freeze();
    try {
        attach(w2, b);
        return false;
    } catch (const FingerprintError&) {
    }
    return true;
}

bool check_frozen_fingerprint() {
    ModelConfig cfg{32, 16, 1, 2, 8, 32, 64, 10000.0};
    RngState rng(12);
    ModelWeights w = ModelWeights::random_init(cfg, rng);
    w.freeze();
    w.check_frozen_intact();
    w.layers[0].wq.data()[0] += 1e-9;
    try {
        w.check_frozen_intact();
        return false;
    } catch (const FingerprintError&) {
    }
    return true;
}

} // namespace

int cmd_verify(const std::string& inject_fault) {
    if (!inject_fault.empty() && inject_fault != "mask" && inject_fault != "none") {
        std::cerr << "error: unknown fault \"" << inject_fault << "\"\n";
        return kExitFailure;
    }
    const bool fault_mask = inject_fault == "mask";
    struct Check {
        const char* name;
        std::function<bool()> fn;
    };
    const std::vector<Check> checks = {
        {"gradcheck_kernels", [] { return check_gradcheck_kernels(); }},
        {"segment_mask_oracle", [=] { return check_segment_mask_oracle(fault_mask); }},
        {"identity_at_init", [] { return check_identity_at_init(); }},
        {"artifact_roundtrip", [] { return check_artifact_roundtrip(); }},
        {"frozen_fingerprint", [] { return check_frozen_fingerprint(); }},
    };
    int failures = 0;
    for (const Check& c : checks) {
        bool ok = false;
        try {
            ok = c.fn();
        } catch (const std::exception& e) {
            std::cout << "FAIL " << c.name << " (" << e.what() << ")\n";
            ++failures;
            continue;
        }
        std::cout << (ok ? "ok   " : "FAIL ") << c.name << "\n";
        if (!ok) ++failures;
    }
    return failures == 0 ? kExitOk : kExitFailure;
}

} // namespace lcc
