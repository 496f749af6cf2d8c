#include "lcc/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

#include <json.hpp>

namespace lcc {

using nlohmann::json;

namespace {
std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}
} // namespace

BufferEmbeddings BufferEmbeddings::init(const ModelWeights& w, int k) {
    if (k < 1) throw ShapeError("buffer embeddings: k must be >= 1");
    const int v = w.config.vocab_size, d = w.config.d_model;
    std::vector<double> mean(static_cast<size_t>(d), 0.0);
    for (int i = 0; i < v; ++i)
        for (int j = 0; j < d; ++j)
            mean[static_cast<size_t>(j)] += w.tok_embed.data()[static_cast<size_t>(i) * d + j];
    for (double& x : mean) x /= v;
    BufferEmbeddings be;
    be.rows = Tensor::zeros({k, d});
    for (int i = 0; i < k; ++i)
        std::copy(mean.begin(), mean.end(), be.rows.data().begin() + static_cast<size_t>(i) * d);
    return be;
}

int buffer_token_count(int n_ctx, int ratio) {
    if (ratio < 1) throw ShapeError("compression ratio must be >= 1");
    return std::max(1, n_ctx / ratio);
}

LossKind loss_kind_from_string(const std::string& s) {
    if (s == "kl") return LossKind::Kl;
    if (s == "mse") return LossKind::Mse;
    throw Error("loss kind must be kl or mse, got " + s);
}

std::string to_string(LossKind k) { return k == LossKind::Kl ? "kl" : "mse"; }

// ---- config -------------------------------------------------------------------

void CompileConfig::validate() const {
    if (ratio < 1 && explicit_k < 1) throw Error("compile config: ratio must be >= 1");
    if (epochs < 1) throw Error("compile config: epochs must be >= 1");
    if (learning_rate < 0) throw Error("compile config: negative learning rate");
    if (batch_size < 1) throw Error("compile config: batch_size must be >= 1");
    if (n_recon < 0 || n_agnostic < 0 || n_recon + n_agnostic < 1)
        throw Error("compile config: need at least one sample");
    if (lr_schedule != "constant" && lr_schedule != "linear")
        throw Error("compile config: lr_schedule must be constant or linear");
    if (artifact_dtype != "f32" && artifact_dtype != "f64")
        throw Error("compile config: artifact_dtype must be f32 or f64");
    if (lora_rank < 1) throw Error("compile config: lora_rank must be >= 1");
    if (max_decode_len < 1) throw Error("compile config: max_decode_len must be >= 1");
}

namespace {
std::string projections_to_string(uint8_t bits) {
    std::string s;
    if (bits & 1) s += 'q';
    if (bits & 2) s += 'k';
    if (bits & 4) s += 'v';
    if (bits & 8) s += 'o';
    return s;
}

uint8_t projections_from_string(const std::string& s) {
    uint8_t bits = 0;
    for (char c : s) {
        if (c == 'q') bits |= 1;
        else if (c == 'k') bits |= 2;
        else if (c == 'v') bits |= 4;
        else if (c == 'o') bits |= 8;
        else throw Error("lora_projections: unknown projection '" + std::string(1, c) + "'");
    }
    return bits;
}

json config_to_json_obj(const CompileConfig& c) {
    json j;
    j["ratio"] = c.ratio;
    j["explicit_k"] = c.explicit_k;
    j["epochs"] = c.epochs;
    j["learning_rate"] = c.learning_rate;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["adam_eps"] = c.adam_eps;
    j["weight_decay"] = c.weight_decay;
    j["lr_schedule"] = c.lr_schedule;
    j["loss"] = to_string(c.loss_kind);
    j["coupled"] = c.coupled;
    j["adapter_enabled"] = c.adapter_enabled;
    j["agnostic_teacher_uses_context"] = c.agnostic_teacher_uses_context;
    j["n_recon"] = c.n_recon;
    j["n_agnostic"] = c.n_agnostic;
    j["agnostic_pool"] = c.agnostic_pool;
    j["max_decode_len"] = c.max_decode_len;
    j["batch_size"] = c.batch_size;
    j["lora_rank"] = c.lora_rank;
    j["lora_alpha"] = c.lora_alpha;
    j["lora_projections"] = projections_to_string(c.lora_projections);
    j["artifact_dtype"] = c.artifact_dtype;
    j["seed"] = c.seed;
    return j;
}
} // namespace

std::string CompileConfig::to_json() const { return config_to_json_obj(*this).dump(2) + "\n"; }

CompileConfig CompileConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    if (!j.is_object()) throw Error("compile config: expected a JSON object");
    CompileConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "ratio") c.ratio = value.get<int>();
        else if (key == "explicit_k") c.explicit_k = value.get<int>();
        else if (key == "epochs") c.epochs = value.get<int>();
        else if (key == "learning_rate") c.learning_rate = value.get<double>();
        else if (key == "beta1") c.beta1 = value.get<double>();
        else if (key == "beta2") c.beta2 = value.get<double>();
        else if (key == "adam_eps") c.adam_eps = value.get<double>();
        else if (key == "weight_decay") c.weight_decay = value.get<double>();
        else if (key == "lr_schedule") c.lr_schedule = value.get<std::string>();
        else if (key == "loss") c.loss_kind = loss_kind_from_string(value.get<std::string>());
        else if (key == "coupled") c.coupled = value.get<bool>();
        else if (key == "adapter_enabled") c.adapter_enabled = value.get<bool>();
        else if (key == "agnostic_teacher_uses_context")
            c.agnostic_teacher_uses_context = value.get<bool>();
        else if (key == "n_recon") c.n_recon = value.get<int>();
        else if (key == "n_agnostic") c.n_agnostic = value.get<int>();
        else if (key == "agnostic_pool") c.agnostic_pool = value.get<int>();
        else if (key == "max_decode_len") c.max_decode_len = value.get<int>();
        else if (key == "batch_size") c.batch_size = value.get<int>();
        else if (key == "lora_rank") c.lora_rank = value.get<int>();
        else if (key == "lora_alpha") c.lora_alpha = value.get<double>();
        else if (key == "lora_projections") c.lora_projections = projections_from_string(value.get<std::string>());
        else if (key == "artifact_dtype") c.artifact_dtype = value.get<std::string>();
        else if (key == "seed") c.seed = value.get<uint64_t>();
        else throw Error("compile config: unknown key \"" + key + "\"");
    }
    c.validate();
    return c;
}

std::string CompileConfig::canonical_json() const { return config_to_json_obj(*this).dump(); }

Hash256 CompileConfig::config_hash() const { return sha256(canonical_json()); }

// ---- report -------------------------------------------------------------------

std::string TrainReport::to_json(bool include_timing) const {
    json j;
    j["config_hash"] = config_hash_hex;
    j["seed"] = seed;
    json rows = json::array();
    for (const EpochStats& e : epochs) {
        json r;
        r["epoch"] = e.epoch;
        r["presentations"] = e.presentations;
        r["mean_recon_loss"] = e.mean_recon_loss;
        r["mean_reg_loss"] = e.mean_reg_loss;
        r["mean_total_loss"] = e.mean_total_loss;
        r["mean_grad_norm"] = e.mean_grad_norm;
        rows.push_back(r);
    }
    j["epochs"] = rows;
    if (include_timing) j["wall_seconds"] = wall_seconds;
    return j.dump(2) + "\n";
}

std::string TrainReport::to_csv() const {
    std::string s = "epoch,presentations,mean_recon_loss,mean_reg_loss,mean_total_loss,mean_grad_norm\n";
    for (const EpochStats& e : epochs) {
        s += std::to_string(e.epoch) + "," + std::to_string(e.presentations) + "," +
             fmt_double(e.mean_recon_loss) + "," + fmt_double(e.mean_reg_loss) + "," +
             fmt_double(e.mean_total_loss) + "," + fmt_double(e.mean_grad_norm) + "\n";
    }
    return s;
}

// ---- logits -------------------------------------------------------------------

Tensor teacher_logits(const ModelWeights& w, std::span<const int> ctx, std::span<const int> query,
                      std::span<const int> target) {
    if (query.empty()) throw ShapeError("teacher_logits: query must be nonempty");
    const int c = static_cast<int>(ctx.size());
    const int q = static_cast<int>(query.size());
    const int r = static_cast<int>(target.size());
    const int total = c + q + r;
    if (total > w.config.max_position)
        throw PositionError("teacher_logits: length " + std::to_string(total) + " overflows max_position " +
                            std::to_string(w.config.max_position));
    std::vector<int> tokens(ctx.begin(), ctx.end());
    tokens.insert(tokens.end(), query.begin(), query.end());
    tokens.insert(tokens.end(), target.begin(), target.end());
    SequenceInput seq = make_plain_sequence(tokens, 0, Segment::Context);
    ForwardResult res = forward(w, seq, build_causal_mask(total), nullptr, nullptr, nullptr, false);
    return slice_rows(res.logits, c + q - 1, c + q + r - 1);
}

Tensor student_logits(const ModelWeights& w, const LoraAdapter* adapter,
                      const BufferEmbeddings& buffer, std::span<const int> ctx,
                      std::span<const int> query, std::span<const int> target,
                      StudentMaskMode mode) {
    if (query.empty()) throw ShapeError("student_logits: query must be nonempty");
    const int c = static_cast<int>(ctx.size());
    const int q = static_cast<int>(query.size());
    const int r = static_cast<int>(target.size());

    if (mode == StudentMaskMode::RelaxedIdentity) {
        // diagnostic: the teacher sequence with the adapter riding along
        const int total = c + q + r;
        if (total > w.config.max_position)
            throw PositionError("student_logits: length overflow");
        SequenceInput seq;
        for (int t : ctx) seq.tokens.push_back(t);
        for (int t : query) seq.tokens.push_back(t);
        for (int t : target) seq.tokens.push_back(t);
        for (int i = 0; i < total; ++i) {
            seq.positions.push_back(i);
            seq.segments.push_back(i < c ? Segment::Context
                                         : (i < c + q ? Segment::Query : Segment::Response));
        }
        ForwardResult res =
            forward(w, seq, build_causal_mask(total), adapter, nullptr, nullptr, false);
        return slice_rows(res.logits, c + q - 1, c + q + r - 1);
    }

    const int k = buffer.rows.dim(0);
    SegmentLayout layout{c, k, q, r};
    if (layout.total() > w.config.max_position)
        throw PositionError("student_logits: length " + std::to_string(layout.total()) +
                            " overflows max_position " + std::to_string(w.config.max_position));
    SequenceInput seq = make_compression_sequence(layout, ctx, query, target);
    ForwardResult res =
        forward(w, seq, build_segment_mask(layout), adapter, &buffer.rows, nullptr, false);
    const int base = c + k + q - 1;
    return slice_rows(res.logits, base, base + r);
}

Tensor sample_loss(const SurrogateSample& sample, const Tensor& teacher_block,
                   const Tensor& student_block, LossKind kind) {
    (void)sample;
    if (teacher_block.shape() != student_block.shape())
        throw ShapeError("sample_loss: teacher and student blocks are misaligned");
    if (kind == LossKind::Kl) return kl_divergence(softmax_rows(teacher_block), student_block);
    return mse_loss(teacher_block, student_block);
}

// ---- optimizer ----------------------------------------------------------------

void AdamW::add(Tensor* p) {
    slots.push_back(Slot{p, std::vector<double>(static_cast<size_t>(p->size()), 0.0),
                         std::vector<double>(static_cast<size_t>(p->size()), 0.0)});
}

void AdamW::step(double lr) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (Slot& s : slots) {
        auto& grad = s.param->grad(); // zeros if the pass never touched it
        auto& data = s.param->data();
        for (size_t i = 0; i < data.size(); ++i) {
            const double g = grad[i];
            s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * g;
            s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * g * g;
            const double mhat = s.m[i] / bc1;
            const double vhat = s.v[i] / bc2;
            data[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * data[i]);
        }
    }
}

void AdamW::zero_grad() {
    for (Slot& s : slots) s.param->zero_grad();
}

// ---- training -----------------------------------------------------------------

double TrainState::current_lr() const {
    if (config.lr_schedule == "linear" && total_steps > 0)
        return config.learning_rate *
               (1.0 - static_cast<double>(step_index) / static_cast<double>(total_steps));
    return config.learning_rate;
}

TrainState make_train_state(const ModelWeights& w, const SyntheticContext& ctx,
                            const CompileConfig& config) {
    config.validate();
    if (!w.frozen) throw Error("compile: model weights must be frozen first");
    const int c = static_cast<int>(ctx.tokens.size());
    TrainState st;
    st.weights = &w;
    st.context = &ctx;
    st.config = config;
    st.k_buf = config.explicit_k > 0 ? config.explicit_k : buffer_token_count(c, config.ratio);

    const int trigger_len = static_cast<int>(vocab::trigger_tokens().size());
    const int recon_len = 2 * c + st.k_buf + trigger_len;
    const int agnostic_len = c + st.k_buf + 4 + config.max_decode_len;
    if (std::max(recon_len, agnostic_len) > w.config.max_position)
        throw Error("compile: context of " + std::to_string(c) + " tokens plus " +
                    std::to_string(st.k_buf) + " buffer tokens and the query budget overflows "
                    "max_position " + std::to_string(w.config.max_position));

    st.buffer = BufferEmbeddings::init(w, st.k_buf);
    st.buffer.rows.set_requires_grad(true);

    if (config.adapter_enabled) {
        RngState adapter_rng = RngState(config.seed).derive(0x61646170); // "adap"
        st.adapter = LoraAdapter::init(w.config, config.lora_rank, config.lora_alpha, adapter_rng,
                                       config.lora_projections);
        if (config.coupled) st.adapter->active_segments = SegmentSet::all();
        st.adapter->set_trainable(true);
    }

    st.optimizer.beta1 = config.beta1;
    st.optimizer.beta2 = config.beta2;
    st.optimizer.eps = config.adam_eps;
    st.optimizer.weight_decay = config.weight_decay;
    if (st.adapter)
        for (Tensor* t : st.adapter->trainable_tensors()) st.optimizer.add(t);
    st.optimizer.add(&st.buffer.rows);

    const int64_t presentations = config.n_recon + config.n_agnostic;
    st.total_steps = std::max<int64_t>(1, (presentations + config.batch_size - 1) / config.batch_size);
    return st;
}

StepStats train_step(TrainState& state, std::span<const SurrogateSample> batch) {
    StepStats stats;
    if (batch.empty()) return stats;
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (const SurrogateSample& sample : batch) {
        Tensor student = student_logits(*state.weights, state.adapter_ptr(), state.buffer,
                                        state.context->tokens, sample.query_tokens,
                                        sample.target_tokens);
        Tensor loss = sample_loss(sample, sample.teacher_logits, student, state.config.loss_kind);
        const double val = loss.item();
        if (!std::isfinite(val))
            throw TrainingError("training aborted: non-finite loss at optimizer step " +
                                std::to_string(state.step_index));
        if (sample.kind == SampleKind::Reconstruction) {
            stats.recon_loss_sum += val;
            ++stats.recon_count;
        } else {
            stats.reg_loss_sum += val;
            ++stats.reg_count;
        }
        stats.batch_loss += val * inv;
        scale(loss, inv).backward();
    }
    double norm_sq = 0.0;
    for (const AdamW::Slot& s : state.optimizer.slots)
        if (s.param->has_grad())
            for (double g : s.param->grad()) norm_sq += g * g;
    stats.grad_norm = std::sqrt(norm_sq);

    state.optimizer.step(state.current_lr());
    ++state.step_index;
    state.optimizer.zero_grad();
    return stats;
}

CompileResult compile(const ModelWeights& w, const SyntheticContext& ctx,
                      const CompileConfig& config) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainState state = make_train_state(w, ctx, config);

    RngState data_rng = RngState(config.seed).derive(0x64617461); // "data"
    SurrogateOptions opt;
    opt.agnostic_pool = config.agnostic_pool;
    opt.max_decode_len = config.max_decode_len;
    opt.agnostic_teacher_uses_context = config.agnostic_teacher_uses_context;
    std::vector<SurrogateSample> samples =
        build_surrogate(ctx, w, config.n_recon, config.n_agnostic, data_rng, opt);

    // the presentation counts are the whole training budget, partitioned into
    // `epochs` reporting windows
    const int64_t total = static_cast<int64_t>(samples.size());
    const int epochs = config.epochs;
    const int64_t base_count = total / epochs;
    const int64_t leftover = total % epochs;
    state.total_steps = 0;
    {
        int64_t probe = 0;
        for (int e = 0; e < epochs; ++e) {
            const int64_t n = base_count + (e < leftover ? 1 : 0);
            state.total_steps += (n + config.batch_size - 1) / config.batch_size;
            probe += n;
        }
        (void)probe;
    }

    TrainReport report;
    report.config_hash_hex = hex(config.config_hash());
    report.seed = config.seed;

    int64_t cursor = 0;
    for (int e = 0; e < epochs; ++e) {
        const int64_t n = base_count + (e < leftover ? 1 : 0);
        EpochStats es;
        es.epoch = e;
        es.presentations = static_cast<int>(n);
        double grad_norm_sum = 0.0;
        int steps = 0;
        double recon_sum = 0.0, reg_sum = 0.0;
        int recon_cnt = 0, reg_cnt = 0;
        int64_t done = 0;
        while (done < n) {
            const int64_t take = std::min<int64_t>(config.batch_size, n - done);
            StepStats ss = train_step(
                state, std::span<const SurrogateSample>(samples.data() + cursor + done,
                                                        static_cast<size_t>(take)));
            grad_norm_sum += ss.grad_norm;
            ++steps;
            recon_sum += ss.recon_loss_sum;
            reg_sum += ss.reg_loss_sum;
            recon_cnt += ss.recon_count;
            reg_cnt += ss.reg_count;
            done += take;
        }
        cursor += n;
        es.mean_recon_loss = recon_cnt ? recon_sum / recon_cnt : 0.0;
        es.mean_reg_loss = reg_cnt ? reg_sum / reg_cnt : 0.0;
        const int total_cnt = recon_cnt + reg_cnt;
        es.mean_total_loss = total_cnt ? (recon_sum + reg_sum) / total_cnt : 0.0;
        es.mean_grad_norm = steps ? grad_norm_sum / steps : 0.0;
        report.epochs.push_back(es);
    }

    // final forward, slice the buffer KV, drop the catalyst
    SegmentLayout extract_layout{static_cast<int>(ctx.tokens.size()), state.k_buf, 0, 0};
    KvCache buffer_cache = extract_buffer_cache(w, ctx.tokens, extract_layout, state.adapter_ptr(),
                                                state.buffer.rows);

    CompileResult result;
    result.artifact = BufferArtifact::from_cache(buffer_cache, w.fingerprint, config.artifact_dtype,
                                                 static_cast<int>(ctx.tokens.size()), config.ratio,
                                                 config.config_hash());
    if (state.adapter) {
        state.adapter->set_trainable(false);
        if (config.coupled) result.coupled_adapter = std::move(state.adapter);
        else state.adapter->discard();
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.report = std::move(report);
    return result;
}

} // namespace lcc
