#include <doctest.h>

#include <cmath>

#include "lcc/gradcheck.hpp"
#include "lcc/trainer.hpp"

using namespace lcc;

namespace {
ModelWeights small_teacher(uint64_t seed) {
    const ModelConfig cfg{96, 16, 2, 2, 8, 24, 256, 1000.0, 0};
    RngState rng(seed);
    ModelWeights w = ModelWeights::random_init(cfg, rng);
    w.freeze();
    return w;
}

CompileConfig tiny_config() {
    CompileConfig c;
    c.ratio = 4;
    c.epochs = 3;
    c.n_recon = 6;
    c.n_agnostic = 6;
    c.batch_size = 4;
    c.lora_rank = 2;
    c.lora_alpha = 4.0;
    c.learning_rate = 1e-3;
    c.max_decode_len = 6;
    c.seed = 5;
    return c;
}
} // namespace

TEST_CASE("buffer token count follows the ratio law") {
    CHECK(buffer_token_count(256, 16) == 16);
    CHECK(buffer_token_count(64, 16) == 4);
    CHECK(buffer_token_count(64, 32) == 2);
    CHECK(buffer_token_count(10, 16) == 1); // floor, clamped to one
    CHECK(buffer_token_count(64, 1) == 64);
    CHECK_THROWS_AS(buffer_token_count(64, 0), ShapeError);
}

TEST_CASE("buffer embeddings start at the vocabulary mean") {
    ModelWeights w = small_teacher(80);
    BufferEmbeddings be = BufferEmbeddings::init(w, 3);
    REQUIRE(be.rows.dim(0) == 3);
    REQUIRE(be.rows.dim(1) == w.config.d_model);
    for (int j = 0; j < w.config.d_model; ++j) {
        double mean = 0.0;
        for (int v = 0; v < w.config.vocab_size; ++v) mean += w.tok_embed.at2(v, j);
        mean /= w.config.vocab_size;
        for (int i = 0; i < 3; ++i) CHECK(be.rows.at2(i, j) == doctest::Approx(mean).epsilon(1e-15));
    }
}

TEST_CASE("relaxed-mask student with a fresh adapter reproduces the teacher exactly") {
    ModelWeights w = small_teacher(81);
    RngState arng(82);
    LoraAdapter adapter = LoraAdapter::init(w.config, 4, 8.0, arng);
    SyntheticContext ctx = gen_context(83, 2, 8);
    const std::vector<int> query = vocab::trigger_tokens();
    const std::vector<int>& target = ctx.tokens;

    Tensor teacher = teacher_logits(w, ctx.tokens, query, target);
    BufferEmbeddings buf = BufferEmbeddings::init(w, 2);
    Tensor student = student_logits(w, &adapter, buf, ctx.tokens, query, target,
                                    StudentMaskMode::RelaxedIdentity);
    REQUIRE(teacher.shape() == student.shape());
    for (int64_t i = 0; i < teacher.size(); ++i) CHECK(teacher.at(i) == student.at(i));
    CHECK(kl_divergence(softmax_rows(teacher), student).item() <= 1e-10);
}

TEST_CASE("teacher logits: empty target yields an empty block") {
    ModelWeights w = small_teacher(84);
    const std::vector<int> ctx = {33, 49, 1};
    const std::vector<int> query = {3, 34};
    Tensor block = teacher_logits(w, ctx, query, {});
    CHECK(block.dim(0) == 0);
    CHECK(block.dim(1) == w.config.vocab_size);
}

TEST_CASE("teacher logits reject length overflow") {
    ModelWeights w = small_teacher(85);
    std::vector<int> ctx(300, 20);
    CHECK_THROWS_AS(teacher_logits(w, ctx, vocab::trigger_tokens(), {}), PositionError);
}

TEST_CASE("student bottleneck accepts ratio one (K == n_ctx)") {
    ModelWeights w = small_teacher(86);
    SyntheticContext ctx = gen_context(87, 2, 8);
    BufferEmbeddings buf = BufferEmbeddings::init(w, 8);
    RngState arng(88);
    LoraAdapter adapter = LoraAdapter::init(w.config, 2, 4.0, arng);
    Tensor out = student_logits(w, &adapter, buf, ctx.tokens, vocab::trigger_tokens(), ctx.tokens);
    CHECK(out.dim(0) == static_cast<int>(ctx.tokens.size()));
}

TEST_CASE("loss agrees with direct-sum oracles in both modes") {
    RngState rng(89);
    Tensor teacher = Tensor::randn({3, 7}, rng, 1.0);
    Tensor student = Tensor::randn({3, 7}, rng, 1.0).set_requires_grad(true);
    SurrogateSample sample;

    SUBCASE("identical blocks") {
        Tensor same = teacher.clone().set_requires_grad(true);
        CHECK(sample_loss(sample, teacher, same, LossKind::Kl).item() <= 1e-12);
        CHECK(sample_loss(sample, teacher, same, LossKind::Mse).item() == 0.0);
    }

    SUBCASE("random blocks vs oracle") {
        // KL oracle at extended precision
        long double kl = 0.0L;
        for (int r = 0; r < 3; ++r) {
            long double zt = 0.0L, zs = 0.0L;
            for (int c = 0; c < 7; ++c) {
                zt += expl(static_cast<long double>(teacher.at2(r, c)));
                zs += expl(static_cast<long double>(student.at2(r, c)));
            }
            for (int c = 0; c < 7; ++c) {
                const long double pt = expl(static_cast<long double>(teacher.at2(r, c))) / zt;
                const long double ls =
                    static_cast<long double>(student.at2(r, c)) - logl(zs);
                kl += pt * (logl(pt) - ls);
            }
        }
        CHECK(std::abs(sample_loss(sample, teacher, student, LossKind::Kl).item() -
                       static_cast<double>(kl / 3)) < 1e-10);

        long double mse = 0.0L;
        for (int64_t i = 0; i < teacher.size(); ++i) {
            const long double d = static_cast<long double>(student.at(i)) - teacher.at(i);
            mse += d * d;
        }
        CHECK(std::abs(sample_loss(sample, teacher, student, LossKind::Mse).item() -
                       static_cast<double>(mse / 21)) < 1e-10);
    }

    SUBCASE("misaligned blocks are rejected") {
        Tensor wrong = Tensor::zeros({2, 7});
        CHECK_THROWS_AS(sample_loss(sample, teacher, wrong, LossKind::Kl), ShapeError);
    }
}

TEST_CASE("zero learning rate leaves every trainable bit untouched") {
    ModelWeights w = small_teacher(90);
    SyntheticContext ctx = gen_context(91, 2, 8);
    CompileConfig cfg = tiny_config();
    cfg.learning_rate = 0.0;
    TrainState st = make_train_state(w, ctx, cfg);
    RngState rng(92);
    auto samples = build_surrogate(ctx, w, 2, 2, rng,
                                   SurrogateOptions{0, cfg.max_decode_len, true});

    const Tensor buffer_before = st.buffer.rows.clone();
    std::vector<Tensor> adapter_before;
    for (Tensor* t : st.adapter->trainable_tensors()) adapter_before.push_back(t->clone());

    train_step(st, std::span<const SurrogateSample>(samples.data(), 2));

    for (int64_t i = 0; i < buffer_before.size(); ++i)
        CHECK(st.buffer.rows.at(i) == buffer_before.at(i));
    auto after = st.adapter->trainable_tensors();
    for (size_t t = 0; t < after.size(); ++t)
        for (int64_t i = 0; i < after[t]->size(); ++i)
            CHECK(after[t]->at(i) == adapter_before[t].at(i));
}

TEST_CASE("one small step on a single sample decreases its loss") {
    ModelWeights w = small_teacher(93);
    SyntheticContext ctx = gen_context(94, 2, 8);
    CompileConfig cfg = tiny_config();
    RngState rng(95);
    auto samples = build_surrogate(ctx, w, 1, 0, rng);
    REQUIRE(samples.size() == 1);

    auto loss_now = [&](TrainState& st) {
        Tensor student = student_logits(w, st.adapter_ptr(), st.buffer, ctx.tokens,
                                        samples[0].query_tokens, samples[0].target_tokens);
        return sample_loss(samples[0], samples[0].teacher_logits, student, cfg.loss_kind).item();
    };

    bool any_decreased = false;
    for (double lr : {1e-2, 1e-3, 1e-4}) {
        cfg.learning_rate = lr;
        cfg.lr_schedule = "constant";
        TrainState st = make_train_state(w, ctx, cfg);
        const double before = loss_now(st);
        train_step(st, std::span<const SurrogateSample>(samples.data(), 1));
        const double after = loss_now(st);
        if (after < before) any_decreased = true;
        if (lr == 1e-4) CHECK(after < before); // small enough must descend
    }
    CHECK(any_decreased);
}

TEST_CASE("training mutates exactly the adapter and buffer tensors") {
    ModelWeights w = small_teacher(96);
    SyntheticContext ctx = gen_context(97, 2, 8);
    CompileConfig cfg = tiny_config();
    cfg.lr_schedule = "constant";
    TrainState st = make_train_state(w, ctx, cfg);
    RngState rng(98);
    auto samples = build_surrogate(ctx, w, 4, 4, rng,
                                   SurrogateOptions{0, cfg.max_decode_len, true});

    const Hash256 weights_before = w.content_hash();
    const Tensor buffer_before = st.buffer.rows.clone();
    std::vector<Tensor> adapter_before;
    for (Tensor* t : st.adapter->trainable_tensors()) adapter_before.push_back(t->clone());

    for (int step = 0; step < 2; ++step)
        train_step(st, std::span<const SurrogateSample>(samples.data() + step * 4, 4));

    // frozen base is bit-identical
    CHECK(w.content_hash() == weights_before);
    w.check_frozen_intact();

    // buffer and adapter tensors moved (two steps: B moves first, then A).
    // The last layer's q and o slots are the one structural exception: under
    // the compression gate they only transform rows whose final-layer outputs
    // the loss never reads, so their gradient is exactly zero and AdamW keeps
    // them bit-identical.
    bool buffer_moved = false;
    for (int64_t i = 0; i < buffer_before.size(); ++i)
        buffer_moved = buffer_moved || st.buffer.rows.at(i) != buffer_before.at(i);
    CHECK(buffer_moved);
    auto after = st.adapter->trainable_tensors();
    const size_t last_layer = w.config.n_layers - 1;
    for (size_t t = 0; t < after.size(); ++t) {
        const size_t layer = t / 8;
        const Proj proj = static_cast<Proj>((t % 8) / 2);
        const bool grad_free =
            layer == last_layer && (proj == Proj::Q || proj == Proj::O);
        bool moved = false;
        for (int64_t i = 0; i < after[t]->size(); ++i)
            moved = moved || after[t]->at(i) != adapter_before[t].at(i);
        CHECK(moved == !grad_free);
    }
}

TEST_CASE("a non-finite loss aborts training with a diagnostic") {
    ModelWeights w = small_teacher(99);
    SyntheticContext ctx = gen_context(100, 2, 8);
    CompileConfig cfg = tiny_config();
    cfg.loss_kind = LossKind::Mse;
    TrainState st = make_train_state(w, ctx, cfg);
    RngState rng(101);
    auto samples = build_surrogate(ctx, w, 1, 0, rng);
    // squared differences against these targets overflow to +inf
    for (double& v : samples[0].teacher_logits.data()) v = 1e200;
    CHECK_THROWS_AS(train_step(st, std::span<const SurrogateSample>(samples.data(), 1)),
                    TrainingError);
}

TEST_CASE("compile produces a well-formed artifact, report and deterministic bytes") {
    ModelWeights w = small_teacher(102);
    SyntheticContext ctx = gen_context(103, 2, 8);
    CompileConfig cfg = tiny_config();

    CompileResult a = compile(w, ctx, cfg);
    CHECK(a.artifact.k_tokens == 2); // 8 tokens at ratio 4
    CHECK(a.artifact.context_length == 8);
    CHECK(a.artifact.first_free_position == 10);
    CHECK(a.artifact.model_fingerprint == w.fingerprint);
    CHECK(a.artifact.config_hash == cfg.config_hash());
    REQUIRE(a.report.epochs.size() == 3);
    int presented = 0;
    for (const EpochStats& e : a.report.epochs) {
        presented += e.presentations;
        CHECK(std::isfinite(e.mean_total_loss));
    }
    CHECK(presented == 12);
    CHECK_FALSE(a.coupled_adapter.has_value());

    CompileResult b = compile(w, ctx, cfg);
    CHECK(serialize_artifact(a.artifact) == serialize_artifact(b.artifact));
    CHECK(a.report.to_json() == b.report.to_json());
    CHECK(a.report.to_csv() == b.report.to_csv());

    // frozen base untouched by the whole run
    w.check_frozen_intact();
}

TEST_CASE("coupled compile returns the adapter instead of discarding it") {
    ModelWeights w = small_teacher(104);
    SyntheticContext ctx = gen_context(105, 2, 8);
    CompileConfig cfg = tiny_config();
    cfg.coupled = true;
    CompileResult res = compile(w, ctx, cfg);
    REQUIRE(res.coupled_adapter.has_value());
    CHECK(res.coupled_adapter->active_segments == SegmentSet::all());
    CHECK_FALSE(res.coupled_adapter->discarded);
}

TEST_CASE("embeddings-only diagnostic mode trains without an adapter") {
    ModelWeights w = small_teacher(106);
    SyntheticContext ctx = gen_context(107, 2, 8);
    CompileConfig cfg = tiny_config();
    cfg.adapter_enabled = false;
    CompileResult res = compile(w, ctx, cfg);
    CHECK(res.artifact.k_tokens == 2);
    CHECK_FALSE(res.coupled_adapter.has_value());
}

TEST_CASE("compile config json round trip and hashing") {
    CompileConfig cfg = tiny_config();
    cfg.loss_kind = LossKind::Mse;
    cfg.lora_projections = 0b0111; // q, k, v only
    const std::string text = cfg.to_json();
    CompileConfig back = CompileConfig::from_json(text);
    CHECK(back.ratio == cfg.ratio);
    CHECK(back.loss_kind == LossKind::Mse);
    CHECK(back.lora_projections == cfg.lora_projections);
    CHECK(back.config_hash() == cfg.config_hash());

    CHECK_THROWS_AS(CompileConfig::from_json("{\"no_such_key\": 1}"), Error);
    CHECK_THROWS_AS(CompileConfig::from_json("{\"loss\": \"huber\"}"), Error);

    CompileConfig other = tiny_config();
    other.seed = 999;
    CHECK(other.config_hash() != cfg.config_hash());
}

TEST_CASE("compile rejects contexts that overflow the position budget") {
    ModelWeights w = small_teacher(108);
    SyntheticContext ctx = gen_context(109, 16, 200); // 2*200 + k + 2 > 256
    CompileConfig cfg = tiny_config();
    CHECK_THROWS_AS(make_train_state(w, ctx, cfg), Error);
}

TEST_CASE("end-to-end compile loss passes gradcheck on buffer and adapter entries") {
    ModelWeights w = small_teacher(110);
    SyntheticContext ctx = gen_context(111, 1, 4);
    CompileConfig cfg = tiny_config();
    TrainState st = make_train_state(w, ctx, cfg);
    RngState rng(112);
    auto samples = build_surrogate(ctx, w, 1, 1, rng,
                                   SurrogateOptions{0, cfg.max_decode_len, true});

    auto total_loss = [&](const Tensor&) {
        Tensor acc = Tensor::scalar(0.0);
        for (const auto& s : samples) {
            Tensor student = student_logits(w, st.adapter_ptr(), st.buffer, ctx.tokens,
                                            s.query_tokens, s.target_tokens);
            acc = add(acc, sample_loss(s, s.teacher_logits, student, cfg.loss_kind));
        }
        return acc;
    };

    std::vector<int64_t> idx = {0, 3, 7};
    CHECK(grad_check_sampled(total_loss, st.buffer.rows, 1e-5, idx) <= 1e-4);
    Tensor& b0 = st.adapter->layers[0][0].b;
    CHECK(grad_check_sampled(total_loss, b0, 1e-5, idx) <= 1e-4);
    Tensor& a1 = st.adapter->layers[1][2].a;
    CHECK(grad_check_sampled(total_loss, a1, 1e-5, idx) <= 1e-4);
}
