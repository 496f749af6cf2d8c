// lcc: compile token contexts into portable buffer-token KV artifacts and
// query them against the frozen base model.

#include <CLI11.hpp>

#include "lcc/harness.hpp"

int main(int argc, char** argv) {
    CLI::App app{"latent context cache compiler"};
    app.require_subcommand(1);

    lcc::CommonOptions common;
    app.add_flag("--timing", common.timing, "include wall-clock fields in reports");

    // pretrain
    auto* pretrain = app.add_subcommand("pretrain", "train and freeze the synthetic base model");
    std::string pre_config, pre_out = "model.lccm";
    std::optional<uint64_t> pre_seed;
    pretrain->add_option("--config", pre_config, "pretrain config JSON");
    pretrain->add_option("--out", pre_out, "checkpoint output path");
    pretrain->add_option("--seed", pre_seed, "seed override");

    // compile
    auto* compile = app.add_subcommand("compile", "distill a context into a buffer artifact");
    std::string cmp_model, cmp_context, cmp_config, cmp_out = "context.lcc";
    lcc::CompileOverrides over;
    std::string cmp_loss;
    bool cmp_coupled = false;
    std::optional<int> cmp_ratio;
    std::optional<uint64_t> cmp_seed;
    compile->add_option("--model", cmp_model, "frozen checkpoint (.lccm)")->required();
    compile->add_option("--context", cmp_context, "context token file (.ctx)")->required();
    compile->add_option("--config", cmp_config, "compile config JSON");
    compile->add_option("--out", cmp_out, "artifact output path (.lcc)");
    compile->add_option("--ratio", cmp_ratio, "compression ratio override");
    compile->add_option("--loss", cmp_loss, "loss override: kl | mse");
    compile->add_flag("--coupled", cmp_coupled, "keep the adapter in the generation path");
    compile->add_option("--seed", cmp_seed, "seed override");

    // query
    auto* query = app.add_subcommand("query", "decode an answer from an attached artifact");
    std::string q_model, q_artifact, q_adapter;
    std::vector<int> q_tokens;
    int q_max_new = 32;
    query->add_option("--model", q_model, "frozen checkpoint")->required();
    query->add_option("--artifact", q_artifact, "buffer artifact (.lcc)")->required();
    query->add_option("--adapter", q_adapter, "coupled adapter sidecar (.lcca)");
    query->add_option("--max-new", q_max_new, "decode budget");
    query->add_option("tokens", q_tokens, "query token ids")->expected(-1);

    // eval
    auto* eval = app.add_subcommand("eval", "score bound and buffer conditions on probe sets");
    std::string e_model, e_contexts, e_artifacts, e_out = "eval_out";
    bool e_tlm = false;
    eval->add_option("--model", e_model, "frozen checkpoint")->required();
    eval->add_option("--contexts", e_contexts, "directory of .ctx/.probes files")->required();
    eval->add_option("--artifacts", e_artifacts, "directory of .lcc artifacts")->required();
    eval->add_option("--out", e_out, "report output directory");
    eval->add_flag("--with-tlm", e_tlm, "include the adapter-as-memory reference condition");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "run a sweep grid, one compile per cell");
    std::string a_model, a_spec, a_out = "sweep_out";
    int a_jobs = 1;
    ablate->add_option("--model", a_model, "frozen checkpoint")->required();
    ablate->add_option("--spec", a_spec, "sweep spec JSON")->required();
    ablate->add_option("--out", a_out, "report output directory");
    ablate->add_option("--jobs", a_jobs, "parallel cell workers");

    // verify
    auto* verify = app.add_subcommand("verify", "fast invariant suite");
    std::string v_fault;
    verify->add_option("--inject-fault", v_fault, "test fixture: force a named check to fail");

    CLI11_PARSE(app, argc, argv);

    if (pretrain->parsed()) return lcc::cmd_pretrain(pre_config, pre_out, pre_seed, common);
    if (compile->parsed()) {
        if (cmp_ratio) over.ratio = cmp_ratio;
        if (!cmp_loss.empty()) over.loss = cmp_loss;
        if (cmp_coupled) over.coupled = true;
        if (cmp_seed) over.seed = cmp_seed;
        return lcc::cmd_compile(cmp_model, cmp_context, cmp_config, cmp_out, over, common);
    }
    if (query->parsed())
        return lcc::cmd_query(q_model, q_artifact, q_tokens, q_adapter, q_max_new, common);
    if (eval->parsed()) return lcc::cmd_eval(e_model, e_contexts, e_artifacts, e_out, e_tlm, common);
    if (ablate->parsed()) return lcc::cmd_ablate(a_model, a_spec, a_out, a_jobs, common);
    if (verify->parsed()) return lcc::cmd_verify(v_fault);
    return lcc::kExitFailure;
}
