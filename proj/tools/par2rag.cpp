// Command-line entry point: ingest, run, eval, ablate, report, gen.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "par2rag/cli.hpp"

namespace {

using namespace par2rag;

std::filesystem::path default_prompts_dir() {
    if (const char* env = std::getenv("PAR2RAG_PROMPTS")) return env;
    return "assets/prompts";
}

void add_retrieval_flags(CLI::App* cmd, RetrievalConfig& cfg, std::string& fusion) {
    cmd->add_option("--candidate-k", cfg.candidate_k, "broad candidate stage size");
    cmd->add_option("--final-k", cfg.final_k, "reranked evidence set size");
    cmd->add_option("--fusion", fusion, "lexical_only | rrf_fusion")
        ->check(CLI::IsMember({"lexical_only", "rrf_fusion"}));
    cmd->add_option("--rrf-constant", cfg.rrf_constant, "reciprocal rank fusion constant");
}

void add_run_flags(CLI::App* cmd, cli::RunOptions& opts, std::string& variant,
                   std::string& fusion) {
    cmd->add_option("--index-dir", opts.index_dir, "ingested index directory")->required();
    cmd->add_option("--dataset", opts.dataset, "QA dataset (jsonl)")->required();
    cmd->add_option("--variant", variant,
                    "par2rag | coverage_anchor_only | iterative_chain_only | "
                    "interleaved_ircot_style | cot_no_retrieval | direct");
    cmd->add_option("--backend", opts.backend_kind, "oracle | http")
        ->check(CLI::IsMember({"oracle", "http"}));
    cmd->add_option("--truth", opts.truth, "truth file for the oracle backend");
    cmd->add_option("--oracle-planner", opts.oracle_planner, "gold_titles | identity")
        ->check(CLI::IsMember({"gold_titles", "identity"}));
    cmd->add_option("--steps", opts.steps, "sets both m and the hop budget");
    cmd->add_option("--m", opts.pipeline.m, "sub-query budget");
    cmd->add_option("--hop-budget", opts.pipeline.hop_budget, "hop budget H");
    cmd->add_option("--context-cap", opts.pipeline.context_char_cap,
                    "context character cap for prompts");
    cmd->add_flag("--separate-formulator", opts.pipeline.separate_formulator,
                  "issue a dedicated formulator call per CONTINUE");
    cmd->add_option("--model", opts.pipeline.model_id, "model id for completions");
    cmd->add_option("--temperature", opts.pipeline.temperature, "decoding temperature");
    cmd->add_option("--max-tokens", opts.pipeline.max_tokens, "decoding max tokens");
    cmd->add_option("--base-url", opts.base_url, "chat-completion endpoint base url");
    cmd->add_option("--cache-dir", opts.cache_dir, "completion response cache directory");
    cmd->add_option("--max-in-flight", opts.max_in_flight,
                    "http backend concurrent request bound");
    cmd->add_option("--rps", opts.requests_per_second,
                    "http backend requests-per-second limit (0 disables)");
    cmd->add_option("--prompts", opts.prompts_dir, "prompt asset directory");
    cmd->add_option("--parallelism", opts.parallelism, "concurrent queries");
    cmd->add_flag("--resume", opts.resume, "skip qids already present in the trace file");
    add_retrieval_flags(cmd, opts.retrieval, fusion);
}

void finish_run_opts(cli::RunOptions& opts, const std::string& variant,
                     const std::string& fusion) {
    opts.pipeline.variant = variant_from_name(variant);
    opts.retrieval.fusion =
        fusion == "rrf_fusion" ? FusionMode::rrf_fusion : FusionMode::lexical_only;
    if (opts.prompts_dir.empty()) opts.prompts_dir = default_prompts_dir();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PAR^2-RAG: two-stage multi-hop retrieval and reasoning engine"};
    app.require_subcommand(1);
    app.set_config("--config", "", "key=value configuration file; flags take precedence");

    // gen
    cli::GenOptions gen_opts;
    std::string gen_hops = "2,3,4";
    auto* gen = app.add_subcommand("gen", "generate a synthetic multi-hop benchmark");
    gen->add_option("--out", gen_opts.out_dir, "output directory")->required();
    gen->add_option("--queries", gen_opts.spec.n_queries, "number of queries");
    gen->add_option("--hops", gen_hops, "comma-separated hop counts, each in [2,4]");
    gen->add_option("--distractors", gen_opts.spec.distractors_per_gold,
                    "distractors per gold document");
    gen->add_option("--near-miss-rate", gen_opts.spec.near_miss_rate,
                    "fraction of distractors sharing the head entity");
    gen->add_option("--seed", gen_opts.spec.seed, "generator seed");
    gen->add_flag("!--no-post-check", gen_opts.post_check, "skip the retrieval post-check");

    // ingest
    cli::IngestOptions ingest_opts;
    auto* ingest = app.add_subcommand("ingest", "chunk and index a corpus file");
    ingest->add_option("--corpus", ingest_opts.corpus, "corpus jsonl file")->required();
    ingest->add_option("--index-dir", ingest_opts.index_dir, "output index directory")
        ->required();
    ingest->add_option("--max-chars", ingest_opts.chunking.max_chars, "chunk size cap");
    ingest->add_option("--overlap", ingest_opts.chunking.overlap_chars, "chunk overlap");
    ingest->add_flag("!--no-boundaries", ingest_opts.chunking.split_on_boundaries,
                     "disable sentence/paragraph boundary preference");

    // run
    cli::RunOptions run_opts;
    std::string run_variant = "par2rag";
    std::string run_fusion = "lexical_only";
    auto* run = app.add_subcommand("run", "execute a dataset through a pipeline variant");
    add_run_flags(run, run_opts, run_variant, run_fusion);
    run->add_option("--out", run_opts.out_traces, "output trace file (jsonl)")->required();

    // eval
    cli::EvalOptions eval_opts;
    auto* eval = app.add_subcommand("eval", "score a trace file against a dataset");
    eval->add_option("--traces", eval_opts.traces, "trace file from run")->required();
    eval->add_option("--dataset", eval_opts.dataset, "QA dataset (jsonl)")->required();
    eval->add_option("--index-dir", eval_opts.index_dir, "ingested index directory")
        ->required();
    eval->add_option("--out-prefix", eval_opts.out_prefix,
                     "prefix for .per_query.jsonl and .report.json")
        ->required();
    eval->add_option("--judge", eval_opts.judge, "exact | template")
        ->check(CLI::IsMember({"exact", "template"}));
    eval->add_option("--judge-backend", eval_opts.backend_kind, "oracle | http");
    eval->add_option("--truth", eval_opts.truth, "truth file for the oracle judge backend");
    eval->add_option("--base-url", eval_opts.base_url, "chat-completion endpoint base url");
    eval->add_option("--model", eval_opts.model_id, "judge model id");
    eval->add_option("--prompts", eval_opts.prompts_dir, "prompt asset directory");

    // ablate
    cli::AblateOptions ablate_opts;
    std::string ablate_variants = "par2rag,iterative_chain_only";
    std::string ablate_steps = "3,5,7,10";
    std::string ablate_variant_unused = "par2rag";
    std::string ablate_fusion = "lexical_only";
    auto* ablate = app.add_subcommand("ablate", "sweep variants x step budgets");
    add_run_flags(ablate, ablate_opts.base, ablate_variant_unused, ablate_fusion);
    ablate->add_option("--out-dir", ablate_opts.out_dir, "output directory")->required();
    ablate->add_option("--variants", ablate_variants, "comma-separated variant list");
    ablate->add_option("--steps-list", ablate_steps, "comma-separated step budgets");
    ablate->add_option("--judge", ablate_opts.eval_base.judge, "exact | template");

    // report
    std::vector<std::string> report_files;
    auto* report = app.add_subcommand("report", "render report files as a table");
    report->add_option("files", report_files, "report.json files")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) {
            gen_opts.spec.hop_choices.clear();
            for (const std::string& h : split(gen_hops, ','))
                if (!trim(h).empty()) gen_opts.spec.hop_choices.push_back(std::stoi(trim(h)));
            cli::cmd_gen(gen_opts);
        } else if (ingest->parsed()) {
            cli::cmd_ingest(ingest_opts);
        } else if (run->parsed()) {
            finish_run_opts(run_opts, run_variant, run_fusion);
            cli::RunOutcome outcome = cli::cmd_run(run_opts);
            if (outcome.batch.failed > 0) {
                std::cerr << outcome.batch.failed << " queries recorded errors\n";
                return 3;
            }
        } else if (eval->parsed()) {
            if (eval_opts.prompts_dir.empty()) eval_opts.prompts_dir = default_prompts_dir();
            cli::cmd_eval(eval_opts);
        } else if (ablate->parsed()) {
            finish_run_opts(ablate_opts.base, "par2rag", ablate_fusion);
            ablate_opts.eval_base.dataset = ablate_opts.base.dataset;
            ablate_opts.eval_base.index_dir = ablate_opts.base.index_dir;
            ablate_opts.eval_base.prompts_dir = ablate_opts.base.prompts_dir;
            ablate_opts.eval_base.truth = ablate_opts.base.truth;
            ablate_opts.variants.clear();
            for (const std::string& v : split(ablate_variants, ','))
                if (!trim(v).empty()) ablate_opts.variants.push_back(trim(v));
            ablate_opts.steps.clear();
            for (const std::string& s : split(ablate_steps, ','))
                if (!trim(s).empty()) ablate_opts.steps.push_back(std::stoi(trim(s)));
            cli::cmd_ablate(ablate_opts);
        } else if (report->parsed()) {
            std::vector<std::filesystem::path> paths(report_files.begin(), report_files.end());
            cli::cmd_report(paths);
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const BackendError& e) {
        std::cerr << "backend error: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
