#pragma once
// Command implementations behind the command-line tool: ingest, run, eval,
// ablate, report, gen. The binary in tools/ parses flags and dispatches here;
// tests call these functions directly.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "par2rag/backend.hpp"
#include "par2rag/common.hpp"
#include "par2rag/corpus.hpp"
#include "par2rag/metrics.hpp"
#include "par2rag/pipeline.hpp"
#include "par2rag/prompts.hpp"
#include "par2rag/retrieval.hpp"
#include "par2rag/synthetic.hpp"

namespace par2rag::cli {

constexpr const char* kApiKeyEnv = "PAR2RAG_API_KEY";

// Owns the pieces a run needs, in construction order: the index and the
// retriever hold references into the store.
struct Workspace {
    CorpusStore store;
    std::unique_ptr<LexicalIndex> index;
    std::unique_ptr<Retriever> retriever;
    PromptLibrary prompts;

    Workspace(const std::filesystem::path& index_dir, const RetrievalConfig& retrieval,
              const std::filesystem::path& prompts_dir)
        : store(CorpusStore::load(index_dir)),
          index(std::make_unique<LexicalIndex>(store.chunks())),
          retriever(std::make_unique<Retriever>(*index, store, retrieval)),
          prompts(PromptLibrary::load(prompts_dir)) {}
};

struct IngestOptions {
    std::filesystem::path corpus;
    std::filesystem::path index_dir;
    ChunkingConfig chunking;
};

inline CorpusStats cmd_ingest(const IngestOptions& opts, std::ostream& out = std::cout) {
    CorpusStore store;
    CorpusStats stats = store.ingest(opts.corpus, opts.chunking);
    store.save(opts.index_dir);
    json meta{{"corpus_file", opts.corpus.string()},
              {"corpus_digest", sha256_file(opts.corpus)},
              {"chunks_digest", store.content_digest()},
              {"chunking",
               {{"max_chars", opts.chunking.max_chars},
                {"overlap_chars", opts.chunking.overlap_chars},
                {"split_on_boundaries", opts.chunking.split_on_boundaries}}}};
    write_file(opts.index_dir / "meta.json", meta.dump(2) + "\n");
    out << stats.to_json().dump() << "\n";
    return stats;
}

struct RunOptions {
    std::filesystem::path index_dir;
    std::filesystem::path dataset;
    std::filesystem::path out_traces;
    std::filesystem::path prompts_dir;
    std::filesystem::path truth;      // oracle backend
    std::filesystem::path cache_dir;  // http backend response cache
    PipelineConfig pipeline;
    RetrievalConfig retrieval;
    std::string backend_kind = "oracle";  // oracle | http
    std::string oracle_planner = "gold_titles";
    std::string base_url = "http://localhost:8080";
    int steps = 0;  // > 0 drives both m and the hop budget
    int parallelism = 1;
    bool resume = false;
    int max_in_flight = 4;             // http backend in-flight bound
    double requests_per_second = 0.0;  // http backend token bucket; 0 = off
};

struct RunOutcome {
    BatchResult batch;
    std::filesystem::path traces;
    std::filesystem::path manifest;
};

namespace detail {

inline std::shared_ptr<BackendProvider> make_provider(const RunOptions& opts) {
    if (opts.backend_kind == "oracle") {
        if (opts.truth.empty())
            throw UsageError("--backend oracle requires --truth <truth.jsonl>");
        OraclePlannerMode mode = opts.oracle_planner == "identity"
                                     ? OraclePlannerMode::identity
                                     : OraclePlannerMode::gold_titles;
        auto backend = std::make_shared<OracleBackend>(load_truth_file(opts.truth), mode);
        return std::make_shared<SharedBackendProvider>(backend);
    }
    if (opts.backend_kind == "http") {
        HttpBackendConfig cfg;
        cfg.base_url = opts.base_url;
        cfg.cache_dir = opts.cache_dir;
        cfg.max_in_flight = opts.max_in_flight;
        cfg.requests_per_second = opts.requests_per_second;
        if (const char* key = std::getenv(kApiKeyEnv)) cfg.api_key = key;
        return std::make_shared<SharedBackendProvider>(std::make_shared<HttpBackend>(cfg));
    }
    throw UsageError("unknown backend kind: " + opts.backend_kind);
}

inline std::string utc_now() {
    std::time_t now = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    return buf;
}

inline json config_snapshot(const RunOptions& opts, const PipelineConfig& pipeline,
                            const PromptLibrary& prompts) {
    return json{
        {"variant", variant_name(pipeline.variant)},
        {"m", pipeline.m},
        {"hop_budget", pipeline.hop_budget},
        {"context_char_cap", pipeline.context_char_cap},
        {"separate_formulator", pipeline.separate_formulator},
        {"model_id", pipeline.model_id},
        {"temperature", pipeline.temperature},
        {"max_tokens", pipeline.max_tokens},
        {"retrieval",
         {{"candidate_k", opts.retrieval.candidate_k},
          {"final_k", opts.retrieval.final_k},
          {"fusion", opts.retrieval.fusion == FusionMode::rrf_fusion ? "rrf_fusion" : "lexical_only"},
          {"rrf_constant", opts.retrieval.rrf_constant}}},
        {"backend",
         {{"kind", opts.backend_kind},
          {"base_url", opts.backend_kind == "http" ? opts.base_url : ""},
          {"api_key_env", std::string(kApiKeyEnv)},  // name only; the key is never persisted
          {"oracle_planner", opts.oracle_planner}}},
        {"prompts", {{"dir", opts.prompts_dir.string()}, {"version", prompts.version()}, {"digest", prompts.digest()}}},
        {"index_dir", opts.index_dir.string()},
        {"dataset", {{"path", opts.dataset.string()}, {"sha256", sha256_file(opts.dataset)}}},
        {"truth", opts.truth.empty()
                      ? json(nullptr)
                      : json{{"path", opts.truth.string()}, {"sha256", sha256_file(opts.truth)}}}};
}

}  // namespace detail

inline RunOutcome cmd_run(const RunOptions& opts, std::ostream& out = std::cout) {
    PipelineConfig pipeline_cfg = opts.pipeline;
    if (opts.steps > 0) {
        pipeline_cfg.m = opts.steps;
        pipeline_cfg.hop_budget = opts.steps;
    }
    Workspace ws(opts.index_dir, opts.retrieval, opts.prompts_dir);
    Pipeline pipeline(ws.store, *ws.retriever, ws.prompts, pipeline_cfg);
    auto provider = detail::make_provider(opts);
    std::vector<QaRecord> records = load_qa_file(opts.dataset);

    json snapshot = detail::config_snapshot(opts, pipeline_cfg, ws.prompts);
    std::string run_id = sha256_hex(snapshot.dump()).substr(0, 12);
    std::string started = detail::utc_now();

    BatchOptions batch_opts;
    batch_opts.parallelism = opts.parallelism;
    batch_opts.resume = opts.resume;
    BatchResult batch = run_batch(pipeline, records, *provider, opts.out_traces, batch_opts);

    RunOutcome outcome;
    outcome.batch = batch;
    outcome.traces = opts.out_traces;
    outcome.manifest = opts.out_traces.string() + ".manifest.json";
    json manifest{{"run_id", run_id},
                  {"started_utc", started},
                  {"finished_utc", detail::utc_now()},
                  {"config", snapshot},
                  {"trace_version", kTraceVersion},
                  {"artifacts", {{"traces", opts.out_traces.string()}}},
                  {"result",
                   {{"executed", batch.executed},
                    {"skipped", batch.skipped},
                    {"failed", batch.failed}}}};
    write_file(outcome.manifest, manifest.dump(2) + "\n");
    out << json{{"run_id", run_id},
                {"executed", batch.executed},
                {"skipped", batch.skipped},
                {"failed", batch.failed},
                {"traces", opts.out_traces.string()}}
               .dump()
        << "\n";
    return outcome;
}

struct EvalOptions {
    std::filesystem::path traces;
    std::filesystem::path dataset;
    std::filesystem::path index_dir;
    std::filesystem::path out_prefix;  // writes <prefix>.per_query.jsonl + <prefix>.report.json
    std::filesystem::path prompts_dir;
    std::filesystem::path truth;  // oracle-backed template judge
    std::string judge = "exact";  // exact | template
    std::string backend_kind = "oracle";
    std::string base_url = "http://localhost:8080";
    std::string model_id = "scripted";
};

inline MetricReport cmd_eval(const EvalOptions& opts, std::ostream& out = std::cout) {
    CorpusStore store = CorpusStore::load(opts.index_dir);
    std::vector<RunTrace> traces = load_trace_file(opts.traces);
    std::vector<QaRecord> records = load_qa_file(opts.dataset);

    std::shared_ptr<CompletionBackend> backend;
    std::unique_ptr<PromptLibrary> prompts;
    std::unique_ptr<CorrectnessJudge> judge;
    if (opts.judge == "exact") {
        judge = std::make_unique<ExactMatchJudge>();
    } else if (opts.judge == "template") {
        prompts = std::make_unique<PromptLibrary>(PromptLibrary::load(opts.prompts_dir));
        if (opts.backend_kind == "oracle") {
            if (opts.truth.empty())
                throw UsageError("template judge with oracle backend requires --truth");
            backend = std::make_shared<OracleBackend>(load_truth_file(opts.truth),
                                                      OraclePlannerMode::gold_titles);
        } else {
            HttpBackendConfig cfg;
            cfg.base_url = opts.base_url;
            if (const char* key = std::getenv(kApiKeyEnv)) cfg.api_key = key;
            backend = std::make_shared<HttpBackend>(cfg);
        }
        judge = std::make_unique<TemplateJudge>(*backend, *prompts, opts.model_id);
    } else {
        throw UsageError("unknown judge: " + opts.judge);
    }

    MetricReport report = evaluate_traces(traces, records, store, *judge);
    std::filesystem::path per_query = opts.out_prefix.string() + ".per_query.jsonl";
    std::filesystem::path report_path = opts.out_prefix.string() + ".report.json";
    write_report_files(report, per_query, report_path);
    out << report.to_json().dump() << "\n";
    return report;
}

struct AblateOptions {
    RunOptions base;
    EvalOptions eval_base;
    std::vector<std::string> variants;
    std::vector<int> steps = {3, 5, 7, 10};
    std::filesystem::path out_dir;
};

struct AblateCell {
    std::string variant;
    int steps = 0;
    bool failed = false;
    std::string error;
    MetricReport report;
    std::filesystem::path traces;
    std::filesystem::path report_path;
};

inline std::string render_ablation_table(const std::vector<AblateCell>& cells,
                                         const std::vector<std::string>& variants,
                                         const std::vector<int>& steps) {
    auto find = [&](const std::string& v, int s) -> const AblateCell* {
        for (const AblateCell& c : cells) {
            if (c.variant == v && c.steps == s) return &c;
        }
        return nullptr;
    };
    std::ostringstream out;
    out << "variant                  ";
    for (int s : steps) {
        std::ostringstream head;
        head << "steps=" << s;
        out << " | " << head.str();
        for (size_t i = head.str().size(); i < 33; ++i) out << ' ';
    }
    out << "\n";
    for (const std::string& v : variants) {
        std::ostringstream row;
        row << v;
        for (size_t i = v.size(); i < 25; ++i) row << ' ';
        for (int s : steps) {
            const AblateCell* c = find(v, s);
            char buf[64];
            if (c == nullptr || c->failed) {
                std::snprintf(buf, sizeof(buf), "(failed)");
            } else {
                const MetricAggregates& a = c->report.aggregates;
                std::snprintf(buf, sizeof(buf), "C=%.3f R=%.3f N=%.3f A=%.3f", a.correct,
                              a.recall, a.ndcg, a.all_pass);
            }
            row << " | " << buf;
            for (size_t i = std::strlen(buf); i < 33; ++i) row << ' ';
        }
        out << row.str() << "\n";
    }
    return out.str();
}

// Runs every (variant, steps) cell, reusing the shared completion cache, and
// renders plain-text and machine-readable comparison tables. Per-cell
// failures leave marked holes and the sweep continues.
inline std::vector<AblateCell> cmd_ablate(const AblateOptions& opts,
                                          std::ostream& out = std::cout) {
    if (opts.variants.empty()) throw UsageError("ablate requires at least one variant");
    if (opts.steps.empty()) throw UsageError("ablate requires at least one steps value");
    std::filesystem::create_directories(opts.out_dir);

    std::vector<AblateCell> cells;
    for (const std::string& variant : opts.variants) {
        for (int steps : opts.steps) {
            AblateCell cell;
            cell.variant = variant;
            cell.steps = steps;
            std::string stem = variant + "_steps" + std::to_string(steps);
            cell.traces = opts.out_dir / (stem + ".traces.jsonl");
            try {
                RunOptions run_opts = opts.base;
                run_opts.pipeline.variant = variant_from_name(variant);
                run_opts.steps = steps;
                run_opts.out_traces = cell.traces;
                std::ostringstream sink;
                cmd_run(run_opts, sink);

                EvalOptions eval_opts = opts.eval_base;
                eval_opts.traces = cell.traces;
                eval_opts.out_prefix = opts.out_dir / stem;
                cell.report = cmd_eval(eval_opts, sink);
                cell.report_path = opts.out_dir / (stem + ".report.json");
            } catch (const std::exception& e) {
                cell.failed = true;
                cell.error = e.what();
            }
            cells.push_back(std::move(cell));
        }
    }

    std::string table = render_ablation_table(cells, opts.variants, opts.steps);
    write_file(opts.out_dir / "table.txt", table);
    json machine{{"steps", opts.steps}, {"variants", opts.variants}, {"cells", json::array()}};
    for (const AblateCell& c : cells) {
        json cell{{"variant", c.variant}, {"steps", c.steps}, {"failed", c.failed}};
        if (c.failed) {
            cell["error"] = c.error;
        } else {
            cell["aggregates"] = c.report.aggregates.to_json();
            cell["traces"] = c.traces.string();
            cell["report"] = c.report_path.string();
        }
        machine["cells"].push_back(std::move(cell));
    }
    write_file(opts.out_dir / "table.json", machine.dump(2) + "\n");
    out << table;
    return cells;
}

inline void cmd_report(const std::vector<std::filesystem::path>& report_files,
                       std::ostream& out = std::cout) {
    if (report_files.empty()) throw UsageError("report requires at least one report file");
    out << "report                                    correct  recall   ndcg     all_pass  n\n";
    for (const auto& path : report_files) {
        json r = json::parse(read_file(path));
        const json& a = r.at("aggregates");
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-41s %.4f   %.4f   %.4f   %.4f    %zu",
                      path.filename().string().c_str(), a.at("correct").get<double>(),
                      a.at("recall").get<double>(), a.at("ndcg").get<double>(),
                      a.at("all_pass").get<double>(),
                      r.at("n_queries").get<size_t>());
        out << buf << "\n";
    }
}

struct GenOptions {
    ChainSpec spec;
    std::filesystem::path out_dir;
    bool post_check = true;
};

inline GeneratedBench cmd_gen(const GenOptions& opts, std::ostream& out = std::cout) {
    GeneratedBench bench = generate(opts.spec, opts.out_dir, opts.post_check);
    out << json{{"corpus", bench.corpus_path.string()},
                {"qa", bench.qa_path.string()},
                {"truth", bench.truth_path.string()},
                {"n_documents", bench.n_documents},
                {"n_queries", bench.n_queries}}
               .dump()
        << "\n";
    return bench;
}

}  // namespace par2rag::cli
