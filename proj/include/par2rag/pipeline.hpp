#pragma once
// The two-stage control loop and its comparison variants.
//
// Stage 1 (coverage anchor) plans sub-queries and merges their retrievals
// into an anchored context. Stage 2 (iterative chain) alternates step
// responses with evidence-sufficiency decisions: CONTINUE retrieves with a
// reformulated query, STOP finalizes the answer. Every run emits a complete,
// replayable trace.

#include <atomic>
#include <cstring>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "par2rag/backend.hpp"
#include "par2rag/common.hpp"
#include "par2rag/corpus.hpp"
#include "par2rag/parsers.hpp"
#include "par2rag/prompts.hpp"
#include "par2rag/retrieval.hpp"

namespace par2rag {

constexpr int kTraceVersion = 1;

enum class Variant {
    par2rag,
    coverage_anchor_only,
    iterative_chain_only,
    interleaved_ircot_style,
    cot_no_retrieval,
    direct
};

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::par2rag: return "par2rag";
        case Variant::coverage_anchor_only: return "coverage_anchor_only";
        case Variant::iterative_chain_only: return "iterative_chain_only";
        case Variant::interleaved_ircot_style: return "interleaved_ircot_style";
        case Variant::cot_no_retrieval: return "cot_no_retrieval";
        case Variant::direct: return "direct";
    }
    return "unknown";
}

inline Variant variant_from_name(const std::string& name) {
    for (Variant v : {Variant::par2rag, Variant::coverage_anchor_only,
                      Variant::iterative_chain_only, Variant::interleaved_ircot_style,
                      Variant::cot_no_retrieval, Variant::direct}) {
        if (name == variant_name(v)) return v;
    }
    throw UsageError("unknown variant: " + name);
}

enum class StopReason { esc_stop, budget_exhausted, error_fallback };

inline const char* stop_reason_name(StopReason r) {
    switch (r) {
        case StopReason::esc_stop: return "esc_stop";
        case StopReason::budget_exhausted: return "budget_exhausted";
        case StopReason::error_fallback: return "error_fallback";
    }
    return "unknown";
}

struct PipelineConfig {
    Variant variant = Variant::par2rag;
    int m = 5;           // sub-query budget
    int hop_budget = 5;  // H
    int context_char_cap = 24000;
    bool separate_formulator = false;
    std::string model_id = "scripted";
    double temperature = 0.0;
    int max_tokens = 1024;

    void validate() const {
        if (m < 1) throw UsageError("m must be >= 1");
        if (hop_budget < 1) throw UsageError("hop budget must be >= 1");
        if (context_char_cap <= 0) throw UsageError("context_char_cap must be positive");
    }
};

struct HopRecord {
    int hop_index = 1;
    StepResponse response;
    AgentDecision decision;
    std::optional<RankedList> retrieved;
    int context_size_after = 0;
    bool context_truncated = false;
};

struct RunTrace {
    std::string qid;
    std::string question;
    Variant variant = Variant::par2rag;
    std::optional<SubQueryPlan> plan;
    std::vector<std::string> anchor_entries;
    std::vector<HopRecord> hops;
    std::string final_answer;
    StopReason stop_reason = StopReason::esc_stop;
    std::vector<std::string> flags;
    std::vector<TranscriptEntry> completion_transcript;
    std::string error;  // empty on success
};

namespace trace_json {

inline json ranked_list(const RankedList& list) {
    json entries = json::array();
    for (const ScoredChunk& e : list.entries) entries.push_back(json::array({e.chunk_id, e.score}));
    return json{{"query", list.query}, {"entries", entries}};
}

inline RankedList ranked_list_from(const json& j) {
    RankedList list;
    list.query = j.at("query").get<std::string>();
    for (const json& e : j.at("entries"))
        list.entries.push_back({e.at(0).get<std::string>(), e.at(1).get<double>()});
    return list;
}

inline json decision(const AgentDecision& d) {
    json out{{"action", esc_action_name(d.action)}, {"message", d.message}};
    if (d.next_query) out["next_query"] = *d.next_query;
    return out;
}

inline AgentDecision decision_from(const json& j) {
    AgentDecision d;
    d.action = j.at("action").get<std::string>() == "CONTINUE" ? EscAction::CONTINUE
                                                               : EscAction::STOP;
    d.message = j.at("message").get<std::string>();
    if (j.contains("next_query")) d.next_query = j.at("next_query").get<std::string>();
    return d;
}

}  // namespace trace_json

inline json trace_to_json(const RunTrace& t) {
    json plan = nullptr;
    if (t.plan) {
        json searches = json::array();
        for (const SubQuerySearch& s : t.plan->searches)
            searches.push_back(json{{"reason", s.reason}, {"query", s.query}});
        plan = json{{"searches", searches}};
    }
    json hops = json::array();
    for (const HopRecord& h : t.hops) {
        json hop{{"hop_index", h.hop_index},
                 {"response", {{"text", h.response.text}, {"hop_index", h.response.hop_index}}},
                 {"decision", trace_json::decision(h.decision)},
                 {"retrieved", h.retrieved ? trace_json::ranked_list(*h.retrieved) : json(nullptr)},
                 {"context_size_after", h.context_size_after},
                 {"context_truncated", h.context_truncated}};
        hops.push_back(std::move(hop));
    }
    json transcript = json::array();
    for (const TranscriptEntry& e : t.completion_transcript)
        transcript.push_back(json{{"digest", e.digest}, {"result", e.result.to_json()}});
    return json{{"trace_version", kTraceVersion},
                {"qid", t.qid},
                {"question", t.question},
                {"variant", variant_name(t.variant)},
                {"plan", plan},
                {"anchor_entries", t.anchor_entries},
                {"hops", hops},
                {"final_answer", t.final_answer},
                {"stop_reason", stop_reason_name(t.stop_reason)},
                {"flags", t.flags},
                {"completion_transcript", transcript},
                {"error", t.error}};
}

inline RunTrace trace_from_json(const json& j) {
    RunTrace t;
    t.qid = j.at("qid").get<std::string>();
    t.question = j.at("question").get<std::string>();
    t.variant = variant_from_name(j.at("variant").get<std::string>());
    if (!j.at("plan").is_null()) {
        SubQueryPlan plan;
        for (const json& s : j.at("plan").at("searches"))
            plan.searches.push_back({s.at("reason").get<std::string>(),
                                     s.at("query").get<std::string>()});
        t.plan = std::move(plan);
    }
    t.anchor_entries = j.at("anchor_entries").get<std::vector<std::string>>();
    for (const json& h : j.at("hops")) {
        HopRecord hop;
        hop.hop_index = h.at("hop_index").get<int>();
        hop.response.text = h.at("response").at("text").get<std::string>();
        hop.response.hop_index = h.at("response").at("hop_index").get<int>();
        hop.decision = trace_json::decision_from(h.at("decision"));
        if (!h.at("retrieved").is_null())
            hop.retrieved = trace_json::ranked_list_from(h.at("retrieved"));
        hop.context_size_after = h.at("context_size_after").get<int>();
        hop.context_truncated = h.at("context_truncated").get<bool>();
        t.hops.push_back(std::move(hop));
    }
    t.final_answer = j.at("final_answer").get<std::string>();
    std::string reason = j.at("stop_reason").get<std::string>();
    for (StopReason r : {StopReason::esc_stop, StopReason::budget_exhausted,
                         StopReason::error_fallback}) {
        if (reason == stop_reason_name(r)) t.stop_reason = r;
    }
    t.flags = j.at("flags").get<std::vector<std::string>>();
    for (const json& e : j.at("completion_transcript"))
        t.completion_transcript.push_back(
            {e.at("digest").get<std::string>(), CompletionResult::from_json(e.at("result"))});
    t.error = j.value("error", std::string());
    return t;
}

// Canonical serialization: sorted keys, shortest round-trip numerals. Trace
// digests and replay comparisons operate on these bytes.
inline std::string trace_to_line(const RunTrace& t) { return trace_to_json(t).dump(); }

class Pipeline {
public:
    Pipeline(const CorpusStore& store, const Retriever& retriever, const PromptLibrary& prompts,
             PipelineConfig cfg)
        : store_(store), retriever_(retriever), prompts_(prompts), cfg_(cfg) {
        cfg_.validate();
    }

    const PipelineConfig& config() const { return cfg_; }

    RunTrace run_query(const std::string& qid, const std::string& question,
                       CompletionBackend& backend) const {
        RunTrace trace;
        trace.qid = qid;
        trace.question = question;
        trace.variant = cfg_.variant;
        try {
            switch (cfg_.variant) {
                case Variant::par2rag: {
                    EvidenceContext anchor = run_coverage_anchor(question, trace, backend);
                    trace.anchor_entries = anchor.entries;
                    run_iterative_chain(question, std::move(anchor), trace, backend);
                    break;
                }
                case Variant::coverage_anchor_only: {
                    EvidenceContext anchor = run_coverage_anchor(question, trace, backend);
                    trace.anchor_entries = anchor.entries;
                    single_shot(question, anchor, trace, backend, "writer");
                    break;
                }
                case Variant::iterative_chain_only: {
                    EvidenceContext seed;
                    RankedList first = retriever_.retrieve(question);
                    seed = merge_dedup(std::move(seed), first, EvidenceStage::hop, 0, question);
                    trace.anchor_entries = seed.entries;
                    run_iterative_chain(question, std::move(seed), trace, backend);
                    break;
                }
                case Variant::interleaved_ircot_style:
                    run_interleaved(question, trace, backend);
                    break;
                case Variant::cot_no_retrieval:
                    single_shot(question, EvidenceContext{}, trace, backend, "cot");
                    break;
                case Variant::direct:
                    single_shot(question, EvidenceContext{}, trace, backend, "direct");
                    break;
            }
        } catch (const BackendError& e) {
            trace.error = e.what();
            trace.stop_reason = StopReason::error_fallback;
        } catch (const DataError& e) {
            trace.error = e.what();
            trace.stop_reason = StopReason::error_fallback;
        }
        return trace;
    }

    // Stage 1: plan sub-queries, retrieve each, and merge into the anchor in
    // sub-query order. Planner parse failure falls back (after one retry) to
    // the original question as the whole plan.
    std::pair<SubQueryPlan, EvidenceContext> coverage_anchor(
        const std::string& question, CompletionBackend& backend) const {
        RunTrace scratch;
        EvidenceContext ctx = run_coverage_anchor(question, scratch, backend);
        return {scratch.plan.value_or(SubQueryPlan{}), std::move(ctx)};
    }

    // Stage 2, runnable standalone on any starting context (which may be
    // empty). Returns the final answer and the hop records.
    std::pair<std::string, std::vector<HopRecord>> iterative_chain(
        const std::string& question, EvidenceContext start,
        CompletionBackend& backend) const {
        RunTrace scratch;
        run_iterative_chain(question, std::move(start), scratch, backend);
        return {scratch.final_answer, std::move(scratch.hops)};
    }

private:
    CompletionResult complete_recorded(RunTrace& trace, CompletionBackend& backend,
                                       const CompletionRequest& req) const {
        CompletionResult result = backend.complete(req);
        trace.completion_transcript.push_back({request_digest(req), result});
        return result;
    }

    CompletionRequest make_request(RoleTag role, const RenderedPrompt& prompt) const {
        CompletionRequest req;
        req.role_tag = role;
        req.system_prompt = prompt.system;
        req.user_prompt = prompt.user;
        req.model_id = cfg_.model_id;
        req.temperature = cfg_.temperature;
        req.max_tokens = cfg_.max_tokens;
        return req;
    }

    EvidenceContext run_coverage_anchor(const std::string& question, RunTrace& trace,
                                        CompletionBackend& backend) const {
        RenderedPrompt prompt = render_planner_prompt(prompts_, question, cfg_.m);
        CompletionRequest req = make_request(RoleTag::planner, prompt);

        std::optional<SubQueryPlan> plan;
        for (int attempt = 0; attempt < 2 && !plan; ++attempt) {
            CompletionResult result = complete_recorded(trace, backend, req);
            plan = parse_planner_output(result.text, static_cast<size_t>(cfg_.m));
        }
        if (!plan) {
            plan = SubQueryPlan{{{"fallback to original question", question}}};
            trace.flags.push_back("planner_fallback");
        }
        trace.plan = plan;

        EvidenceContext ctx;
        for (const SubQuerySearch& search : plan->searches) {
            RankedList results = retriever_.retrieve(search.query);
            ctx = merge_dedup(std::move(ctx), results, EvidenceStage::anchor, 0, search.query);
        }
        return ctx;
    }

    // Stage 2, Eq.-1 gate: r_t from the writer, then the controller decides
    // CONTINUE (retrieve q*_{t+1}, grow the context) or STOP (final answer is
    // the latest response).
    void run_iterative_chain(const std::string& question, EvidenceContext ctx, RunTrace& trace,
                             CompletionBackend& backend) const {
        trace.stop_reason = StopReason::budget_exhausted;
        for (int t = 1; t <= cfg_.hop_budget; ++t) {
            HopRecord hop;
            hop.hop_index = t;
            std::string ctx_text =
                render_context(store_, ctx, static_cast<size_t>(cfg_.context_char_cap),
                               &hop.context_truncated);

            CompletionResult writer_result = complete_recorded(
                trace, backend,
                make_request(RoleTag::writer, render_writer_prompt(prompts_, question, ctx_text)));
            hop.response = parse_writer_output(writer_result.text, t);

            CompletionRequest esc_req = make_request(
                RoleTag::esc,
                render_esc_prompt(prompts_, question, hop.response.text, ctx_text));
            std::optional<AgentDecision> decision;
            for (int attempt = 0; attempt < 2 && !decision; ++attempt) {
                CompletionResult esc_result = complete_recorded(trace, backend, esc_req);
                decision = parse_esc_output(esc_result.text);
            }
            if (!decision) {
                hop.decision = {EscAction::STOP, std::nullopt,
                                "esc output unparsable; stopping"};
                hop.context_size_after = static_cast<int>(ctx.size());
                trace.hops.push_back(std::move(hop));
                trace.flags.push_back("esc_fallback hop=" + std::to_string(t));
                trace.stop_reason = StopReason::error_fallback;
                break;
            }

            if (decision->action == EscAction::CONTINUE && cfg_.separate_formulator) {
                if (!reformulate(question, hop.response.text, *decision, trace, backend)) {
                    hop.decision = {EscAction::STOP, std::nullopt,
                                    "formulator output unparsable; stopping"};
                    hop.context_size_after = static_cast<int>(ctx.size());
                    trace.hops.push_back(std::move(hop));
                    trace.flags.push_back("formulator_fallback hop=" + std::to_string(t));
                    trace.stop_reason = StopReason::error_fallback;
                    break;
                }
            }

            hop.decision = *decision;
            if (decision->action == EscAction::STOP) {
                hop.context_size_after = static_cast<int>(ctx.size());
                trace.hops.push_back(std::move(hop));
                trace.stop_reason = StopReason::esc_stop;
                break;
            }

            RankedList fresh = retriever_.retrieve(*decision->next_query);
            ctx = merge_dedup(std::move(ctx), fresh, EvidenceStage::hop, t,
                              *decision->next_query);
            hop.retrieved = std::move(fresh);
            hop.context_size_after = static_cast<int>(ctx.size());
            trace.hops.push_back(std::move(hop));
        }
        trace.final_answer = trace.hops.back().response.text;
    }

    bool reformulate(const std::string& question, const std::string& response,
                     AgentDecision& decision, RunTrace& trace,
                     CompletionBackend& backend) const {
        CompletionRequest req = make_request(
            RoleTag::formulator,
            render_formulator_prompt(prompts_, question, response, decision.message));
        for (int attempt = 0; attempt < 2; ++attempt) {
            CompletionResult result = complete_recorded(trace, backend, req);
            if (auto query = parse_formulator_output(result.text)) {
                decision.next_query = *query;
                return true;
            }
        }
        return false;
    }

    // Single-completion variants: anchor-only synthesis, chain-of-thought,
    // and direct inference. The synthetic STOP decision satisfies the trace
    // schema; no controller runs.
    void single_shot(const std::string& question, const EvidenceContext& ctx, RunTrace& trace,
                     CompletionBackend& backend, const std::string& template_name) const {
        RenderedPrompt prompt;
        HopRecord hop;
        hop.hop_index = 1;
        if (template_name == "writer") {
            std::string ctx_text =
                render_context(store_, ctx, static_cast<size_t>(cfg_.context_char_cap),
                               &hop.context_truncated);
            prompt = render_writer_prompt(prompts_, question, ctx_text);
        } else {
            prompt = prompts_.render(template_name, {{"question", question}});
        }
        CompletionResult result =
            complete_recorded(trace, backend, make_request(RoleTag::writer, prompt));
        hop.response = parse_writer_output(result.text, 1);
        hop.decision = {EscAction::STOP, std::nullopt, "single-shot variant"};
        hop.context_size_after = static_cast<int>(ctx.size());
        trace.hops.push_back(std::move(hop));
        trace.final_answer = trace.hops.back().response.text;
        trace.stop_reason = StopReason::esc_stop;
    }

    void run_interleaved(const std::string& question, RunTrace& trace,
                         CompletionBackend& backend) const {
        static constexpr const char* kAnswerMarker = "so the answer is";
        EvidenceContext ctx;
        std::string reasoning;
        trace.stop_reason = StopReason::budget_exhausted;
        for (int t = 1; t <= cfg_.hop_budget; ++t) {
            HopRecord hop;
            hop.hop_index = t;
            std::string ctx_text =
                render_context(store_, ctx, static_cast<size_t>(cfg_.context_char_cap),
                               &hop.context_truncated);
            CompletionResult result = complete_recorded(
                trace, backend,
                make_request(RoleTag::writer,
                             render_interleaved_prompt(prompts_, question, ctx_text, reasoning)));
            std::string sentence = trim(result.text);

            std::string lowered = to_lower(sentence);
            size_t marker = lowered.find(kAnswerMarker);
            if (marker != std::string::npos) {
                std::string answer = trim(sentence.substr(marker + std::strlen(kAnswerMarker)));
                if (!answer.empty() && answer.front() == ':') answer = trim(answer.substr(1));
                while (!answer.empty() && (answer.back() == '.' || answer.back() == '"'))
                    answer.pop_back();
                hop.response = {answer, t};
                hop.decision = {EscAction::STOP, std::nullopt, "answer marker"};
                hop.context_size_after = static_cast<int>(ctx.size());
                trace.hops.push_back(std::move(hop));
                trace.stop_reason = StopReason::esc_stop;
                break;
            }

            hop.response = {sentence, t};
            hop.decision = {EscAction::CONTINUE, sentence, "interleaved step"};
            RankedList fresh = retriever_.retrieve(sentence);
            ctx = merge_dedup(std::move(ctx), fresh, EvidenceStage::hop, t, sentence);
            hop.retrieved = std::move(fresh);
            hop.context_size_after = static_cast<int>(ctx.size());
            trace.hops.push_back(std::move(hop));
            reasoning += (reasoning.empty() ? "" : "\n") + sentence;
        }
        trace.final_answer = trace.hops.back().response.text;
    }

    const CorpusStore& store_;
    const Retriever& retriever_;
    const PromptLibrary& prompts_;
    PipelineConfig cfg_;
};

// Re-executes a recorded trace against its own completion transcript. The
// result must serialize to the same bytes as the recording.
inline RunTrace replay_trace(const Pipeline& pipeline, const RunTrace& recorded) {
    ReplayBackend backend(recorded.completion_transcript);
    return pipeline.run_query(recorded.qid, recorded.question, backend);
}

class BackendProvider {
public:
    virtual ~BackendProvider() = default;
    virtual std::shared_ptr<CompletionBackend> backend_for(const QaRecord& record) = 0;
};

class SharedBackendProvider : public BackendProvider {
public:
    explicit SharedBackendProvider(std::shared_ptr<CompletionBackend> backend)
        : backend_(std::move(backend)) {}
    std::shared_ptr<CompletionBackend> backend_for(const QaRecord&) override { return backend_; }

private:
    std::shared_ptr<CompletionBackend> backend_;
};

struct BatchOptions {
    int parallelism = 1;
    bool resume = false;
};

struct BatchResult {
    size_t executed = 0;
    size_t skipped = 0;
    size_t failed = 0;  // traces recorded with a non-empty error
};

inline std::unordered_set<std::string> qids_in_trace_file(const std::filesystem::path& path) {
    std::unordered_set<std::string> qids;
    if (!std::filesystem::exists(path)) return qids;
    for_each_jsonl(path, [&](size_t, const json& rec) {
        qids.insert(rec.at("qid").get<std::string>());
    });
    return qids;
}

inline std::vector<RunTrace> load_trace_file(const std::filesystem::path& path) {
    std::vector<RunTrace> traces;
    for_each_jsonl(path, [&](size_t, const json& rec) {
        traces.push_back(trace_from_json(rec));
    });
    return traces;
}

// Runs the dataset through the pipeline, persisting traces in completion
// order. Already-persisted qids are skipped when resuming; per-query errors
// are recorded in their traces and the batch continues.
inline BatchResult run_batch(const Pipeline& pipeline, const std::vector<QaRecord>& records,
                             BackendProvider& provider, const std::filesystem::path& trace_path,
                             const BatchOptions& opts = {}) {
    if (opts.parallelism < 1) throw UsageError("parallelism must be >= 1");
    std::unordered_set<std::string> done;
    if (opts.resume) done = qids_in_trace_file(trace_path);

    std::vector<const QaRecord*> todo;
    for (const QaRecord& r : records) {
        if (done.count(r.qid) == 0) todo.push_back(&r);
    }

    BatchResult result;
    result.skipped = records.size() - todo.size();

    JsonlWriter sink(trace_path, opts.resume);
    std::mutex sink_mu;
    std::atomic<size_t> next{0};
    std::atomic<size_t> failed{0};

    auto worker = [&] {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= todo.size()) return;
            const QaRecord& record = *todo[i];
            auto backend = provider.backend_for(record);
            RunTrace trace = pipeline.run_query(record.qid, record.question, *backend);
            if (!trace.error.empty()) failed.fetch_add(1);
            std::lock_guard<std::mutex> lock(sink_mu);
            sink.write(trace_to_json(trace));
        }
    };

    if (opts.parallelism == 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        for (int i = 0; i < opts.parallelism; ++i) threads.emplace_back(worker);
        for (std::thread& th : threads) th.join();
    }

    result.executed = todo.size();
    result.failed = failed.load();
    return result;
}

}  // namespace par2rag
