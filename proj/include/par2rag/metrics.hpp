#pragma once
// Answer- and retrieval-quality metrics over run traces.
//
// Retrieval metrics operate on the run-level deduplicated document ranking:
// retrieved chunk ids (anchor first, then hop retrievals, first-occurrence
// order) mapped to parent doc ids. Recall is the binary any-hit indicator,
// All-Pass requires every gold document, NDCG uses binary relevance with the
// 2^rel - 1 gain form.

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "par2rag/backend.hpp"
#include "par2rag/common.hpp"
#include "par2rag/corpus.hpp"
#include "par2rag/pipeline.hpp"
#include "par2rag/prompts.hpp"

namespace par2rag {

constexpr int kReportVersion = 1;

struct RetrievalJudgment {
    std::string qid;
    std::vector<std::string> retrieved_doc_ids_ordered;  // deduplicated
    std::set<std::string> gold_doc_ids;
    int n_required = 1;
};

inline int recall_any_hit(const RetrievalJudgment& j) {
    if (j.gold_doc_ids.empty()) throw DataError("empty gold set for qid " + j.qid);
    for (const std::string& doc : j.retrieved_doc_ids_ordered) {
        if (j.gold_doc_ids.count(doc) > 0) return 1;
    }
    return 0;
}

inline int all_pass(const RetrievalJudgment& j) {
    if (j.gold_doc_ids.empty()) throw DataError("empty gold set for qid " + j.qid);
    std::unordered_set<std::string> retrieved(j.retrieved_doc_ids_ordered.begin(),
                                              j.retrieved_doc_ids_ordered.end());
    for (const std::string& gold : j.gold_doc_ids) {
        if (retrieved.count(gold) == 0) return 0;
    }
    return 1;
}

// DCG@k = sum_i (2^rel_i - 1) / log2(i + 1), binary relevance; IDCG places
// min(k, |gold|) relevant documents at the top. Empty retrieval scores 0.
inline double ndcg_at_k(const RetrievalJudgment& j, std::optional<size_t> k = std::nullopt) {
    if (j.gold_doc_ids.empty()) throw DataError("empty gold set for qid " + j.qid);
    if (j.retrieved_doc_ids_ordered.empty()) return 0.0;
    size_t cutoff = k.value_or(j.retrieved_doc_ids_ordered.size());
    double dcg = 0.0;
    for (size_t i = 0; i < std::min(cutoff, j.retrieved_doc_ids_ordered.size()); ++i) {
        double rel = j.gold_doc_ids.count(j.retrieved_doc_ids_ordered[i]) > 0 ? 1.0 : 0.0;
        dcg += (std::pow(2.0, rel) - 1.0) / std::log2(static_cast<double>(i) + 2.0);
    }
    double idcg = 0.0;
    size_t ideal = std::min(cutoff, j.gold_doc_ids.size());
    for (size_t i = 0; i < ideal; ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
    return idcg > 0.0 ? dcg / idcg : 0.0;
}

// Collects the trace's retrieved chunks (anchor entries, then each hop's
// retrieval, in rank order), maps them to parent documents, and deduplicates
// preserving first occurrence.
inline RetrievalJudgment judgment_from_trace(const RunTrace& trace, const QaRecord& qa,
                                             const CorpusStore& corpus) {
    RetrievalJudgment j;
    j.qid = trace.qid;
    j.gold_doc_ids.insert(qa.gold_doc_ids.begin(), qa.gold_doc_ids.end());
    j.n_required = qa.n_required > 0 ? qa.n_required : static_cast<int>(qa.gold_doc_ids.size());

    std::unordered_set<std::string> seen;
    auto add_chunk = [&](const std::string& chunk_id) {
        const std::string& doc_id = corpus.get_chunk(chunk_id).doc_id;
        if (seen.insert(doc_id).second) j.retrieved_doc_ids_ordered.push_back(doc_id);
    };
    for (const std::string& chunk_id : trace.anchor_entries) add_chunk(chunk_id);
    for (const HopRecord& hop : trace.hops) {
        if (!hop.retrieved) continue;
        for (const ScoredChunk& e : hop.retrieved->entries) add_chunk(e.chunk_id);
    }
    return j;
}

struct JudgeVerdict {
    int correct = 0;
    bool unparsed = false;
};

class CorrectnessJudge {
public:
    virtual ~CorrectnessJudge() = default;
    virtual std::string name() const = 0;
    virtual JudgeVerdict judge(const std::string& question, const std::string& predicted,
                               const std::string& gold_answer) = 0;
};

// Deterministic test judge: correct iff the trimmed strings are equal.
class ExactMatchJudge : public CorrectnessJudge {
public:
    std::string name() const override { return "exact"; }
    JudgeVerdict judge(const std::string&, const std::string& predicted,
                       const std::string& gold_answer) override {
        return {trim(predicted) == trim(gold_answer) ? 1 : 0, false};
    }
};

// Template-driven judge: renders the correctness prompt and scores 1 iff the
// Decision line contains "yes" (case-insensitive). A missing Decision line is
// retried once, then scored 0 and flagged.
class TemplateJudge : public CorrectnessJudge {
public:
    TemplateJudge(CompletionBackend& backend, const PromptLibrary& prompts, std::string model_id,
                  double temperature = 0.0, int max_tokens = 256)
        : backend_(backend),
          prompts_(prompts),
          model_id_(std::move(model_id)),
          temperature_(temperature),
          max_tokens_(max_tokens) {}

    std::string name() const override { return "template"; }

    JudgeVerdict judge(const std::string& question, const std::string& predicted,
                       const std::string& gold_answer) override {
        RenderedPrompt prompt = render_judge_prompt(prompts_, question, predicted, gold_answer);
        CompletionRequest req;
        req.role_tag = RoleTag::judge;
        req.system_prompt = prompt.system;
        req.user_prompt = prompt.user;
        req.model_id = model_id_;
        req.temperature = temperature_;
        req.max_tokens = max_tokens_;
        for (int attempt = 0; attempt < 2; ++attempt) {
            CompletionResult result = backend_.complete(req);
            if (auto decision = decision_line(result.text))
                return {contains_ci(*decision, "yes") ? 1 : 0, false};
        }
        return {0, true};
    }

    static std::optional<std::string> decision_line(const std::string& text) {
        std::string lowered = to_lower(text);
        size_t pos = lowered.rfind("decision:");
        if (pos == std::string::npos) return std::nullopt;
        size_t eol = text.find('\n', pos);
        return text.substr(pos + 9, (eol == std::string::npos ? text.size() : eol) - pos - 9);
    }

private:
    CompletionBackend& backend_;
    const PromptLibrary& prompts_;
    std::string model_id_;
    double temperature_;
    int max_tokens_;
};

struct PerQueryMetrics {
    std::string qid;
    int correct = 0;
    int recall = 0;
    double ndcg = 0.0;
    int all_pass = 0;
    int n_required = 1;
    bool judge_unparsed = false;

    json to_json() const {
        json out{{"schema_version", kReportVersion},
                 {"qid", qid},
                 {"correct", correct},
                 {"recall", recall},
                 {"ndcg", ndcg},
                 {"all_pass", all_pass},
                 {"n_required", n_required}};
        if (judge_unparsed) out["judge_unparsed"] = true;
        return out;
    }
};

struct MetricAggregates {
    double correct = 0.0;
    double recall = 0.0;
    double ndcg = 0.0;
    double all_pass = 0.0;
    size_t count = 0;

    json to_json() const {
        return json{{"correct", correct},
                    {"recall", recall},
                    {"ndcg", ndcg},
                    {"all_pass", all_pass},
                    {"count", count}};
    }
};

struct MetricReport {
    std::vector<PerQueryMetrics> per_query;
    MetricAggregates aggregates;
    std::map<int, MetricAggregates> by_required_length;
    size_t n_queries = 0;

    json to_json() const {
        json by_len = json::object();
        for (const auto& [n, agg] : by_required_length)
            by_len[std::to_string(n)] = agg.to_json();
        return json{{"report_version", kReportVersion},
                    {"n_queries", n_queries},
                    {"aggregates", aggregates.to_json()},
                    {"by_required_length", by_len}};
    }
};

namespace detail {

inline MetricAggregates mean_of(const std::vector<const PerQueryMetrics*>& rows) {
    MetricAggregates agg;
    agg.count = rows.size();
    if (rows.empty()) return agg;
    for (const PerQueryMetrics* r : rows) {
        agg.correct += r->correct;
        agg.recall += r->recall;
        agg.ndcg += r->ndcg;
        agg.all_pass += r->all_pass;
    }
    double n = static_cast<double>(rows.size());
    agg.correct /= n;
    agg.recall /= n;
    agg.ndcg /= n;
    agg.all_pass /= n;
    return agg;
}

}  // namespace detail

// Arithmetic means over the per-query rows plus per-required-length groups.
inline MetricReport aggregate(std::vector<PerQueryMetrics> rows) {
    MetricReport report;
    report.per_query = std::move(rows);
    report.n_queries = report.per_query.size();

    std::vector<const PerQueryMetrics*> all;
    std::map<int, std::vector<const PerQueryMetrics*>> groups;
    for (const PerQueryMetrics& r : report.per_query) {
        all.push_back(&r);
        groups[r.n_required].push_back(&r);
    }
    report.aggregates = detail::mean_of(all);
    for (const auto& [n, group] : groups) report.by_required_length[n] = detail::mean_of(group);
    return report;
}

// Scores every trace against its QA record. Trace and dataset qid sets must
// match exactly.
inline MetricReport evaluate_traces(const std::vector<RunTrace>& traces,
                                    const std::vector<QaRecord>& qa_records,
                                    const CorpusStore& corpus, CorrectnessJudge& judge) {
    std::map<std::string, const QaRecord*> by_qid;
    for (const QaRecord& r : qa_records) by_qid[r.qid] = &r;

    std::vector<std::string> missing;
    std::unordered_set<std::string> trace_qids;
    for (const RunTrace& t : traces) trace_qids.insert(t.qid);
    for (const QaRecord& r : qa_records) {
        if (trace_qids.count(r.qid) == 0) missing.push_back(r.qid);
    }
    if (!missing.empty()) {
        std::string msg = "traces missing for qids:";
        for (const std::string& qid : missing) msg += " " + qid;
        throw DataError(msg);
    }

    std::vector<PerQueryMetrics> rows;
    rows.reserve(traces.size());
    for (const RunTrace& trace : traces) {
        auto it = by_qid.find(trace.qid);
        if (it == by_qid.end()) throw DataError("trace qid not in dataset: " + trace.qid);
        const QaRecord& qa = *it->second;
        RetrievalJudgment j = judgment_from_trace(trace, qa, corpus);
        PerQueryMetrics row;
        row.qid = trace.qid;
        row.recall = recall_any_hit(j);
        row.all_pass = all_pass(j);
        row.ndcg = ndcg_at_k(j);
        row.n_required = j.n_required;
        JudgeVerdict verdict = judge.judge(qa.question, trace.final_answer, qa.answer);
        row.correct = verdict.correct;
        row.judge_unparsed = verdict.unparsed;
        rows.push_back(std::move(row));
    }
    return aggregate(std::move(rows));
}

inline void write_report_files(const MetricReport& report,
                               const std::filesystem::path& per_query_path,
                               const std::filesystem::path& report_path) {
    JsonlWriter per_query(per_query_path);
    for (const PerQueryMetrics& row : report.per_query) per_query.write(row.to_json());
    write_file(report_path, report.to_json().dump(2) + "\n");
}

}  // namespace par2rag
