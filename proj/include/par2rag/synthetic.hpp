#pragma once
// Deterministic synthetic multi-hop corpora with planted gold chains,
// near-miss distractors, and oracle scripted agents.
//
// Each query plants a chain e_0 -> e_1 -> ... -> e_h of corpus-unique
// entity tokens, one gold document per hop fact "e_{i-1} relates to e_i".
// The hop-i document is titled by its head entity e_{i-1} and mentions the
// head more often than the tail, so a title query ranks it first and leaks
// at most backward (hop i-1, already covered), never forward. Near-miss
// distractors repeat e_0 with wrong tails, so retrieval on the question
// alone can never cover hops beyond the first.

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "par2rag/backend.hpp"
#include "par2rag/common.hpp"
#include "par2rag/corpus.hpp"
#include "par2rag/retrieval.hpp"

namespace par2rag {

struct ChainSpec {
    int n_queries = 200;
    std::vector<int> hop_choices = {2, 3, 4};  // stratified round-robin
    int distractors_per_gold = 5;
    double near_miss_rate = 0.6;
    uint64_t seed = 42;

    void validate() const {
        if (n_queries < 1) throw UsageError("n_queries must be >= 1");
        if (hop_choices.empty()) throw UsageError("hop_choices must be non-empty");
        for (int h : hop_choices) {
            if (h < 2 || h > 4) throw UsageError("hops_per_query must be in [2,4]");
        }
        if (distractors_per_gold < 0) throw UsageError("distractors_per_gold must be >= 0");
        if (near_miss_rate < 0.0 || near_miss_rate > 1.0)
            throw UsageError("near_miss_rate must be in [0,1]");
    }
};

struct TruthRecord {
    std::string qid;
    std::vector<std::string> chain;  // e_0 .. e_h
    std::vector<std::string> gold_doc_ids;
    std::string answer;  // e_h
    int n_required = 0;  // h
};

struct GeneratedBench {
    std::filesystem::path corpus_path;
    std::filesystem::path qa_path;
    std::filesystem::path truth_path;
    size_t n_documents = 0;
    size_t n_queries = 0;
    std::vector<TruthRecord> truth;
};

// Locator token unique to the hop's gold document; tokenizes as one word.
inline std::string hop_locator(const std::string& qid, int hop) {
    return "loc" + qid + "g" + std::to_string(hop);
}

// Gold title: head entity plus the document's locator. A query equal to the
// title covers two tokens only the gold document contains together, so it
// ranks first under both BM25 and the coverage reranker.
inline std::string hop_title(const TruthRecord& t, int hop) {
    return t.chain[hop - 1] + " " + hop_locator(t.qid, hop);
}

inline std::string synthetic_question(const std::string& head_entity) {
    return "Which entity is finally reached by a chain starting from " + head_entity + "?";
}

namespace detail {

// Pronounceable nonsense tokens; corpus-unique by construction.
class EntityMinter {
public:
    explicit EntityMinter(uint64_t seed) : eng_(seed) {}

    std::string mint() {
        static constexpr const char* kConsonants = "bdfgklmnprstvz";
        static constexpr const char* kVowels = "aeiou";
        for (;;) {
            std::string token;
            for (int i = 0; i < 4; ++i) {
                token.push_back(kConsonants[eng_() % 14]);
                token.push_back(kVowels[eng_() % 5]);
            }
            if (used_.insert(token).second) return token;
        }
    }

private:
    std::mt19937_64 eng_;
    std::unordered_set<std::string> used_;
};

// Head appears five times per document (title plus four body mentions), the
// tail three times; the head slot therefore outranks the tail slot under BM25.
inline std::string gold_body(const std::string& head, const std::string& tail) {
    return "Archive notes describe how " + head + " stands in liaison with " + tail +
           ". Ledger files further link " + head + " with " + tail + ". Curators connect " +
           head + " directly with " + tail + ", citing " + head + " throughout.";
}

inline std::string distractor_body(const std::string& head, const std::string& tail) {
    return "Stray notes mention " + head + " beside " + tail +
           " without more detail. Filed papers wander across assorted unrelated shelf business "
           "for several pages before trailing off.";
}

inline std::string pad_qid(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "q%04d", i);
    return buf;
}

}  // namespace detail

// Retrieval sanity check on the emitted corpus: every gold document must come
// back at rank 1 for a query equal to its title. A violation is a generator
// construction bug.
inline void verify_generated(const GeneratedBench& bench) {
    CorpusStore store;
    store.ingest(bench.corpus_path, ChunkingConfig{});
    LexicalIndex index(store.chunks());
    Retriever retriever(index, store, RetrievalConfig{});
    for (const TruthRecord& t : bench.truth) {
        for (int hop = 1; hop <= t.n_required; ++hop) {
            RankedList got = retriever.retrieve(hop_title(t, hop));
            std::string expect = t.gold_doc_ids[hop - 1] + "#0";
            if (got.empty() || got.entries.front().chunk_id != expect)
                throw std::logic_error("synthetic post-check failed: title query for " + expect +
                                       " did not rank it first");
        }
    }
}

// Emits corpus.jsonl / qa.jsonl / truth.jsonl under out_dir. Byte-identical
// across runs for an identical spec.
inline GeneratedBench generate(const ChainSpec& spec, const std::filesystem::path& out_dir,
                               bool run_post_check = true) {
    spec.validate();
    std::filesystem::create_directories(out_dir);

    GeneratedBench bench;
    bench.corpus_path = out_dir / "corpus.jsonl";
    bench.qa_path = out_dir / "qa.jsonl";
    bench.truth_path = out_dir / "truth.jsonl";

    detail::EntityMinter minter(spec.seed);
    JsonlWriter corpus(bench.corpus_path);
    JsonlWriter qa(bench.qa_path);
    JsonlWriter truth_out(bench.truth_path);

    for (int qi = 0; qi < spec.n_queries; ++qi) {
        int hops = spec.hop_choices[qi % spec.hop_choices.size()];
        TruthRecord t;
        t.qid = detail::pad_qid(qi);
        t.n_required = hops;
        for (int i = 0; i <= hops; ++i) t.chain.push_back(minter.mint());
        t.answer = t.chain.back();

        for (int hop = 1; hop <= hops; ++hop) {
            std::string doc_id = t.qid + "-g" + std::to_string(hop);
            t.gold_doc_ids.push_back(doc_id);
            corpus.write(json{{"doc_id", doc_id},
                              {"title", hop_title(t, hop)},
                              {"text", detail::gold_body(t.chain[hop - 1], t.chain[hop])}});
            ++bench.n_documents;
        }

        int n_distractors = hops * spec.distractors_per_gold;
        int n_near = static_cast<int>(spec.near_miss_rate * n_distractors + 0.5);
        for (int d = 0; d < n_distractors; ++d) {
            std::string doc_id = t.qid + "-x" + std::to_string(d);
            std::string head = d < n_near ? t.chain.front() : minter.mint();
            std::string tail = minter.mint();
            corpus.write(json{{"doc_id", doc_id},
                              {"title", head + " " + tail},
                              {"text", detail::distractor_body(head, tail)}});
            ++bench.n_documents;
        }

        qa.write(json{{"qid", t.qid},
                      {"question", synthetic_question(t.chain.front())},
                      {"answer", t.answer},
                      {"gold_doc_ids", t.gold_doc_ids},
                      {"n_required", t.n_required}});
        truth_out.write(json{{"qid", t.qid},
                             {"chain", t.chain},
                             {"gold_doc_ids", t.gold_doc_ids},
                             {"answer", t.answer},
                             {"n_required", t.n_required}});
        bench.truth.push_back(std::move(t));
    }
    bench.n_queries = static_cast<size_t>(spec.n_queries);

    write_file(out_dir / "gen_meta.json",
               json{{"n_documents", bench.n_documents},
                    {"n_queries", bench.n_queries},
                    {"seed", spec.seed},
                    {"hop_choices", spec.hop_choices},
                    {"distractors_per_gold", spec.distractors_per_gold},
                    {"near_miss_rate", spec.near_miss_rate}}
                   .dump(2) +
                   "\n");

    if (run_post_check) verify_generated(bench);
    return bench;
}

inline std::vector<TruthRecord> load_truth_file(const std::filesystem::path& path) {
    std::vector<TruthRecord> out;
    for_each_jsonl(path, [&](size_t, const json& rec) {
        TruthRecord t;
        t.qid = rec.at("qid").get<std::string>();
        t.chain = rec.at("chain").get<std::vector<std::string>>();
        t.gold_doc_ids = rec.at("gold_doc_ids").get<std::vector<std::string>>();
        t.answer = rec.at("answer").get<std::string>();
        t.n_required = rec.at("n_required").get<int>();
        out.push_back(std::move(t));
    });
    return out;
}

enum class OraclePlannerMode {
    gold_titles,  // emit one sub-query per planted hop
    identity      // emit the original question (single-shot retrieval baseline)
};

// Deterministic scripted agents computed from the planted truth. Role
// behavior follows the planted chain: the planner emits gold titles, the
// controller continues with the first hop whose gold document is absent from
// the rendered context, and the writer answers e_h only once every gold
// document is present.
class OracleBackend : public CompletionBackend {
public:
    OracleBackend(const std::vector<TruthRecord>& truth, OraclePlannerMode mode)
        : mode_(mode) {
        for (const TruthRecord& t : truth)
            by_question_[synthetic_question(t.chain.front())] = t;
    }

    std::string name() const override { return "oracle"; }

    CompletionResult complete(const CompletionRequest& req) override {
        CompletionResult r;
        if (req.role_tag == RoleTag::judge) {
            r.text = judge(req.user_prompt);
            return r;
        }
        const TruthRecord& t = lookup(req.user_prompt);
        switch (req.role_tag) {
            case RoleTag::planner: r.text = plan(t); break;
            case RoleTag::esc: r.text = decide(t, req.user_prompt); break;
            case RoleTag::formulator: r.text = reformulate(t, req.user_prompt); break;
            case RoleTag::writer: r.text = write(t, req.user_prompt); break;
            default:
                throw BackendError(std::string("oracle backend has no script for role ") +
                                   role_name(req.role_tag));
        }
        return r;
    }

private:
    static std::string line_value(const std::string& text, const std::string& label) {
        size_t pos = text.find(label);
        if (pos == std::string::npos) return "";
        size_t start = pos + label.size();
        size_t eol = text.find('\n', start);
        return trim(text.substr(start, (eol == std::string::npos ? text.size() : eol) - start));
    }

    const TruthRecord& lookup(const std::string& user_prompt) const {
        std::string question = line_value(user_prompt, "Question: ");
        auto it = by_question_.find(question);
        if (it == by_question_.end())
            throw BackendError("oracle backend: question not in truth table: " + question);
        return it->second;
    }

    // Gold document d present iff its chunk-id header "(<doc>#" was rendered.
    static bool doc_in_context(const std::string& prompt, const std::string& doc_id) {
        return prompt.find("(" + doc_id + "#") != std::string::npos;
    }

    int first_missing_hop(const TruthRecord& t, const std::string& prompt) const {
        for (int hop = 1; hop <= t.n_required; ++hop) {
            if (!doc_in_context(prompt, t.gold_doc_ids[hop - 1])) return hop;
        }
        return 0;
    }

    std::string plan(const TruthRecord& t) const {
        json searches = json::array();
        if (mode_ == OraclePlannerMode::identity) {
            searches.push_back(json{{"reason", "search the question as-is"},
                                    {"query", synthetic_question(t.chain.front())}});
        } else {
            for (int hop = 1; hop <= t.n_required; ++hop)
                searches.push_back(json{{"reason", "cover hop " + std::to_string(hop)},
                                        {"query", hop_title(t, hop)}});
        }
        return json{{"searches", searches}}.dump();
    }

    std::string decide(const TruthRecord& t, const std::string& prompt) const {
        int missing = first_missing_hop(t, prompt);
        if (missing == 0)
            return json{{"action", "STOP"}, {"message", "all gold evidence present"}}.dump();
        return json{{"action", "CONTINUE"},
                    {"next_query", hop_title(t, missing)},
                    {"message", "missing evidence for hop " + std::to_string(missing)}}
            .dump();
    }

    std::string reformulate(const TruthRecord& t, const std::string& prompt) const {
        // The controller message names the missing hop.
        std::string msg = line_value(prompt, "Controller message:");
        if (msg.empty()) msg = prompt;
        size_t pos = msg.find("hop ");
        int hop = pos == std::string::npos ? 1 : std::atoi(msg.c_str() + pos + 4);
        if (hop < 1 || hop > t.n_required) hop = 1;
        return json{{"next_query", hop_title(t, hop)}}.dump();
    }

    std::string write(const TruthRecord& t, const std::string& prompt) const {
        bool interleaved = prompt.find("Reasoning so far:") != std::string::npos;
        int missing = first_missing_hop(t, prompt);
        if (interleaved) {
            if (missing == 0) return "So the answer is: " + t.answer + ".";
            return "Next find " + hop_title(t, missing) + ".";
        }
        if (missing == 0) return json{{"answer", t.answer}}.dump();
        return json{{"answer", "insufficient evidence"}}.dump();
    }

    static std::string judge(const std::string& prompt) {
        std::string predicted = line_value(prompt, "Predicted Answer: ");
        std::string gold = line_value(prompt, "Ground-Truth Answer: ");
        bool match = predicted == gold;
        return std::string("Explanation: exact comparison.\nDecision: ") +
               (match ? "yes" : "no");
    }

    OraclePlannerMode mode_;
    std::unordered_map<std::string, TruthRecord> by_question_;
};

}  // namespace par2rag
