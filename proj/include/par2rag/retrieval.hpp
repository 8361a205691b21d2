#pragma once
// Retriever: lexical BM25 candidates, optional dense-score fusion via RRF,
// reranking to a compact evidence set, and duplicate-free evidence merging.
//
// Tie-break everywhere: score descending, chunk_id ascending.

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "par2rag/common.hpp"
#include "par2rag/corpus.hpp"

namespace par2rag {

// Lowercased, punctuation-stripped, whitespace tokenization. Bytes >= 0x80
// are kept verbatim so UTF-8 words survive.
inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isalnum(c) || c >= 0x80) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            tokens.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

struct ScoredChunk {
    std::string chunk_id;
    double score = 0.0;
};

struct RankedList {
    std::string query;
    std::vector<ScoredChunk> entries;

    bool empty() const { return entries.empty(); }
    size_t size() const { return entries.size(); }
};

inline void sort_ranked(std::vector<ScoredChunk>& entries) {
    std::sort(entries.begin(), entries.end(), [](const ScoredChunk& a, const ScoredChunk& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.chunk_id < b.chunk_id;
    });
}

enum class FusionMode { lexical_only, rrf_fusion };

struct RetrievalConfig {
    size_t candidate_k = 100;
    size_t final_k = 5;
    FusionMode fusion = FusionMode::lexical_only;
    double rrf_constant = 60.0;

    void validate() const {
        if (candidate_k == 0 || final_k == 0) throw UsageError("retrieval k must be positive");
        if (final_k > candidate_k) throw UsageError("final_k must be <= candidate_k");
        if (rrf_constant <= 0.0) throw UsageError("rrf_constant must be positive");
    }
};

// Inverted index with Okapi BM25 scoring (k1=1.2, b=0.75) over the combined
// title + text token stream of each chunk.
class LexicalIndex {
public:
    static constexpr double kK1 = 1.2;
    static constexpr double kB = 0.75;
    static constexpr double kMinIdf = 1e-6;

    explicit LexicalIndex(const std::vector<Chunk>& chunks) {
        if (chunks.empty()) throw DataError("cannot build index over empty corpus");
        chunk_ids_.reserve(chunks.size());
        doc_len_.reserve(chunks.size());
        double total_len = 0;
        for (const Chunk& c : chunks) {
            uint32_t ord = static_cast<uint32_t>(chunk_ids_.size());
            chunk_ids_.push_back(c.chunk_id);
            std::unordered_map<std::string, uint32_t> tf;
            size_t len = 0;
            for (const std::string& tok : tokenize(c.title)) ++tf[tok], ++len;
            for (const std::string& tok : tokenize(c.text)) ++tf[tok], ++len;
            for (const auto& [tok, freq] : tf) postings_[tok].push_back({ord, freq});
            doc_len_.push_back(len);
            total_len += static_cast<double>(len);
        }
        avg_doc_len_ = total_len / static_cast<double>(chunks.size());
        if (avg_doc_len_ <= 0) avg_doc_len_ = 1.0;
    }

    size_t n_chunks() const { return chunk_ids_.size(); }

    double idf(const std::string& token) const {
        auto it = postings_.find(token);
        if (it == postings_.end()) return 0.0;
        double n = static_cast<double>(n_chunks());
        double df = static_cast<double>(it->second.size());
        return std::max(kMinIdf, std::log((n - df + 0.5) / (df + 0.5)));
    }

    bool has_token(const std::string& token) const { return postings_.count(token) > 0; }

    RankedList search(const std::string& query, size_t k) const {
        if (k == 0) throw UsageError("k must be >= 1");
        std::unordered_map<uint32_t, double> scores;
        std::unordered_map<std::string, uint32_t> qtf;
        for (const std::string& tok : tokenize(query)) ++qtf[tok];
        for (const auto& [tok, q_count] : qtf) {
            auto it = postings_.find(tok);
            if (it == postings_.end()) continue;
            double w = idf(tok) * (kK1 + 1.0) * static_cast<double>(q_count);
            for (const auto& [ord, tf] : it->second) {
                double norm = 1.0 - kB + kB * static_cast<double>(doc_len_[ord]) / avg_doc_len_;
                double f = static_cast<double>(tf);
                scores[ord] += w * f / (f + kK1 * norm);
            }
        }
        RankedList out;
        out.query = query;
        out.entries.reserve(scores.size());
        for (const auto& [ord, score] : scores) out.entries.push_back({chunk_ids_[ord], score});
        sort_ranked(out.entries);
        if (out.entries.size() > k) out.entries.resize(k);
        return out;
    }

private:
    struct Posting {
        uint32_t chunk_ordinal;
        uint32_t tf;
    };

    std::vector<std::string> chunk_ids_;
    std::vector<size_t> doc_len_;
    double avg_doc_len_ = 1.0;
    std::unordered_map<std::string, std::vector<Posting>> postings_;
};

// Reciprocal rank fusion: score(c) = sum over lists containing c of
// 1 / (rrf_constant + rank), rank 1-based.
inline RankedList fuse_rrf(const std::vector<RankedList>& lists, size_t k,
                           double rrf_constant = 60.0) {
    if (lists.empty()) throw UsageError("fuse_rrf needs at least one input list");
    std::map<std::string, double> accum;
    for (const RankedList& list : lists) {
        for (size_t rank = 1; rank <= list.entries.size(); ++rank) {
            accum[list.entries[rank - 1].chunk_id] +=
                1.0 / (rrf_constant + static_cast<double>(rank));
        }
    }
    RankedList out;
    out.query = lists.front().query;
    out.entries.reserve(accum.size());
    for (const auto& [id, score] : accum) out.entries.push_back({id, score});
    sort_ranked(out.entries);
    if (out.entries.size() > k) out.entries.resize(k);
    return out;
}

// Reranker plug-in: given the query and ordered candidate texts, return a
// same-length vector of scores.
class RerankScorer {
public:
    virtual ~RerankScorer() = default;
    virtual std::string name() const = 0;
    virtual std::vector<double> score(const std::string& query,
                                      const std::vector<std::string>& passages) = 0;
};

// Default reranker: coverage of distinct query tokens weighted by corpus IDF.
// No model calls involved.
class IdfOverlapScorer : public RerankScorer {
public:
    explicit IdfOverlapScorer(const LexicalIndex& index) : index_(index) {}

    std::string name() const override { return "idf_overlap"; }

    std::vector<double> score(const std::string& query,
                              const std::vector<std::string>& passages) override {
        std::unordered_set<std::string> qtokens;
        for (const std::string& tok : tokenize(query)) qtokens.insert(tok);
        std::vector<double> out;
        out.reserve(passages.size());
        for (const std::string& text : passages) {
            std::unordered_set<std::string> ptokens;
            for (const std::string& tok : tokenize(text)) ptokens.insert(tok);
            double s = 0.0;
            for (const std::string& tok : qtokens) {
                if (ptokens.count(tok) > 0) s += index_.idf(tok);
            }
            out.push_back(s);
        }
        return out;
    }

private:
    const LexicalIndex& index_;
};

// Dense-scorer plug-in contract: (query, chunk text) -> real.
using DenseScorer = std::function<double(const std::string&, const std::string&)>;

// Reranks candidates to at most final_k using the scorer; the passage fed to
// the scorer is "<title>\n<text>". Scorer failures propagate to the caller
// (the candidate list is untouched and usable as a fallback).
inline RankedList rerank(const std::string& query, const RankedList& candidates, size_t final_k,
                         RerankScorer& scorer, const CorpusStore& store) {
    if (candidates.empty()) throw UsageError("rerank requires non-empty candidates");
    std::vector<std::string> passages;
    passages.reserve(candidates.entries.size());
    for (const ScoredChunk& e : candidates.entries) {
        const Chunk& c = store.get_chunk(e.chunk_id);
        passages.push_back(c.title + "\n" + c.text);
    }
    std::vector<double> scores = scorer.score(query, passages);
    if (scores.size() != passages.size())
        throw BackendError("reranker returned " + std::to_string(scores.size()) + " scores for " +
                           std::to_string(passages.size()) + " candidates");
    RankedList out;
    out.query = query;
    out.entries.reserve(candidates.entries.size());
    for (size_t i = 0; i < candidates.entries.size(); ++i)
        out.entries.push_back({candidates.entries[i].chunk_id, scores[i]});
    sort_ranked(out.entries);
    if (out.entries.size() > final_k) out.entries.resize(final_k);
    return out;
}

enum class EvidenceStage { anchor, hop };

struct Provenance {
    EvidenceStage stage = EvidenceStage::anchor;
    int hop_index = 0;
    std::string source_query;
};

// Ordered, duplicate-free chunk-id set accumulated across stages. Order is
// first-insertion order.
struct EvidenceContext {
    std::vector<std::string> entries;
    std::unordered_map<std::string, Provenance> provenance;

    bool contains(const std::string& id) const { return provenance.count(id) > 0; }
    size_t size() const { return entries.size(); }
};

// Set-union semantics with first-seen ordering: appends unseen entries of
// `fresh` in rank order, records provenance for appended entries only.
inline EvidenceContext merge_dedup(EvidenceContext ctx, const RankedList& fresh,
                                   EvidenceStage stage, int hop_index,
                                   const std::string& source_query) {
    for (const ScoredChunk& e : fresh.entries) {
        if (ctx.contains(e.chunk_id)) continue;
        ctx.entries.push_back(e.chunk_id);
        ctx.provenance.emplace(e.chunk_id, Provenance{stage, hop_index, source_query});
    }
    return ctx;
}

// Two-stage retrieval: broad lexical candidates (optionally fused with a
// dense leg via RRF), then reranking to a compact evidence set. On reranker
// failure the truncated candidate list is returned and the fallback counted.
class Retriever {
public:
    Retriever(const LexicalIndex& index, const CorpusStore& store, RetrievalConfig cfg)
        : index_(index), store_(store), cfg_(cfg) {
        cfg_.validate();
    }

    void set_rerank_scorer(std::shared_ptr<RerankScorer> scorer) { scorer_ = std::move(scorer); }
    void set_dense_scorer(DenseScorer scorer) { dense_ = std::move(scorer); }
    const RetrievalConfig& config() const { return cfg_; }
    size_t rerank_fallbacks() const { return rerank_fallbacks_; }

    RankedList retrieve(const std::string& query) const {
        RankedList candidates = index_.search(query, cfg_.candidate_k);
        if (cfg_.fusion == FusionMode::rrf_fusion && dense_) {
            std::vector<RankedList> legs;
            legs.push_back(candidates);
            legs.push_back(dense_leg(query));
            candidates = fuse_rrf(legs, cfg_.candidate_k, cfg_.rrf_constant);
        }
        if (candidates.empty()) return candidates;

        RerankScorer* scorer = scorer_.get();
        IdfOverlapScorer default_scorer(index_);
        if (scorer == nullptr) scorer = &default_scorer;
        try {
            return rerank(query, candidates, cfg_.final_k, *scorer, store_);
        } catch (const BackendError&) {
            ++rerank_fallbacks_;
            if (candidates.entries.size() > cfg_.final_k) candidates.entries.resize(cfg_.final_k);
            return candidates;
        }
    }

private:
    RankedList dense_leg(const std::string& query) const {
        RankedList out;
        out.query = query;
        out.entries.reserve(store_.chunks().size());
        for (const Chunk& c : store_.chunks())
            out.entries.push_back({c.chunk_id, dense_(query, c.title + "\n" + c.text)});
        sort_ranked(out.entries);
        if (out.entries.size() > cfg_.candidate_k) out.entries.resize(cfg_.candidate_k);
        return out;
    }

    const LexicalIndex& index_;
    const CorpusStore& store_;
    RetrievalConfig cfg_;
    std::shared_ptr<RerankScorer> scorer_;
    DenseScorer dense_;
    mutable size_t rerank_fallbacks_ = 0;
};

}  // namespace par2rag
