#pragma once
// Corpus ingestion and chunk storage.
//
// Documents come in as line-delimited records {doc_id, title, text}. Each
// document is split into chunks with identifiers "<doc_id>#<ordinal>"; the
// store is write-once and serves chunks by id afterwards.

#include <cstddef>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "par2rag/common.hpp"

namespace par2rag {

struct SourceDocument {
    std::string doc_id;
    std::string title;
    std::string body;
};

struct CharSpan {
    size_t begin = 0;
    size_t end = 0;  // exclusive
};

struct Chunk {
    std::string chunk_id;
    std::string doc_id;
    std::string title;
    std::string text;
    CharSpan char_span;
};

struct ChunkingConfig {
    size_t max_chars = 1200;
    size_t overlap_chars = 120;
    bool split_on_boundaries = true;

    void validate() const {
        if (max_chars == 0) throw UsageError("max_chars must be positive");
        if (overlap_chars >= max_chars) throw UsageError("overlap_chars must be < max_chars");
    }
};

struct CorpusStats {
    size_t n_documents = 0;
    size_t n_chunks = 0;
    double mean_chunk_chars = 0.0;

    json to_json() const {
        return json{{"n_documents", n_documents},
                    {"n_chunks", n_chunks},
                    {"mean_chunk_chars", mean_chunk_chars}};
    }
};

namespace detail {

inline bool is_sentence_end(const std::string& body, size_t i) {
    char c = body[i];
    if (c == '\n') return true;
    if (c != '.' && c != '!' && c != '?') return false;
    return i + 1 == body.size() || body[i + 1] == ' ' || body[i + 1] == '\n';
}

// Picks the end of the chunk starting at `start`. Prefers a paragraph break,
// then a sentence end, inside the back half of the window; falls back to the
// hard cut. Never returns an end that would stall the scan (end - start must
// exceed the overlap).
inline size_t chunk_end(const std::string& body, size_t start, const ChunkingConfig& cfg) {
    size_t hard_end = std::min(body.size(), start + cfg.max_chars);
    if (hard_end == body.size() || !cfg.split_on_boundaries) return hard_end;

    size_t lo = start + std::max<size_t>(1, cfg.max_chars / 2);
    size_t best = 0;
    for (size_t i = hard_end; i-- > lo;) {
        if (i + 1 < body.size() && body[i] == '\n' && body[i + 1] == '\n') {
            best = i + 1;
            break;
        }
    }
    if (best == 0) {
        for (size_t i = hard_end; i-- > lo;) {
            if (is_sentence_end(body, i)) {
                best = i + 1;
                break;
            }
        }
    }
    if (best == 0 || best - start <= cfg.overlap_chars) return hard_end;
    return best;
}

}  // namespace detail

// Splits a document body into chunks. Consecutive chunks overlap by exactly
// overlap_chars (the final chunk may be shorter than max_chars); spans cover
// [0, body.size()).
inline std::vector<Chunk> chunk_document(const SourceDocument& doc, const ChunkingConfig& cfg) {
    cfg.validate();
    std::vector<Chunk> chunks;
    if (doc.body.empty()) return chunks;

    size_t start = 0;
    size_t ordinal = 0;
    while (start < doc.body.size()) {
        size_t end = detail::chunk_end(doc.body, start, cfg);
        Chunk c;
        c.chunk_id = doc.doc_id + "#" + std::to_string(ordinal);
        c.doc_id = doc.doc_id;
        c.title = doc.title;
        c.text = doc.body.substr(start, end - start);
        c.char_span = {start, end};
        chunks.push_back(std::move(c));
        if (end == doc.body.size()) break;
        start = end - cfg.overlap_chars;
        ++ordinal;
    }
    return chunks;
}

// Write-once chunk store: single-writer ingestion, immutable afterwards.
class CorpusStore {
public:
    CorpusStats ingest(const std::filesystem::path& corpus_path, const ChunkingConfig& cfg) {
        cfg.validate();
        for_each_jsonl(corpus_path, [&](size_t line_no, const json& rec) {
            SourceDocument doc;
            try {
                doc.doc_id = rec.at("doc_id").get<std::string>();
                doc.title = rec.at("title").get<std::string>();
                doc.body = rec.at("text").get<std::string>();
            } catch (const json::exception& e) {
                throw DataError("malformed record at line " + std::to_string(line_no) + ": " +
                                e.what());
            }
            if (doc.doc_id.empty())
                throw DataError("empty doc_id at line " + std::to_string(line_no));
            if (doc.body.empty() && doc.title.empty())
                throw DataError("empty title and text at line " + std::to_string(line_no));
            if (!doc_ids_.insert(doc.doc_id).second)
                throw DataError("duplicate doc_id '" + doc.doc_id + "' at line " +
                                std::to_string(line_no));
            for (Chunk& c : chunk_document(doc, cfg)) add_chunk(std::move(c));
        });
        stats_.n_documents = doc_ids_.size();
        stats_.n_chunks = chunks_.size();
        stats_.mean_chunk_chars = mean_chunk_chars();
        return stats_;
    }

    const Chunk* find_chunk(const std::string& chunk_id) const {
        auto it = by_id_.find(chunk_id);
        return it == by_id_.end() ? nullptr : &chunks_[it->second];
    }

    const Chunk& get_chunk(const std::string& chunk_id) const {
        const Chunk* c = find_chunk(chunk_id);
        if (c == nullptr) throw DataError("unknown chunk_id: " + chunk_id);
        return *c;
    }

    bool has_document(const std::string& doc_id) const { return doc_ids_.count(doc_id) > 0; }

    const std::vector<Chunk>& chunks() const { return chunks_; }
    size_t n_documents() const { return doc_ids_.size(); }
    const CorpusStats& stats() const { return stats_; }

    // On-disk layout: chunks.jsonl (ingestion order) + stats.json.
    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        JsonlWriter out(dir / "chunks.jsonl");
        for (const Chunk& c : chunks_) out.write(chunk_to_json(c));
        write_file(dir / "stats.json", stats_.to_json().dump(2) + "\n");
    }

    static CorpusStore load(const std::filesystem::path& dir) {
        CorpusStore store;
        for_each_jsonl(dir / "chunks.jsonl", [&](size_t, const json& rec) {
            Chunk c;
            c.chunk_id = rec.at("chunk_id").get<std::string>();
            c.doc_id = rec.at("doc_id").get<std::string>();
            c.title = rec.at("title").get<std::string>();
            c.text = rec.at("text").get<std::string>();
            c.char_span = {rec.at("span")[0].get<size_t>(), rec.at("span")[1].get<size_t>()};
            store.doc_ids_.insert(c.doc_id);
            store.add_chunk(std::move(c));
        });
        json s = json::parse(read_file(dir / "stats.json"));
        store.stats_.n_documents = s.at("n_documents").get<size_t>();
        store.stats_.n_chunks = s.at("n_chunks").get<size_t>();
        store.stats_.mean_chunk_chars = s.at("mean_chunk_chars").get<double>();
        return store;
    }

    // Digest of the serialized chunk map; equal corpora ingest to equal digests.
    std::string content_digest() const {
        std::string blob;
        for (const Chunk& c : chunks_) {
            blob += chunk_to_json(c).dump();
            blob += '\n';
        }
        return sha256_hex(blob);
    }

    static json chunk_to_json(const Chunk& c) {
        return json{{"chunk_id", c.chunk_id},
                    {"doc_id", c.doc_id},
                    {"title", c.title},
                    {"text", c.text},
                    {"span", {c.char_span.begin, c.char_span.end}}};
    }

private:
    void add_chunk(Chunk&& c) {
        if (by_id_.count(c.chunk_id) > 0) throw DataError("duplicate chunk_id: " + c.chunk_id);
        by_id_.emplace(c.chunk_id, chunks_.size());
        chunks_.push_back(std::move(c));
    }

    double mean_chunk_chars() const {
        if (chunks_.empty()) return 0.0;
        double total = 0;
        for (const Chunk& c : chunks_) total += static_cast<double>(c.text.size());
        return total / static_cast<double>(chunks_.size());
    }

    std::vector<Chunk> chunks_;
    std::unordered_map<std::string, size_t> by_id_;
    std::unordered_set<std::string> doc_ids_;
    CorpusStats stats_;
};

// QA dataset record; n_required defaults to the gold set size.
struct QaRecord {
    std::string qid;
    std::string question;
    std::string answer;
    std::vector<std::string> gold_doc_ids;
    int n_required = 0;
};

inline std::vector<QaRecord> load_qa_file(const std::filesystem::path& path) {
    std::vector<QaRecord> out;
    std::unordered_set<std::string> seen;
    for_each_jsonl(path, [&](size_t line_no, const json& rec) {
        QaRecord r;
        try {
            r.qid = rec.at("qid").get<std::string>();
            r.question = rec.at("question").get<std::string>();
            r.answer = rec.at("answer").get<std::string>();
            r.gold_doc_ids = rec.at("gold_doc_ids").get<std::vector<std::string>>();
            r.n_required = rec.value("n_required", static_cast<int>(r.gold_doc_ids.size()));
        } catch (const json::exception& e) {
            throw DataError("malformed qa record at line " + std::to_string(line_no) + ": " +
                            e.what());
        }
        if (r.qid.empty()) throw DataError("empty qid at line " + std::to_string(line_no));
        if (!seen.insert(r.qid).second)
            throw DataError("duplicate qid '" + r.qid + "' at line " + std::to_string(line_no));
        out.push_back(std::move(r));
    });
    return out;
}

}  // namespace par2rag
