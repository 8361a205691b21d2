#pragma once
// Prompt templates as versioned text assets with {placeholder} substitution,
// plus context-to-prompt rendering.
//
// Each asset holds the system prompt and the user prompt separated by a
// literal "===USER===" line.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "par2rag/common.hpp"
#include "par2rag/corpus.hpp"
#include "par2rag/retrieval.hpp"

namespace par2rag {

struct RenderedPrompt {
    std::string system;
    std::string user;
};

class PromptLibrary {
public:
    static constexpr const char* kRoleAssets[] = {"planner",    "writer", "esc",
                                                  "formulator", "judge",  "searcher",
                                                  "interleaved", "cot",   "direct"};

    static PromptLibrary load(const std::filesystem::path& dir) {
        PromptLibrary lib;
        lib.dir_ = dir;
        std::filesystem::path version_file = dir / "version.txt";
        if (!std::filesystem::exists(version_file))
            throw DataError("template asset missing: " + version_file.string());
        lib.version_ = trim(read_file(version_file));
        for (const char* name : kRoleAssets) {
            std::filesystem::path path = dir / (std::string(name) + ".txt");
            if (!std::filesystem::exists(path))
                throw DataError("template asset missing: " + path.string());
            lib.templates_[name] = split_template(read_file(path), path);
        }
        return lib;
    }

    const std::string& version() const { return version_; }
    const std::filesystem::path& dir() const { return dir_; }

    // Digest over every asset; recorded in run manifests.
    std::string digest() const {
        std::string blob = version_;
        for (const auto& [name, tpl] : templates_) {
            blob += "\n--" + name + "--\n" + tpl.system + "\n==\n" + tpl.user;
        }
        return sha256_hex(blob);
    }

    const std::string& system_template(const std::string& name) const {
        return get(name).system;
    }

    RenderedPrompt render(const std::string& name,
                          const std::map<std::string, std::string>& params) const {
        const Template& tpl = get(name);
        return {substitute(tpl.system, params), substitute(tpl.user, params)};
    }

private:
    struct Template {
        std::string system;
        std::string user;
    };

    static Template split_template(const std::string& content, const std::filesystem::path& path) {
        const std::string marker = "===USER===";
        size_t pos = content.find(marker);
        if (pos == std::string::npos)
            throw DataError("template asset missing ===USER=== section: " + path.string());
        Template tpl;
        tpl.system = trim(content.substr(0, pos));
        tpl.user = trim(content.substr(pos + marker.size()));
        return tpl;
    }

    static std::string substitute(std::string text,
                                  const std::map<std::string, std::string>& params) {
        for (const auto& [key, value] : params) {
            std::string token = "{" + key + "}";
            size_t pos = 0;
            while ((pos = text.find(token, pos)) != std::string::npos) {
                text.replace(pos, token.size(), value);
                pos += value.size();
            }
        }
        return text;
    }

    const Template& get(const std::string& name) const {
        auto it = templates_.find(name);
        if (it == templates_.end()) throw DataError("template asset missing: " + name);
        return it->second;
    }

    std::filesystem::path dir_;
    std::string version_;
    std::map<std::string, Template> templates_;
};

constexpr const char* kEmptyContextPlaceholder = "(no passages retrieved)";

// Renders the evidence context as numbered passages with chunk-id headers,
// in first-insertion order (anchor entries precede hop entries). When the
// rendered text would exceed char_cap, whole passages are dropped newest
// first and *truncated is set.
inline std::string render_context(const CorpusStore& store, const EvidenceContext& ctx,
                                  size_t char_cap, bool* truncated = nullptr) {
    if (truncated != nullptr) *truncated = false;
    if (ctx.entries.empty()) return kEmptyContextPlaceholder;

    std::vector<std::string> blocks;
    blocks.reserve(ctx.entries.size());
    size_t total = 0;
    for (size_t i = 0; i < ctx.entries.size(); ++i) {
        const Chunk& c = store.get_chunk(ctx.entries[i]);
        std::string block = "[" + std::to_string(i + 1) + "] (" + c.chunk_id + ") " + c.title +
                            "\n" + c.text;
        total += block.size() + (i > 0 ? 2 : 0);  // "\n\n" joiner
        blocks.push_back(std::move(block));
    }
    while (total > char_cap && !blocks.empty()) {
        total -= blocks.back().size() + (blocks.size() > 1 ? 2 : 0);
        blocks.pop_back();
        if (truncated != nullptr) *truncated = true;
    }
    if (blocks.empty()) return kEmptyContextPlaceholder;

    std::string out;
    out.reserve(total);
    for (size_t i = 0; i < blocks.size(); ++i) {
        if (i > 0) out += "\n\n";
        out += blocks[i];
    }
    return out;
}

// The searcher role from the agent roster is a non-model formatting function:
// its strict rules forbid any transformation, so results are rendered
// verbatim. The searcher prompt asset is kept as documentation.
inline std::string format_search_results(const CorpusStore& store, const RankedList& results) {
    std::string out;
    for (const ScoredChunk& e : results.entries) {
        const Chunk& c = store.get_chunk(e.chunk_id);
        if (!out.empty()) out += "\n";
        out += "[" + c.chunk_id + "]\n" + c.title + "\n" + c.text + "\n";
    }
    return out;
}

inline RenderedPrompt render_planner_prompt(const PromptLibrary& lib, const std::string& question,
                                            int max_searches) {
    if (question.empty()) throw UsageError("planner prompt requires a question");
    return lib.render("planner", {{"question", question},
                                  {"max_searches", std::to_string(max_searches)}});
}

inline RenderedPrompt render_writer_prompt(const PromptLibrary& lib, const std::string& question,
                                           const std::string& context_text) {
    if (question.empty()) throw UsageError("writer prompt requires a question");
    return lib.render("writer", {{"question", question}, {"context", context_text}});
}

inline RenderedPrompt render_esc_prompt(const PromptLibrary& lib, const std::string& question,
                                        const std::string& step_response,
                                        const std::string& context_text) {
    if (question.empty()) throw UsageError("esc prompt requires a question");
    return lib.render("esc", {{"question", question},
                              {"response", step_response},
                              {"context", context_text}});
}

inline RenderedPrompt render_formulator_prompt(const PromptLibrary& lib,
                                               const std::string& question,
                                               const std::string& step_response,
                                               const std::string& esc_message) {
    if (question.empty()) throw UsageError("formulator prompt requires a question");
    return lib.render("formulator", {{"question", question},
                                     {"response", step_response},
                                     {"esc_message", esc_message}});
}

inline RenderedPrompt render_judge_prompt(const PromptLibrary& lib, const std::string& question,
                                          const std::string& predicted, const std::string& gold) {
    return lib.render("judge",
                      {{"query", question}, {"response", predicted}, {"answer", gold}});
}

inline RenderedPrompt render_interleaved_prompt(const PromptLibrary& lib,
                                                const std::string& question,
                                                const std::string& context_text,
                                                const std::string& reasoning_so_far) {
    return lib.render("interleaved",
                      {{"question", question},
                       {"context", context_text},
                       {"reasoning", reasoning_so_far.empty() ? "(none yet)" : reasoning_so_far}});
}

}  // namespace par2rag
