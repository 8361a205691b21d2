#pragma once
// Structured-output parsing for the agent roles. Parsers accept arbitrary
// completion text and report failures through their return value; they never
// throw on malformed input.

#include <optional>
#include <string>
#include <vector>

#include "par2rag/common.hpp"

namespace par2rag {

struct SubQuerySearch {
    std::string reason;
    std::string query;
};

struct SubQueryPlan {
    std::vector<SubQuerySearch> searches;
};

enum class EscAction { CONTINUE, STOP };

inline const char* esc_action_name(EscAction a) {
    return a == EscAction::CONTINUE ? "CONTINUE" : "STOP";
}

// ESC output triple: the action, the reformulated query when continuing, and
// the rationale message.
struct AgentDecision {
    EscAction action = EscAction::STOP;
    std::optional<std::string> next_query;
    std::string message;
};

struct StepResponse {
    std::string text;
    int hop_index = 1;
};

// Extracts the first balanced JSON object embedded in free text, tolerating
// surrounding prose and code fences. Candidate substrings that fail to parse
// are skipped in favor of the next '{'.
inline std::optional<json> extract_first_object(const std::string& text) {
    for (size_t start = text.find('{'); start != std::string::npos;
         start = text.find('{', start + 1)) {
        int depth = 0;
        bool in_string = false;
        bool escaped = false;
        for (size_t i = start; i < text.size(); ++i) {
            char c = text[i];
            if (in_string) {
                if (escaped) {
                    escaped = false;
                } else if (c == '\\') {
                    escaped = true;
                } else if (c == '"') {
                    in_string = false;
                }
                continue;
            }
            if (c == '"') {
                in_string = true;
            } else if (c == '{') {
                ++depth;
            } else if (c == '}') {
                --depth;
                if (depth == 0) {
                    json parsed =
                        json::parse(text.substr(start, i - start + 1), nullptr, false);
                    if (!parsed.is_discarded() && parsed.is_object()) return parsed;
                    break;  // balanced but invalid; try the next '{'
                }
            }
        }
    }
    return std::nullopt;
}

// Parses the planner's {"searches":[{"reason","query"},...]} payload.
// Entries without a usable query string are dropped; the result is truncated
// to max_searches in order.
inline std::optional<SubQueryPlan> parse_planner_output(const std::string& text,
                                                        size_t max_searches,
                                                        std::string* error = nullptr) {
    auto fail = [&](const std::string& msg) -> std::optional<SubQueryPlan> {
        if (error != nullptr) *error = msg;
        return std::nullopt;
    };
    auto obj = extract_first_object(text);
    if (!obj) return fail("no parsable object in planner output");
    if (!obj->contains("searches") || !(*obj)["searches"].is_array())
        return fail("planner output lacks a searches array");
    SubQueryPlan plan;
    for (const json& entry : (*obj)["searches"]) {
        if (!entry.is_object()) continue;
        if (!entry.contains("query") || !entry["query"].is_string()) continue;
        std::string query = trim(entry["query"].get<std::string>());
        if (query.empty()) continue;
        SubQuerySearch s;
        s.query = std::move(query);
        if (entry.contains("reason") && entry["reason"].is_string())
            s.reason = entry["reason"].get<std::string>();
        plan.searches.push_back(std::move(s));
        if (plan.searches.size() == max_searches) break;
    }
    if (plan.searches.empty()) return fail("planner output has no usable searches");
    return plan;
}

// Parses the ESC decision object: action CONTINUE|STOP (case-insensitive),
// optional next_query, optional message. CONTINUE without a non-empty
// next_query is an error; a next_query accompanying STOP is dropped.
inline std::optional<AgentDecision> parse_esc_output(const std::string& text,
                                                     std::string* error = nullptr) {
    auto fail = [&](const std::string& msg) -> std::optional<AgentDecision> {
        if (error != nullptr) *error = msg;
        return std::nullopt;
    };
    auto obj = extract_first_object(text);
    if (!obj) return fail("no parsable object in esc output");
    if (!obj->contains("action") || !(*obj)["action"].is_string())
        return fail("esc output lacks an action");
    std::string action = to_lower(trim((*obj)["action"].get<std::string>()));
    AgentDecision decision;
    if (obj->contains("message") && (*obj)["message"].is_string())
        decision.message = (*obj)["message"].get<std::string>();
    if (action == "stop") {
        decision.action = EscAction::STOP;
        return decision;
    }
    if (action != "continue") return fail("unknown esc action: " + action);
    decision.action = EscAction::CONTINUE;
    if (!obj->contains("next_query") || !(*obj)["next_query"].is_string())
        return fail("esc CONTINUE without next_query");
    std::string next_query = trim((*obj)["next_query"].get<std::string>());
    if (next_query.empty()) return fail("esc CONTINUE with empty next_query");
    decision.next_query = std::move(next_query);
    return decision;
}

// Parses the formulator's {"next_query": ...} payload.
inline std::optional<std::string> parse_formulator_output(const std::string& text,
                                                          std::string* error = nullptr) {
    auto obj = extract_first_object(text);
    if (obj && obj->contains("next_query") && (*obj)["next_query"].is_string()) {
        std::string q = trim((*obj)["next_query"].get<std::string>());
        if (!q.empty()) return q;
    }
    if (error != nullptr) *error = "no usable next_query in formulator output";
    return std::nullopt;
}

// Extracts the writer's answer; total. Falls back to the raw text when no
// object with an `answer` key parses.
inline StepResponse parse_writer_output(const std::string& text, int hop_index = 1) {
    StepResponse r;
    r.hop_index = hop_index;
    auto obj = extract_first_object(text);
    if (obj && obj->contains("answer")) {
        const json& ans = (*obj)["answer"];
        r.text = ans.is_string() ? ans.get<std::string>() : ans.dump();
        return r;
    }
    r.text = trim(text);
    return r;
}

}  // namespace par2rag
