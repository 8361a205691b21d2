#pragma once
// Completion backend contract plus the scripted, replay, and HTTP backends.
//
// Requests are digested as lowercase hex SHA-256 over the canonical (sorted
// key) JSON encoding; digests key the response cache and the trace replay.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "par2rag/common.hpp"

namespace par2rag {

enum class RoleTag { planner, writer, esc, formulator, judge, reranker };

inline const char* role_name(RoleTag r) {
    switch (r) {
        case RoleTag::planner: return "planner";
        case RoleTag::writer: return "writer";
        case RoleTag::esc: return "esc";
        case RoleTag::formulator: return "formulator";
        case RoleTag::judge: return "judge";
        case RoleTag::reranker: return "reranker";
    }
    return "unknown";
}

struct CompletionRequest {
    RoleTag role_tag = RoleTag::writer;
    std::string system_prompt;
    std::string user_prompt;
    std::string model_id;
    double temperature = 0.0;
    int max_tokens = 1024;
};

struct CompletionResult {
    std::string text;
    long prompt_tokens = 0;
    long completion_tokens = 0;
    double latency_ms = 0.0;

    json to_json() const {
        return json{{"text", text},
                    {"usage", {{"prompt_tokens", prompt_tokens}, {"completion_tokens", completion_tokens}}},
                    {"latency_ms", latency_ms}};
    }

    static CompletionResult from_json(const json& j) {
        CompletionResult r;
        r.text = j.at("text").get<std::string>();
        r.prompt_tokens = j.at("usage").at("prompt_tokens").get<long>();
        r.completion_tokens = j.at("usage").at("completion_tokens").get<long>();
        r.latency_ms = j.at("latency_ms").get<double>();
        return r;
    }
};

inline std::string request_digest(const CompletionRequest& req) {
    json canonical{{"role_tag", role_name(req.role_tag)},
                   {"system_prompt", req.system_prompt},
                   {"user_prompt", req.user_prompt},
                   {"model_id", req.model_id},
                   {"decoding", {{"temperature", req.temperature}, {"max_tokens", req.max_tokens}}}};
    return sha256_hex(canonical.dump());
}

class CompletionBackend {
public:
    virtual ~CompletionBackend() = default;
    virtual CompletionResult complete(const CompletionRequest& req) = 0;
    virtual std::string name() const = 0;
};

// Test backend: per-role FIFO queues of programmed responses. An exhausted
// queue signals a harness bug and throws.
class ScriptedBackend : public CompletionBackend {
public:
    std::string name() const override { return "scripted"; }

    void push(RoleTag role, std::string text) {
        std::lock_guard<std::mutex> lock(mu_);
        queues_[role].push_back(std::move(text));
    }

    CompletionResult complete(const CompletionRequest& req) override {
        std::lock_guard<std::mutex> lock(mu_);
        auto& q = queues_[req.role_tag];
        if (q.empty())
            throw BackendError(std::string("scripted backend exhausted for role ") +
                               role_name(req.role_tag));
        CompletionResult r;
        r.text = std::move(q.front());
        q.pop_front();
        return r;
    }

private:
    std::mutex mu_;
    std::map<RoleTag, std::deque<std::string>> queues_;
};

struct TranscriptEntry {
    std::string digest;
    CompletionResult result;
};

// Replays a recorded completion transcript in order, verifying that each
// incoming request digest matches the recorded one.
class ReplayBackend : public CompletionBackend {
public:
    explicit ReplayBackend(std::vector<TranscriptEntry> transcript)
        : transcript_(std::move(transcript)) {}

    std::string name() const override { return "replay"; }

    CompletionResult complete(const CompletionRequest& req) override {
        std::lock_guard<std::mutex> lock(mu_);
        if (next_ >= transcript_.size())
            throw BackendError("replay transcript exhausted at call " + std::to_string(next_));
        const TranscriptEntry& entry = transcript_[next_];
        std::string digest = request_digest(req);
        if (digest != entry.digest)
            throw BackendError("replay digest mismatch at call " + std::to_string(next_));
        ++next_;
        return entry.result;
    }

private:
    std::mutex mu_;
    std::vector<TranscriptEntry> transcript_;
    size_t next_ = 0;
};

struct HttpBackendConfig {
    std::string base_url = "http://localhost:8080";
    std::string path = "/v1/chat/completions";
    std::string api_key;  // from environment; never persisted
    int max_attempts = 3;
    int backoff_initial_ms = 250;
    bool cache_enabled = true;
    std::filesystem::path cache_dir;  // empty -> in-memory cache only
    int max_in_flight = 4;
    double requests_per_second = 0.0;  // <= 0 disables the token bucket
};

// Chat-completion client over the de facto hosted-model HTTP schema, with
// exponential-backoff retry, digest-keyed response caching, a max-in-flight
// bound, and a token-bucket rate limit.
class HttpBackend : public CompletionBackend {
public:
    explicit HttpBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg)) {
        tokens_ = 1.0;
        last_refill_ = std::chrono::steady_clock::now();
    }

    const HttpBackendConfig& config() const { return cfg_; }
    std::string name() const override { return "http"; }
    size_t upstream_calls() const { return upstream_calls_.load(); }

    CompletionResult complete(const CompletionRequest& req) override;

private:
    struct InFlightGuard;

    void acquire_rate_token() {
        if (cfg_.requests_per_second <= 0.0) return;
        std::unique_lock<std::mutex> lock(rate_mu_);
        for (;;) {
            auto now = std::chrono::steady_clock::now();
            double elapsed = std::chrono::duration<double>(now - last_refill_).count();
            tokens_ = std::min(1.0 * cfg_.max_in_flight,
                               tokens_ + elapsed * cfg_.requests_per_second);
            last_refill_ = now;
            if (tokens_ >= 1.0) {
                tokens_ -= 1.0;
                return;
            }
            double wait_s = (1.0 - tokens_) / cfg_.requests_per_second;
            lock.unlock();
            std::this_thread::sleep_for(std::chrono::duration<double>(wait_s));
            lock.lock();
        }
    }

    std::optional<CompletionResult> cache_lookup(const std::string& digest) {
        if (!cfg_.cache_enabled) return std::nullopt;
        {
            std::lock_guard<std::mutex> lock(cache_mu_);
            auto it = memory_cache_.find(digest);
            if (it != memory_cache_.end()) return it->second;
        }
        if (!cfg_.cache_dir.empty()) {
            auto path = cfg_.cache_dir / (digest + ".json");
            if (std::filesystem::exists(path)) {
                CompletionResult r = CompletionResult::from_json(json::parse(read_file(path)));
                std::lock_guard<std::mutex> lock(cache_mu_);
                memory_cache_[digest] = r;
                return r;
            }
        }
        return std::nullopt;
    }

    void cache_store(const std::string& digest, const CompletionResult& r) {
        if (!cfg_.cache_enabled) return;
        {
            std::lock_guard<std::mutex> lock(cache_mu_);
            memory_cache_[digest] = r;
        }
        if (!cfg_.cache_dir.empty()) write_file(cfg_.cache_dir / (digest + ".json"), r.to_json().dump());
    }

    HttpBackendConfig cfg_;
    std::mutex cache_mu_;
    std::map<std::string, CompletionResult> memory_cache_;
    std::mutex rate_mu_;
    double tokens_ = 1.0;
    std::chrono::steady_clock::time_point last_refill_;
    std::mutex inflight_mu_;
    std::condition_variable inflight_cv_;
    int in_flight_ = 0;
    std::atomic<size_t> upstream_calls_{0};
};

}  // namespace par2rag

// The HTTP transport lives out of line so that translation units that never
// touch the remote backend do not pay for httplib.
#include <httplib.h>

namespace par2rag {

struct HttpBackend::InFlightGuard {
    HttpBackend& b;
    explicit InFlightGuard(HttpBackend& backend) : b(backend) {
        std::unique_lock<std::mutex> lock(b.inflight_mu_);
        b.inflight_cv_.wait(lock, [&] { return b.in_flight_ < b.cfg_.max_in_flight; });
        ++b.in_flight_;
    }
    ~InFlightGuard() {
        {
            std::lock_guard<std::mutex> lock(b.inflight_mu_);
            --b.in_flight_;
        }
        b.inflight_cv_.notify_one();
    }
};

inline CompletionResult HttpBackend::complete(const CompletionRequest& req) {
    std::string digest = request_digest(req);
    if (auto hit = cache_lookup(digest)) return *hit;

    InFlightGuard guard(*this);
    acquire_rate_token();

    json body{{"model", req.model_id},
              {"messages",
               {{{"role", "system"}, {"content", req.system_prompt}},
                {{"role", "user"}, {"content", req.user_prompt}}}},
              {"temperature", req.temperature},
              {"max_tokens", req.max_tokens}};

    std::string last_error;
    for (int attempt = 0; attempt < cfg_.max_attempts; ++attempt) {
        if (attempt > 0) {
            int delay = cfg_.backoff_initial_ms << (attempt - 1);
            std::this_thread::sleep_for(std::chrono::milliseconds(delay));
        }
        httplib::Client client(cfg_.base_url);
        client.set_read_timeout(120, 0);
        httplib::Headers headers;
        if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);
        auto t0 = std::chrono::steady_clock::now();
        auto res = client.Post(cfg_.path, headers, body.dump(), "application/json");
        auto t1 = std::chrono::steady_clock::now();
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status != 200) {
            last_error = "http status " + std::to_string(res->status);
            continue;
        }
        json reply = json::parse(res->body, nullptr, false);
        if (reply.is_discarded() || !reply.contains("choices") || reply["choices"].empty()) {
            last_error = "unparsable completion response";
            continue;
        }
        CompletionResult out;
        out.text = reply["choices"][0].at("message").at("content").get<std::string>();
        if (reply.contains("usage")) {
            out.prompt_tokens = reply["usage"].value("prompt_tokens", 0L);
            out.completion_tokens = reply["usage"].value("completion_tokens", 0L);
        }
        out.latency_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        ++upstream_calls_;
        cache_store(digest, out);
        return out;
    }
    throw BackendError("completion failed after " + std::to_string(cfg_.max_attempts) +
                       " attempts: " + last_error);
}

}  // namespace par2rag
