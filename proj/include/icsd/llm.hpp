#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <deque>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "icsd/corpus.hpp"
#include "icsd/errors.hpp"
#include "icsd/hash.hpp"
#include "icsd/http.hpp"
#include "icsd/jsonl.hpp"
#include "icsd/prompt_templates.hpp"
#include "icsd/util.hpp"

namespace icsd::llm {

struct SelectionPrompt {
    std::string template_version;
    std::string rendered;
    std::uint64_t group_ref = 0;  // query caption id
    std::size_t candidate_count = 0;
};

struct SelectionResult {
    std::uint64_t group_ref = 0;
    std::vector<std::size_t> selected_indices;  // 1-based into the candidate list
    std::string summary;
    std::uint64_t raw_response_hash = 0;
};

enum class RejectReason {
    index_out_of_range,
    duplicate_index,
    too_few_selected,
    too_many_selected,
    empty_summary,
    summary_too_long,
};

inline const char* to_string(RejectReason r) {
    switch (r) {
        case RejectReason::index_out_of_range: return "index_out_of_range";
        case RejectReason::duplicate_index: return "duplicate_index";
        case RejectReason::too_few_selected: return "too_few_selected";
        case RejectReason::too_many_selected: return "too_many_selected";
        case RejectReason::empty_summary: return "empty_summary";
        case RejectReason::summary_too_long: return "summary_too_long";
    }
    return "unknown";
}

struct SelectionBounds {
    std::size_t min_sel = 3;
    std::size_t max_sel = 8;
};

struct LlmPolicy {
    std::size_t max_retries = 3;
    std::uint32_t backoff_base_ms = 250;
    std::uint32_t backoff_cap_ms = 10000;
    std::uint32_t rate_per_minute = 60;  // 0 = unlimited
    std::uint32_t timeout_ms = 30000;
    std::size_t concurrency = 4;
    std::size_t reask_budget = 2;  // extra asks after a rejected response
    double temperature = 0.7;

    void validate() const {
        if (backoff_base_ms == 0 || backoff_cap_ms == 0 || timeout_ms == 0 || concurrency == 0)
            throw ConfigError("llm policy: durations and concurrency must be positive");
    }
};

inline SelectionPrompt build_selection_prompt(const std::vector<std::string>& group_captions,
                                              std::uint64_t group_ref,
                                              const SelectionBounds& bounds = {},
                                              std::size_t max_summary_words = 50) {
    if (group_captions.empty()) throw DataError("build_selection_prompt: empty group");
    SelectionPrompt p;
    p.template_version = prompts::kSelectSummarizeVersion;
    p.rendered = prompts::render_select_summarize(group_captions, bounds.min_sel,
                                                  bounds.max_sel, max_summary_words);
    p.group_ref = group_ref;
    p.candidate_count = group_captions.size();
    return p;
}

inline std::string build_condense_prompt(const std::string& caption) {
    return prompts::render_condense(caption);
}

// ---------------------------------------------------------------------------
// Response parsing
// ---------------------------------------------------------------------------

// Curly quotes show up constantly in chat-model output; fold them to ASCII
// before JSON parsing.
inline std::string normalize_typographic_quotes(const std::string& raw) {
    std::string out;
    out.reserve(raw.size());
    for (std::size_t i = 0; i < raw.size();) {
        if (i + 2 < raw.size() && static_cast<unsigned char>(raw[i]) == 0xE2 &&
            static_cast<unsigned char>(raw[i + 1]) == 0x80) {
            const unsigned char b = static_cast<unsigned char>(raw[i + 2]);
            if (b == 0x98 || b == 0x99) {  // left/right single
                out.push_back('\'');
                i += 3;
                continue;
            }
            if (b == 0x9C || b == 0x9D) {  // left/right double
                out.push_back('"');
                i += 3;
                continue;
            }
        }
        out.push_back(raw[i]);
        ++i;
    }
    return out;
}

// First balanced {...} region, ignoring braces inside string literals.
// Tolerates code fences and prose around the object.
inline std::optional<std::string> extract_json_object(const std::string& text) {
    std::size_t start = std::string::npos;
    int depth = 0;
    bool in_string = false;
    bool escaped = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (in_string) {
            if (escaped)
                escaped = false;
            else if (c == '\\')
                escaped = true;
            else if (c == '"')
                in_string = false;
            continue;
        }
        if (c == '"' && depth > 0) {
            in_string = true;
        } else if (c == '{') {
            if (depth == 0) start = i;
            ++depth;
        } else if (c == '}') {
            if (depth > 0 && --depth == 0) return text.substr(start, i - start + 1);
        }
    }
    return std::nullopt;
}

namespace detail {

inline Json parse_response_object(const std::string& raw, const char* what) {
    const std::uint64_t h = fnv1a64(raw);
    const std::string norm = normalize_typographic_quotes(raw);
    auto body = extract_json_object(norm);
    if (!body)
        throw DataError(std::string(what) + ": no JSON object found (raw_response_hash=" +
                        to_hex(h) + ")");
    Json j = Json::parse(*body, nullptr, false);
    if (j.is_discarded())
        throw DataError(std::string(what) + ": malformed JSON (raw_response_hash=" +
                        to_hex(h) + ")");
    return j;
}

}  // namespace detail

inline SelectionResult parse_selection_response(const std::string& raw,
                                                std::size_t candidate_count,
                                                std::uint64_t group_ref = 0) {
    const std::uint64_t h = fnv1a64(raw);
    Json j = detail::parse_response_object(raw, "selection response");
    if (!j.contains("index") || !j["index"].is_array())
        throw DataError("selection response: missing or ill-typed \"index\" (raw_response_hash=" +
                        to_hex(h) + ")");
    if (!j.contains("summary") || !j["summary"].is_string())
        throw DataError("selection response: missing or ill-typed \"summary\" (raw_response_hash=" +
                        to_hex(h) + ")");
    SelectionResult r;
    r.group_ref = group_ref;
    r.raw_response_hash = h;
    for (const auto& v : j["index"]) {
        if (!v.is_number_integer() && !v.is_number_unsigned())
            throw DataError("selection response: non-integer index (raw_response_hash=" +
                            to_hex(h) + ")");
        const auto iv = v.get<long long>();
        if (iv < 0)
            throw DataError("selection response: negative index (raw_response_hash=" +
                            to_hex(h) + ")");
        r.selected_indices.push_back(static_cast<std::size_t>(iv));
    }
    r.summary = trim(j["summary"].get<std::string>());
    (void)candidate_count;  // range is the validator's concern
    return r;
}

// For summarize-only prompts: {"summary": str}.
inline std::string parse_summary_response(const std::string& raw) {
    const std::uint64_t h = fnv1a64(raw);
    Json j = detail::parse_response_object(raw, "summary response");
    if (!j.contains("summary") || !j["summary"].is_string())
        throw DataError("summary response: missing or ill-typed \"summary\" (raw_response_hash=" +
                        to_hex(h) + ")");
    return trim(j["summary"].get<std::string>());
}

// Condense responses are free text; strip whitespace and one layer of quotes.
inline std::string parse_condense_response(const std::string& raw) {
    std::string s = trim(normalize_typographic_quotes(raw));
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"')
        s = trim(s.substr(1, s.size() - 2));
    return s;
}

// Rejection is a value: downstream decides whether to re-ask or skip.
// Checks run in a fixed order and the first failure wins.
inline std::optional<RejectReason> validate_selection(const SelectionResult& result,
                                                      std::size_t candidate_count,
                                                      const SelectionBounds& bounds = {},
                                                      std::size_t max_summary_words = 50) {
    std::vector<char> seen(candidate_count + 1, 0);
    for (std::size_t ix : result.selected_indices) {
        if (ix < 1 || ix > candidate_count) return RejectReason::index_out_of_range;
        if (seen[ix]) return RejectReason::duplicate_index;
        seen[ix] = 1;
    }
    if (result.selected_indices.size() < bounds.min_sel) return RejectReason::too_few_selected;
    if (result.selected_indices.size() > bounds.max_sel) return RejectReason::too_many_selected;
    const auto words = corpus::tokenize(result.summary);
    if (words.empty()) return RejectReason::empty_summary;
    if (words.size() > max_summary_words) return RejectReason::summary_too_long;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Providers
// ---------------------------------------------------------------------------

struct ProviderResponse {
    int status = 0;  // 0 = transport failure
    std::string content;
    std::string error;
    bool ok() const { return status >= 200 && status < 300; }
};

class ChatProvider {
  public:
    virtual ~ChatProvider() = default;
    virtual ProviderResponse complete(const std::string& prompt) = 0;
};

struct HttpChatConfig {
    std::string endpoint;  // full URL of the chat-completions route
    std::string model;
    std::string api_key_env = "ICSD_API_KEY";
    double temperature = 0.7;
    std::uint32_t timeout_ms = 30000;
};

class HttpChatProvider : public ChatProvider {
  public:
    explicit HttpChatProvider(HttpChatConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.endpoint.empty()) throw ConfigError("chat provider: endpoint required");
        url_ = parse_url(cfg_.endpoint);
    }

    ProviderResponse complete(const std::string& prompt) override {
        Json body;
        body["model"] = cfg_.model;
        body["messages"] = Json::array({Json{{"role", "user"}, {"content", prompt}}});
        body["temperature"] = cfg_.temperature;

        auto client = make_http_client(url_, cfg_.timeout_ms);
        httplib::Headers headers;
        if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key)
            headers.emplace("Authorization", std::string("Bearer ") + key);

        auto res = client->Post(url_.path, headers, body.dump(), "application/json");
        ProviderResponse out;
        if (!res) {
            out.error = "transport: " + httplib::to_string(res.error());
            return out;
        }
        out.status = res->status;
        if (!out.ok()) {
            out.error = res->body.substr(0, 512);
            return out;
        }
        Json j = Json::parse(res->body, nullptr, false);
        if (j.is_discarded() || !j.contains("choices") || !j["choices"].is_array() ||
            j["choices"].empty() || !j["choices"][0].contains("message") ||
            !j["choices"][0]["message"].contains("content")) {
            out.status = 0;
            out.error = "unexpected completion payload";
            return out;
        }
        out.content = j["choices"][0]["message"]["content"].get<std::string>();
        return out;
    }

  private:
    HttpChatConfig cfg_;
    ParsedUrl url_;
};

// Deterministic stand-in driven by a jsonl fixture. Entries match either by
// prompt hash or by global call order:
//   {"prompt_hash": "<16 hex>", "response": "...", "status"?: int}
//   {"match_index": 0, "response": "..."}
// Repeated prompt_hash entries form a queue consumed call by call; the last
// entry sticks so steady-state replays work.
class FixtureChatProvider : public ChatProvider {
  public:
    explicit FixtureChatProvider(const std::filesystem::path& fixture_path) {
        for_each_jsonl_record(fixture_path, [&](std::size_t lineno, const Json& rec) {
            if (!rec.contains("response"))
                throw DataError(fixture_path.string() + ":" + std::to_string(lineno) +
                                ": fixture entry needs \"response\"");
            Entry e;
            e.content = rec["response"].get<std::string>();
            e.status = rec.value("status", 200);
            if (rec.contains("prompt_hash")) {
                const std::uint64_t h =
                    std::stoull(rec["prompt_hash"].get<std::string>(), nullptr, 16);
                by_hash_[h].push_back(std::move(e));
            } else if (rec.contains("match_index")) {
                const auto ix = rec["match_index"].get<std::size_t>();
                if (by_index_.size() <= ix) by_index_.resize(ix + 1);
                by_index_[ix] = std::move(e);
            } else {
                throw DataError(fixture_path.string() + ":" + std::to_string(lineno) +
                                ": fixture entry needs \"prompt_hash\" or \"match_index\"");
            }
        });
    }

    ProviderResponse complete(const std::string& prompt) override {
        std::lock_guard<std::mutex> lock(mu_);
        const std::uint64_t h = fnv1a64(prompt);
        ProviderResponse out;
        if (auto it = by_hash_.find(h); it != by_hash_.end() && !it->second.empty()) {
            Entry e = it->second.front();
            if (it->second.size() > 1) it->second.pop_front();
            out.status = e.status;
            out.content = e.content;
            if (!out.ok()) out.error = "fixture-scripted status";
            ++calls_;
            return out;
        }
        const std::size_t ix = calls_++;
        if (ix < by_index_.size() && by_index_[ix]) {
            out.status = by_index_[ix]->status;
            out.content = by_index_[ix]->content;
            if (!out.ok()) out.error = "fixture-scripted status";
            return out;
        }
        out.status = 404;
        out.error = "no fixture entry for prompt hash " + to_hex(h);
        return out;
    }

  private:
    struct Entry {
        int status = 200;
        std::string content;
    };
    std::mutex mu_;
    std::unordered_map<std::uint64_t, std::deque<Entry>> by_hash_;
    std::vector<std::optional<Entry>> by_index_;
    std::size_t calls_ = 0;
};

// ---------------------------------------------------------------------------
// Rate limiting, audit log, retrying client
// ---------------------------------------------------------------------------

class TokenBucket {
  public:
    explicit TokenBucket(std::uint32_t per_minute)
        : per_minute_(per_minute),
          tokens_(per_minute),
          last_(std::chrono::steady_clock::now()) {}

    void acquire() {
        if (per_minute_ == 0) return;  // unlimited
        for (;;) {
            std::unique_lock<std::mutex> lock(mu_);
            refill();
            if (tokens_ >= 1.0) {
                tokens_ -= 1.0;
                return;
            }
            const double deficit = 1.0 - tokens_;
            const auto wait = std::chrono::milliseconds(
                static_cast<std::int64_t>(deficit * 60000.0 / per_minute_) + 1);
            lock.unlock();
            std::this_thread::sleep_for(wait);
        }
    }

  private:
    void refill() {
        const auto now = std::chrono::steady_clock::now();
        const double secs = std::chrono::duration<double>(now - last_).count();
        last_ = now;
        tokens_ = std::min(static_cast<double>(per_minute_),
                           tokens_ + secs * per_minute_ / 60.0);
    }

    std::uint32_t per_minute_;
    double tokens_;
    std::chrono::steady_clock::time_point last_;
    std::mutex mu_;
};

// Append-only request/response journal that doubles as a replay cache: a
// prompt whose hash is already journaled never reaches the provider again.
class AuditLog {
  public:
    explicit AuditLog(const std::filesystem::path& path) : path_(path) {
        namespace fs = std::filesystem;
        if (fs::exists(path_)) {
            std::ifstream in(path_);
            std::string line;
            while (std::getline(in, line)) {
                if (!line.empty() && line.back() == '\r') line.pop_back();
                if (line.empty()) continue;
                Json rec = Json::parse(line, nullptr, false);
                if (rec.is_discarded() || !rec.contains("prompt_hash") ||
                    !rec.contains("response")) {
                    ++torn_;  // torn tail from a crashed run; ignore
                    continue;
                }
                cache_[std::stoull(rec["prompt_hash"].get<std::string>(), nullptr, 16)] =
                    rec["response"].get<std::string>();
            }
        }
        out_.open(path_, std::ios::app);
        if (!out_) throw DataError("cannot open audit log: " + path_.string());
    }

    std::optional<std::string> lookup(std::uint64_t key) const {
        std::lock_guard<std::mutex> lock(mu_);
        auto it = cache_.find(key);
        if (it == cache_.end()) return std::nullopt;
        return it->second;
    }

    void append(std::uint64_t key, const std::string& request, const std::string& response,
                std::size_t attempt) {
        std::lock_guard<std::mutex> lock(mu_);
        Json rec;
        rec["prompt_hash"] = to_hex(key);
        rec["request"] = request;
        rec["response"] = response;
        rec["ts"] = static_cast<std::int64_t>(std::time(nullptr));
        rec["attempt"] = attempt;
        out_ << rec.dump() << "\n";
        out_.flush();
        cache_[key] = response;
    }

    std::size_t cached_count() const {
        std::lock_guard<std::mutex> lock(mu_);
        return cache_.size();
    }
    std::size_t torn_lines() const { return torn_; }
    const std::filesystem::path& path() const { return path_; }

  private:
    std::filesystem::path path_;
    std::ofstream out_;
    mutable std::mutex mu_;
    std::unordered_map<std::uint64_t, std::string> cache_;
    std::size_t torn_ = 0;
};

// Cache key for a prompt: variant 0 is the plain prompt hash (fixture files
// key on it); re-asks of the same prompt get distinct keys so a cached
// rejection is not replayed forever.
inline std::uint64_t prompt_cache_key(const std::string& prompt, std::size_t variant = 0) {
    const std::uint64_t h = fnv1a64(prompt);
    return variant == 0 ? h : hash_combine(h, variant);
}

class ChatClient {
  public:
    ChatClient(ChatProvider& provider, LlmPolicy policy, AuditLog* audit = nullptr)
        : provider_(provider),
          policy_(std::move(policy)),
          audit_(audit),
          bucket_(policy_.rate_per_minute),
          rng_(0x9e3779b97f4a7c15ull) {
        policy_.validate();
    }

    // At most max_retries+1 attempts with capped exponential backoff and
    // jitter. Retries transport failures, 429 and 5xx; other statuses fail
    // fast. `variant` > 0 distinguishes re-asks of the same prompt.
    std::string request_with_retry(const std::string& prompt, std::size_t variant = 0) {
        const std::uint64_t key = prompt_cache_key(prompt, variant);
        if (audit_)
            if (auto hit = audit_->lookup(key)) return *hit;

        int last_status = 0;
        std::string last_error;
        for (std::size_t attempt = 0; attempt <= policy_.max_retries; ++attempt) {
            if (attempt > 0) sleep_backoff(attempt);
            bucket_.acquire();
            ProviderResponse r = provider_.complete(prompt);
            if (r.ok()) {
                if (audit_) audit_->append(key, prompt, r.content, attempt + 1);
                return r.content;
            }
            last_status = r.status;
            last_error = r.error;
            const bool retryable = r.status == 0 || r.status == 429 || r.status >= 500;
            if (!retryable) {
                throw ProviderError("provider rejected request (" + std::to_string(r.status) +
                                        "): " + r.error,
                                    attempt + 1, r.status);
            }
        }
        throw ProviderError("retries exhausted after " +
                                std::to_string(policy_.max_retries + 1) + " attempts: " +
                                last_error,
                            policy_.max_retries + 1, last_status);
    }

    const LlmPolicy& policy() const { return policy_; }
    AuditLog* audit() { return audit_; }

  private:
    void sleep_backoff(std::size_t attempt) {
        const std::uint32_t shift = attempt > 6 ? 6 : static_cast<std::uint32_t>(attempt);
        std::uint64_t ms = std::min<std::uint64_t>(
            static_cast<std::uint64_t>(policy_.backoff_base_ms) << shift, policy_.backoff_cap_ms);
        {
            std::lock_guard<std::mutex> lock(rng_mu_);
            ms += det_uniform(rng_, ms / 2 + 1);  // jitter
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(ms));
    }

    ChatProvider& provider_;
    LlmPolicy policy_;
    AuditLog* audit_;
    TokenBucket bucket_;
    std::mt19937_64 rng_;
    std::mutex rng_mu_;
};

}  // namespace icsd::llm
