#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "icsd/corpus.hpp"
#include "icsd/errors.hpp"
#include "icsd/hash.hpp"
#include "icsd/jsonl.hpp"
#include "icsd/llm.hpp"
#include "icsd/prompt_templates.hpp"
#include "icsd/util.hpp"

namespace icsd::gent {

enum class ObjectProvenance { coco80, vg_sample, llm_common };

inline const char* to_string(ObjectProvenance p) {
    switch (p) {
        case ObjectProvenance::coco80: return "coco80";
        case ObjectProvenance::vg_sample: return "vg_sample";
        case ObjectProvenance::llm_common: return "llm_common";
    }
    return "unknown";
}

inline ObjectProvenance provenance_from_string(const std::string& s) {
    if (s == "coco80") return ObjectProvenance::coco80;
    if (s == "vg_sample") return ObjectProvenance::vg_sample;
    if (s == "llm_common") return ObjectProvenance::llm_common;
    throw ConfigError("unknown object provenance: " + s);
}

struct ObjectPool {
    std::vector<std::string> objects;               // lowercase, trimmed, unique
    std::vector<ObjectProvenance> provenance;       // parallel; first source wins
    std::map<std::string, std::size_t> source_counts;  // per provenance tag

    std::size_t size() const { return objects.size(); }
};

// Union of one-object-per-line source files, normalized and deduplicated in
// first-seen order.
inline ObjectPool build_object_pool(
    const std::vector<std::pair<std::filesystem::path, ObjectProvenance>>& sources) {
    if (sources.empty()) throw ConfigError("build_object_pool: no sources");
    ObjectPool pool;
    std::unordered_set<std::string> seen;
    for (const auto& [path, prov] : sources) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open object source: " + path.string());
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            std::string obj = to_lower_ascii(collapse_whitespace(line));
            if (obj.empty()) continue;
            if (!seen.insert(obj).second) continue;
            pool.objects.push_back(std::move(obj));
            pool.provenance.push_back(prov);
            ++pool.source_counts[to_string(prov)];
        }
    }
    if (pool.objects.empty()) throw DataError("object pool is empty after normalization");
    return pool;
}

// Uniform sample without replacement; deterministic per seed.
inline std::vector<std::string> sample_objects(const ObjectPool& pool, std::size_t count,
                                               std::uint64_t seed) {
    if (count > pool.size())
        throw DataError("sample_objects: requested " + std::to_string(count) + " from pool of " +
                        std::to_string(pool.size()));
    std::vector<std::size_t> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(hash_mix(seed));
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t j = i + det_uniform(rng, order.size() - i);
        std::swap(order[i], order[j]);
    }
    std::vector<std::string> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(pool.objects[order[i]]);
    return out;
}

inline std::string build_gent_prompt(const std::vector<std::string>& objects,
                                     std::size_t sentences_per_prompt = 100,
                                     std::size_t min_words = 8, std::size_t max_words = 15) {
    return prompts::render_gent(objects, sentences_per_prompt, min_words, max_words);
}

// Split on ';', trim whitespace and one layer of surrounding quotes, drop
// empties. An empty result is not an error; the caller logs it.
inline std::vector<std::string> parse_gent_response(const std::string& raw) {
    std::vector<std::string> out;
    std::size_t start = 0;
    const std::string norm = llm::normalize_typographic_quotes(raw);
    while (start <= norm.size()) {
        std::size_t end = norm.find(';', start);
        if (end == std::string::npos) end = norm.size();
        std::string s = trim(norm.substr(start, end - start));
        if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') ||
                              (s.front() == '\'' && s.back() == '\'')))
            s = trim(s.substr(1, s.size() - 2));
        if (!s.empty()) out.push_back(std::move(s));
        start = end + 1;
    }
    return out;
}

// Accumulates generated sentences into a growing corpus: length-filters to
// [min_words, max_words] tokens, deduplicates by token sequence, keeps arrival
// order.
class GentAccumulator {
  public:
    GentAccumulator(std::size_t min_words = 8, std::size_t max_words = 15)
        : min_words_(min_words), max_words_(max_words) {}

    std::size_t add_batch(const std::vector<std::string>& sentences) {
        std::size_t added = 0;
        for (const auto& s : sentences) {
            ++received_;
            const std::string text = collapse_whitespace(s);
            const auto tokens = corpus::tokenize(text);
            if (tokens.size() < min_words_ || tokens.size() > max_words_) {
                ++length_filtered_;
                continue;
            }
            if (!seen_.insert(corpus::join_tokens(tokens)).second) {
                ++duplicates_;
                continue;
            }
            kept_.push_back(text);
            ++added;
        }
        return added;
    }

    corpus::CorpusHandle to_corpus() const {
        corpus::CorpusHandle c;
        c.manifest.origin = "generated";
        for (const auto& text : kept_) {
            corpus::Caption cap;
            cap.id = c.captions.size();
            cap.text = text;
            cap.tokens = corpus::tokenize(text);
            cap.source = corpus::CaptionSource::generated;
            c.captions.push_back(std::move(cap));
        }
        c.manifest.records_read = received_;
        c.manifest.length_filtered = length_filtered_;
        c.manifest.duplicates_dropped = duplicates_;
        return c;
    }

    std::size_t kept() const { return kept_.size(); }
    std::size_t received() const { return received_; }
    std::size_t length_filtered() const { return length_filtered_; }
    std::size_t duplicates() const { return duplicates_; }

  private:
    std::size_t min_words_, max_words_;
    std::size_t received_ = 0, length_filtered_ = 0, duplicates_ = 0;
    std::unordered_set<std::string> seen_;
    std::vector<std::string> kept_;
};

struct GentRunConfig {
    std::size_t objects_per_prompt = 80;
    std::size_t sentences_per_prompt = 100;
    std::size_t min_words = 8;
    std::size_t max_words = 15;
    std::size_t target_sentences = 0;  // 0 = run exactly `rounds`
    std::size_t rounds = 1;
    std::size_t max_rounds = 100000;
    std::uint64_t seed = 0;
};

struct GentRunResult {
    corpus::CorpusHandle corpus;
    std::size_t rounds_run = 0;
    std::size_t received = 0;
    std::size_t length_filtered = 0;
    std::size_t duplicates = 0;
};

// Rounds of sample -> prompt -> parse -> accumulate. Each round's object
// sample derives from (seed, round), so a rerun against the same audit log
// reproduces the same corpus prefix. Stops on target, round budget, or a long
// run of rounds contributing nothing new.
inline GentRunResult run_gent(llm::ChatClient& client, const ObjectPool& pool,
                              const GentRunConfig& cfg) {
    if (cfg.objects_per_prompt == 0 || cfg.objects_per_prompt > pool.size())
        throw ConfigError("gent: objects_per_prompt must be in [1, pool size]");
    GentAccumulator acc(cfg.min_words, cfg.max_words);
    GentRunResult res;
    std::size_t stalled = 0;
    for (std::size_t round = 0; round < cfg.max_rounds; ++round) {
        if (cfg.target_sentences == 0 && round >= cfg.rounds) break;
        if (cfg.target_sentences > 0 && acc.kept() >= cfg.target_sentences) break;
        const auto objects =
            sample_objects(pool, cfg.objects_per_prompt, hash_combine(cfg.seed, round));
        const std::string prompt = build_gent_prompt(objects, cfg.sentences_per_prompt,
                                                     cfg.min_words, cfg.max_words);
        const std::string raw = client.request_with_retry(prompt);
        const std::size_t added = acc.add_batch(parse_gent_response(raw));
        ++res.rounds_run;
        stalled = added == 0 ? stalled + 1 : 0;
        if (stalled >= 20) break;  // provider keeps yielding nothing usable
    }
    res.corpus = acc.to_corpus();
    res.received = acc.received();
    res.length_filtered = acc.length_filtered();
    res.duplicates = acc.duplicates();
    return res;
}

}  // namespace icsd::gent
