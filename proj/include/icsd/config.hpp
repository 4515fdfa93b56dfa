#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "icsd/corpus.hpp"
#include "icsd/corpusgen.hpp"
#include "icsd/embed.hpp"
#include "icsd/errors.hpp"
#include "icsd/hash.hpp"
#include "icsd/jsonl.hpp"
#include "icsd/llm.hpp"
#include "icsd/synth.hpp"

namespace icsd::config {

struct CorpusInput {
    std::filesystem::path path;
    corpus::CorpusFormat format = corpus::CorpusFormat::plain_lines;
    std::size_t min_words = corpus::kNoLengthBound;  // no bound unless set
    std::size_t max_words = corpus::kNoLengthBound;
    bool dedup = true;
};

struct RunConfig {
    std::filesystem::path output_dir = "out";
    CorpusInput corpus;

    embed::EmbedderConfig embedder;
    std::filesystem::path vocab_path;  // exact-vocab mode reads its vocabulary here

    std::size_t group_size = 30;  // query + (group_size - 1) neighbors
    bool token_prefilter = false;
    std::size_t block = 1024;

    llm::SelectionBounds bounds;
    std::size_t max_summary_words = 50;

    llm::LlmPolicy policy;
    llm::HttpChatConfig chat;
    std::filesystem::path fixture_path;  // non-empty selects the fixture provider
    std::filesystem::path audit_log;     // default <output_dir>/audit.jsonl

    synth::PipelineMode mode = synth::PipelineMode::icsd;
    synth::GenParams gen;
    std::string image_backend = "stub";  // stub | http | none
    std::string image_endpoint;
    std::filesystem::path image_index;  // retrieval_baseline feature file
    std::size_t sum_neighbors = 5;

    std::vector<std::pair<std::filesystem::path, gent::ObjectProvenance>> gent_sources;
    gent::GentRunConfig gent;

    std::uint64_t seed = 0;
    std::size_t threads = 0;  // 0 = hardware default

    std::filesystem::path audit_log_path() const {
        return audit_log.empty() ? output_dir / "audit.jsonl" : audit_log;
    }
};

namespace detail {

inline void check_keys(const Json& obj, const std::vector<std::string>& known,
                       const std::string& scope, std::vector<std::string>& errors) {
    for (const auto& [key, value] : obj.items()) {
        bool ok = false;
        for (const auto& k : known)
            if (k == key) {
                ok = true;
                break;
            }
        if (!ok) errors.push_back("unknown key \"" + scope + key + "\"");
    }
}

template <typename T>
void read_field(const Json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj[key].get<T>();
}

inline void read_path(const Json& obj, const char* key, std::filesystem::path& out) {
    if (obj.contains(key)) out = obj[key].get<std::string>();
}

}  // namespace detail

// Applies a parsed config tree onto defaults. Unknown keys are collected as
// errors so typos never silently fall back to a default.
inline RunConfig config_from_json(const Json& root) {
    RunConfig cfg;
    std::vector<std::string> errors;
    detail::check_keys(root,
                       {"output_dir", "corpus", "embedder", "grouping", "selection", "llm",
                        "generation", "mode", "seed", "sum_neighbors", "image_index", "gent",
                        "threads"},
                       "", errors);

    detail::read_path(root, "output_dir", cfg.output_dir);
    if (root.contains("mode")) cfg.mode = synth::mode_from_string(root["mode"].get<std::string>());
    detail::read_field(root, "seed", cfg.seed);
    detail::read_field(root, "sum_neighbors", cfg.sum_neighbors);
    detail::read_path(root, "image_index", cfg.image_index);
    detail::read_field(root, "threads", cfg.threads);

    if (root.contains("corpus")) {
        const Json& c = root["corpus"];
        detail::check_keys(c, {"path", "format", "min_words", "max_words", "dedup"}, "corpus.",
                           errors);
        detail::read_path(c, "path", cfg.corpus.path);
        if (c.contains("format"))
            cfg.corpus.format = corpus::corpus_format_from(c["format"].get<std::string>());
        detail::read_field(c, "min_words", cfg.corpus.min_words);
        detail::read_field(c, "max_words", cfg.corpus.max_words);
        detail::read_field(c, "dedup", cfg.corpus.dedup);
    }

    if (root.contains("embedder")) {
        const Json& e = root["embedder"];
        detail::check_keys(e,
                           {"mode", "dim", "hash_seed", "vocab_path", "endpoint", "model",
                            "api_key_env", "batch_size"},
                           "embedder.", errors);
        if (e.contains("mode"))
            cfg.embedder.mode = embed::embedder_mode_from(e["mode"].get<std::string>());
        detail::read_field(e, "dim", cfg.embedder.dim);
        detail::read_field(e, "hash_seed", cfg.embedder.hash_seed);
        detail::read_path(e, "vocab_path", cfg.vocab_path);
        detail::read_field(e, "endpoint", cfg.embedder.remote.endpoint);
        detail::read_field(e, "model", cfg.embedder.remote.model);
        detail::read_field(e, "api_key_env", cfg.embedder.remote.api_key_env);
        detail::read_field(e, "batch_size", cfg.embedder.remote.batch_size);
    }

    if (root.contains("grouping")) {
        const Json& g = root["grouping"];
        detail::check_keys(g, {"group_size", "token_prefilter", "block"}, "grouping.", errors);
        detail::read_field(g, "group_size", cfg.group_size);
        detail::read_field(g, "token_prefilter", cfg.token_prefilter);
        detail::read_field(g, "block", cfg.block);
    }

    if (root.contains("selection")) {
        const Json& s = root["selection"];
        detail::check_keys(s, {"min_sel", "max_sel", "max_summary_words"}, "selection.", errors);
        detail::read_field(s, "min_sel", cfg.bounds.min_sel);
        detail::read_field(s, "max_sel", cfg.bounds.max_sel);
        detail::read_field(s, "max_summary_words", cfg.max_summary_words);
    }

    if (root.contains("llm")) {
        const Json& l = root["llm"];
        detail::check_keys(l,
                           {"endpoint", "model", "api_key_env", "temperature", "rate_per_minute",
                            "concurrency", "max_retries", "backoff_base_ms", "backoff_cap_ms",
                            "timeout_ms", "reask_budget", "fixture", "audit_log"},
                           "llm.", errors);
        detail::read_field(l, "endpoint", cfg.chat.endpoint);
        detail::read_field(l, "model", cfg.chat.model);
        detail::read_field(l, "api_key_env", cfg.chat.api_key_env);
        detail::read_field(l, "temperature", cfg.chat.temperature);
        detail::read_field(l, "rate_per_minute", cfg.policy.rate_per_minute);
        detail::read_field(l, "concurrency", cfg.policy.concurrency);
        detail::read_field(l, "max_retries", cfg.policy.max_retries);
        detail::read_field(l, "backoff_base_ms", cfg.policy.backoff_base_ms);
        detail::read_field(l, "backoff_cap_ms", cfg.policy.backoff_cap_ms);
        detail::read_field(l, "timeout_ms", cfg.policy.timeout_ms);
        detail::read_field(l, "reask_budget", cfg.policy.reask_budget);
        detail::read_path(l, "fixture", cfg.fixture_path);
        detail::read_path(l, "audit_log", cfg.audit_log);
        cfg.policy.temperature = cfg.chat.temperature;
        cfg.chat.timeout_ms = cfg.policy.timeout_ms;
    }

    if (root.contains("generation")) {
        const Json& g = root["generation"];
        detail::check_keys(g, {"width", "height", "steps", "sampler", "backend", "endpoint"},
                           "generation.", errors);
        detail::read_field(g, "width", cfg.gen.width);
        detail::read_field(g, "height", cfg.gen.height);
        detail::read_field(g, "steps", cfg.gen.steps);
        detail::read_field(g, "sampler", cfg.gen.sampler);
        detail::read_field(g, "backend", cfg.image_backend);
        detail::read_field(g, "endpoint", cfg.image_endpoint);
    }

    if (root.contains("gent")) {
        const Json& g = root["gent"];
        detail::check_keys(g,
                           {"sources", "objects_per_prompt", "sentences_per_prompt", "min_words",
                            "max_words", "rounds", "target_sentences"},
                           "gent.", errors);
        if (g.contains("sources")) {
            for (const auto& s : g["sources"]) {
                cfg.gent_sources.emplace_back(
                    s.at("path").get<std::string>(),
                    gent::provenance_from_string(s.value("provenance", "vg_sample")));
            }
        }
        detail::read_field(g, "objects_per_prompt", cfg.gent.objects_per_prompt);
        detail::read_field(g, "sentences_per_prompt", cfg.gent.sentences_per_prompt);
        detail::read_field(g, "min_words", cfg.gent.min_words);
        detail::read_field(g, "max_words", cfg.gent.max_words);
        detail::read_field(g, "rounds", cfg.gent.rounds);
        detail::read_field(g, "target_sentences", cfg.gent.target_sentences);
    }

    if (!errors.empty()) {
        std::string msg = "config errors:";
        for (const auto& e : errors) msg += "\n  - " + e;
        throw ConfigError(msg);
    }
    cfg.gent.seed = cfg.seed;
    return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    Json root = Json::parse(in, nullptr, false);
    if (root.is_discarded()) throw ConfigError("config is not valid JSON: " + path.string());
    if (!root.is_object()) throw ConfigError("config root must be an object: " + path.string());
    return config_from_json(root);
}

inline Json config_to_json(const RunConfig& cfg) {
    Json j;
    j["output_dir"] = cfg.output_dir.string();
    j["corpus"]["path"] = cfg.corpus.path.string();
    j["corpus"]["format"] = std::string(corpus::to_string(cfg.corpus.format));
    j["corpus"]["min_words"] = cfg.corpus.min_words;
    j["corpus"]["max_words"] = cfg.corpus.max_words;
    j["corpus"]["dedup"] = cfg.corpus.dedup;
    j["embedder"]["mode"] = std::string(embed::to_string(cfg.embedder.mode));
    j["embedder"]["dim"] = cfg.embedder.dim;
    j["embedder"]["hash_seed"] = cfg.embedder.hash_seed;
    j["embedder"]["vocab_path"] = cfg.vocab_path.string();
    j["embedder"]["endpoint"] = cfg.embedder.remote.endpoint;
    j["embedder"]["model"] = cfg.embedder.remote.model;
    j["grouping"]["group_size"] = cfg.group_size;
    j["grouping"]["token_prefilter"] = cfg.token_prefilter;
    j["grouping"]["block"] = cfg.block;
    j["selection"]["min_sel"] = cfg.bounds.min_sel;
    j["selection"]["max_sel"] = cfg.bounds.max_sel;
    j["selection"]["max_summary_words"] = cfg.max_summary_words;
    j["llm"]["endpoint"] = cfg.chat.endpoint;
    j["llm"]["model"] = cfg.chat.model;
    j["llm"]["temperature"] = cfg.chat.temperature;
    j["llm"]["rate_per_minute"] = cfg.policy.rate_per_minute;
    j["llm"]["concurrency"] = cfg.policy.concurrency;
    j["llm"]["max_retries"] = cfg.policy.max_retries;
    j["llm"]["backoff_base_ms"] = cfg.policy.backoff_base_ms;
    j["llm"]["backoff_cap_ms"] = cfg.policy.backoff_cap_ms;
    j["llm"]["timeout_ms"] = cfg.policy.timeout_ms;
    j["llm"]["reask_budget"] = cfg.policy.reask_budget;
    j["llm"]["fixture"] = cfg.fixture_path.string();
    j["generation"]["width"] = cfg.gen.width;
    j["generation"]["height"] = cfg.gen.height;
    j["generation"]["steps"] = cfg.gen.steps;
    j["generation"]["sampler"] = cfg.gen.sampler;
    j["generation"]["backend"] = cfg.image_backend;
    j["generation"]["endpoint"] = cfg.image_endpoint;
    j["mode"] = synth::to_string(cfg.mode);
    j["seed"] = cfg.seed;
    j["sum_neighbors"] = cfg.sum_neighbors;
    j["image_index"] = cfg.image_index.string();
    j["gent"]["objects_per_prompt"] = cfg.gent.objects_per_prompt;
    j["gent"]["sentences_per_prompt"] = cfg.gent.sentences_per_prompt;
    j["gent"]["min_words"] = cfg.gent.min_words;
    j["gent"]["max_words"] = cfg.gent.max_words;
    j["gent"]["rounds"] = cfg.gent.rounds;
    j["gent"]["target_sentences"] = cfg.gent.target_sentences;
    j["threads"] = cfg.threads;
    return j;
}

inline std::uint64_t config_hash(const RunConfig& cfg) {
    return fnv1a64(config_to_json(cfg).dump());
}

inline bool needs_grouping(synth::PipelineMode m) {
    return m == synth::PipelineMode::sel_wo_sum || m == synth::PipelineMode::sum_wo_sel ||
           m == synth::PipelineMode::icsd;
}

inline bool needs_llm(synth::PipelineMode m) {
    return m != synth::PipelineMode::uni_context;
}

// Enumerates every problem instead of stopping at the first.
inline void validate_for_run(const RunConfig& cfg) {
    std::vector<std::string> errors;
    if (cfg.corpus.path.empty())
        errors.push_back("corpus.path is required");
    else if (!std::filesystem::exists(cfg.corpus.path))
        errors.push_back("corpus.path does not exist: " + cfg.corpus.path.string());
    if (needs_grouping(cfg.mode) && cfg.group_size < 2)
        errors.push_back("grouping.group_size must be >= 2 for mode " +
                         std::string(synth::to_string(cfg.mode)));
    if (cfg.bounds.min_sel == 0 || cfg.bounds.min_sel > cfg.bounds.max_sel)
        errors.push_back("selection bounds must satisfy 1 <= min_sel <= max_sel");
    if (cfg.max_summary_words == 0) errors.push_back("selection.max_summary_words must be >= 1");
    if (cfg.embedder.mode == embed::EmbedderMode::exact_vocab && cfg.vocab_path.empty())
        errors.push_back("embedder.vocab_path is required for exact-vocab mode");
    if (!cfg.vocab_path.empty() && !std::filesystem::exists(cfg.vocab_path))
        errors.push_back("embedder.vocab_path does not exist: " + cfg.vocab_path.string());
    if (cfg.embedder.mode == embed::EmbedderMode::remote && cfg.embedder.remote.endpoint.empty())
        errors.push_back("embedder.endpoint is required for remote mode");
    if (needs_llm(cfg.mode) && cfg.fixture_path.empty() && cfg.chat.endpoint.empty())
        errors.push_back("llm.endpoint or llm.fixture is required for mode " +
                         std::string(synth::to_string(cfg.mode)));
    if (!cfg.fixture_path.empty() && !std::filesystem::exists(cfg.fixture_path))
        errors.push_back("llm.fixture does not exist: " + cfg.fixture_path.string());
    if (cfg.mode == synth::PipelineMode::retrieval_baseline) {
        if (cfg.image_index.empty())
            errors.push_back("image_index is required for retrieval_baseline");
        else if (!std::filesystem::exists(cfg.image_index))
            errors.push_back("image_index does not exist: " + cfg.image_index.string());
    }
    if (cfg.image_backend != "stub" && cfg.image_backend != "http" && cfg.image_backend != "none")
        errors.push_back("generation.backend must be stub, http, or none");
    if (cfg.image_backend == "http" && cfg.image_endpoint.empty())
        errors.push_back("generation.endpoint is required for the http backend");
    if (cfg.mode == synth::PipelineMode::sum_wo_sel && cfg.group_size < cfg.sum_neighbors + 1)
        errors.push_back("grouping.group_size must be >= sum_neighbors + 1 for sum_wo_sel");
    if (!errors.empty()) {
        std::string msg = "config errors:";
        for (const auto& e : errors) msg += "\n  - " + e;
        throw ConfigError(msg);
    }
}

}  // namespace icsd::config
