#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "icsd/config.hpp"
#include "icsd/corpus.hpp"
#include "icsd/embed.hpp"
#include "icsd/errors.hpp"
#include "icsd/group.hpp"
#include "icsd/hash.hpp"
#include "icsd/jsonl.hpp"
#include "icsd/llm.hpp"
#include "icsd/store.hpp"
#include "icsd/synth.hpp"
#include "icsd/version.hpp"

namespace icsd::pipeline {

struct PipelineResult {
    std::filesystem::path manifest_path;
    std::filesystem::path report_path;
    Json report;
    std::vector<synth::MultiContextPair> pairs;
};

namespace detail {

class StageClock {
  public:
    void start(const std::string& stage) {
        current_ = stage;
        t0_ = std::chrono::steady_clock::now();
    }
    void stop() {
        if (current_.empty()) return;
        const auto dt = std::chrono::steady_clock::now() - t0_;
        ms_[current_] += std::chrono::duration<double, std::milli>(dt).count();
        current_.clear();
    }
    Json to_json() const {
        Json j = Json::object();
        for (const auto& [k, v] : ms_) j[k] = v;
        return j;
    }

  private:
    std::string current_;
    std::chrono::steady_clock::time_point t0_;
    std::map<std::string, double> ms_;
};

inline std::vector<std::string> load_vocab(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open vocab file: " + path.string());
    std::vector<std::string> vocab;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::string w = to_lower_ascii(trim(line));
        if (!w.empty()) vocab.push_back(std::move(w));
    }
    if (vocab.empty()) throw ConfigError("vocab file is empty: " + path.string());
    return vocab;
}

inline embed::EmbedderConfig embedder_config(const config::RunConfig& cfg) {
    embed::EmbedderConfig ec = cfg.embedder;
    if (ec.mode == embed::EmbedderMode::exact_vocab) ec.vocab = load_vocab(cfg.vocab_path);
    return ec;
}

inline std::uint64_t corpus_stage_key(const config::RunConfig& cfg) {
    std::uint64_t h = hash_file(cfg.corpus.path);
    h = hash_combine(h, fnv1a64(corpus::to_string(cfg.corpus.format)));
    h = hash_combine(h, cfg.corpus.min_words);
    h = hash_combine(h, cfg.corpus.max_words);
    h = hash_combine(h, cfg.corpus.dedup ? 1 : 0);
    return h;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stages. Each is checkpointed (see store::StageWriter): committed output
// with an unchanged input hash is reloaded, not recomputed.
// ---------------------------------------------------------------------------

inline corpus::CorpusHandle ingest_stage(const config::RunConfig& cfg) {
    const std::uint64_t key = detail::corpus_stage_key(cfg);
    store::StageWriter sw(cfg.output_dir, "corpus", key);
    if (sw.skip()) return corpus::load_canonical(sw.path());

    corpus::CorpusHandle c = corpus::load_corpus(cfg.corpus.path, cfg.corpus.format);
    if (cfg.corpus.min_words != corpus::kNoLengthBound ||
        cfg.corpus.max_words != corpus::kNoLengthBound)
        c = corpus::filter_by_length(c, cfg.corpus.min_words, cfg.corpus.max_words);
    if (cfg.corpus.dedup) c = corpus::dedup(c);
    for (const auto& cap : c.captions) sw.append(corpus::to_json(cap));
    sw.commit();

    Json meta;  // ingest counters survive stage skips for stable reports
    meta["records_read"] = c.manifest.records_read;
    meta["blanks_skipped"] = c.manifest.blanks_skipped;
    meta["length_filtered"] = c.manifest.length_filtered;
    meta["duplicates_dropped"] = c.manifest.duplicates_dropped;
    std::ofstream m(cfg.output_dir / "corpus.meta.json", std::ios::trunc);
    m << meta.dump() << "\n";
    return c;
}

inline embed::EmbeddingMatrix embed_stage(const config::RunConfig& cfg,
                                          const corpus::CorpusHandle& c) {
    embed::EmbedCorpusOptions opts;
    opts.cache_dir = cfg.output_dir / "cache";
    opts.threads = cfg.threads;
    return embed::embed_corpus(c, detail::embedder_config(cfg), opts);
}

inline std::uint64_t groups_stage_key(const config::RunConfig& cfg,
                                      const corpus::CorpusHandle& c,
                                      std::uint64_t embedder_fingerprint) {
    std::uint64_t h = corpus::content_hash(c);
    h = hash_combine(h, embedder_fingerprint);
    h = hash_combine(h, cfg.group_size);
    h = hash_combine(h, cfg.token_prefilter ? 1 : 0);
    return h;
}

inline std::vector<group::Group> groups_stage(const config::RunConfig& cfg,
                                              const corpus::CorpusHandle& c,
                                              const embed::EmbeddingMatrix& m,
                                              std::uint64_t key) {
    store::StageWriter sw(cfg.output_dir, "groups", key);
    if (sw.skip()) return group::load_groups(sw.path());

    group::TopKOptions opts;
    opts.block = cfg.block;
    opts.threads = cfg.threads;
    opts.token_prefilter = cfg.token_prefilter;
    opts.prefilter_corpus = cfg.token_prefilter ? &c : nullptr;
    auto groups = group::top_k_all(m, cfg.group_size - 1, opts);
    for (const auto& g : groups) sw.append(group::to_json(g));
    sw.commit();
    return groups;
}

// Groups forced by shared image_id: query is the lowest caption id, members
// ascend, similarity is pinned at 1 (annotated same-image captions).
inline std::vector<group::Group> gtg_groups_stage(const config::RunConfig& cfg,
                                                  const corpus::CorpusHandle& c,
                                                  std::uint64_t key) {
    store::StageWriter sw(cfg.output_dir, "groups", key);
    if (sw.skip()) return group::load_groups(sw.path());

    std::map<std::string, std::vector<corpus::CaptionId>> by_image;
    for (const auto& cap : c.captions) {
        if (!cap.image_id)
            throw DataError("gtg mode requires image_id on every caption; caption " +
                            std::to_string(cap.id) + " has none");
        by_image[*cap.image_id].push_back(cap.id);
    }
    std::vector<group::Group> groups;
    groups.reserve(by_image.size());
    for (auto& [image_id, ids] : by_image) {
        std::sort(ids.begin(), ids.end());
        group::Group g;
        g.query_id = ids.front();
        g.member_ids = ids;
        g.scores.assign(ids.size(), 1.0f);
        groups.push_back(std::move(g));
    }
    std::sort(groups.begin(), groups.end(),
              [](const auto& a, const auto& b) { return a.query_id < b.query_id; });
    for (const auto& g : groups) sw.append(group::to_json(g));
    sw.commit();
    return groups;
}

// Greedy cover stage; returns indices into `groups` in pick order.
inline std::vector<std::size_t> cover_stage(const config::RunConfig& cfg,
                                            const corpus::CorpusHandle& c,
                                            const std::vector<group::Group>& groups,
                                            std::uint64_t groups_key) {
    const std::uint64_t key = hash_combine(groups_key, fnv1a64("cover"));
    std::unordered_map<std::uint64_t, std::size_t> by_query;
    for (std::size_t i = 0; i < groups.size(); ++i) by_query[groups[i].query_id] = i;

    store::StageWriter sw(cfg.output_dir, "cover", key);
    std::vector<std::size_t> order;
    if (sw.skip()) {
        for (const auto& rec : store::read_stage(cfg.output_dir, "cover")) {
            auto it = by_query.find(rec.at("query_id").get<std::uint64_t>());
            if (it == by_query.end())
                throw DataError("cover stage references unknown group; remove " +
                                sw.path().string() + " and rerun");
            order.push_back(it->second);
        }
        return order;
    }

    std::vector<corpus::CaptionId> ids(c.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = c.captions[i].id;
    group::CoverState cover = group::greedy_cover(groups, ids);
    for (std::size_t rank = 0; rank < cover.selected.size(); ++rank) {
        const std::uint64_t q = cover.selected[rank];
        sw.append(group::cover_pick_to_json(rank, q, cover.newly_covered[rank]));
        order.push_back(by_query.at(q));
    }
    sw.commit();
    return order;
}

// ---------------------------------------------------------------------------
// LLM-backed stages
// ---------------------------------------------------------------------------

struct LlmContext {
    std::unique_ptr<llm::ChatProvider> owned_provider;
    std::unique_ptr<llm::AuditLog> audit;
    std::unique_ptr<llm::ChatClient> client;
};

inline LlmContext make_llm_context(const config::RunConfig& cfg,
                                   llm::ChatProvider* provider_override = nullptr) {
    LlmContext ctx;
    llm::ChatProvider* provider = provider_override;
    if (!provider) {
        if (!cfg.fixture_path.empty())
            ctx.owned_provider = std::make_unique<llm::FixtureChatProvider>(cfg.fixture_path);
        else
            ctx.owned_provider = std::make_unique<llm::HttpChatProvider>(cfg.chat);
        provider = ctx.owned_provider.get();
    }
    std::filesystem::create_directories(cfg.output_dir);
    ctx.audit = std::make_unique<llm::AuditLog>(cfg.audit_log_path());
    ctx.client = std::make_unique<llm::ChatClient>(*provider, cfg.policy, ctx.audit.get());
    return ctx;
}

namespace detail {

struct SelectionOutcome {
    std::string status;  // accepted | rejected | skipped
    std::string reason;  // rejection reason or parse error note
    std::vector<std::size_t> indices;
    std::string summary;
    std::size_t asks = 0;
    std::uint64_t response_hash = 0;
};

// Ask/parse/validate with a bounded re-ask budget. A terminal validator
// rejection reports "rejected"; terminal parse failures report "skipped".
inline SelectionOutcome ask_selection(llm::ChatClient& client,
                                      const std::vector<std::string>& texts,
                                      std::uint64_t query_id, const config::RunConfig& cfg) {
    const auto prompt =
        llm::build_selection_prompt(texts, query_id, cfg.bounds, cfg.max_summary_words);
    SelectionOutcome out;
    bool last_was_parse_error = false;
    for (std::size_t variant = 0; variant <= cfg.policy.reask_budget; ++variant) {
        ++out.asks;
        const std::string raw = client.request_with_retry(prompt.rendered, variant);
        llm::SelectionResult res;
        try {
            res = llm::parse_selection_response(raw, prompt.candidate_count, query_id);
        } catch (const DataError& e) {
            out.reason = e.what();
            last_was_parse_error = true;
            continue;
        }
        out.response_hash = res.raw_response_hash;
        if (auto rej = llm::validate_selection(res, prompt.candidate_count, cfg.bounds,
                                               cfg.max_summary_words)) {
            out.reason = llm::to_string(*rej);
            last_was_parse_error = false;
            continue;
        }
        out.status = "accepted";
        out.indices = res.selected_indices;
        out.summary = res.summary;
        return out;
    }
    out.status = last_was_parse_error ? "skipped" : "rejected";
    return out;
}

// Summarize-only variant used by sum_wo_sel and gtg.
inline SelectionOutcome ask_summary(llm::ChatClient& client,
                                    const std::vector<std::string>& texts,
                                    std::size_t member_count, const config::RunConfig& cfg) {
    const std::string prompt = prompts::render_summarize(texts, cfg.max_summary_words);
    SelectionOutcome out;
    bool last_was_parse_error = false;
    for (std::size_t variant = 0; variant <= cfg.policy.reask_budget; ++variant) {
        ++out.asks;
        const std::string raw = client.request_with_retry(prompt, variant);
        std::string summary;
        try {
            summary = llm::parse_summary_response(raw);
        } catch (const DataError& e) {
            out.reason = e.what();
            last_was_parse_error = true;
            continue;
        }
        out.response_hash = fnv1a64(raw);
        const auto words = corpus::tokenize(summary);
        if (words.empty()) {
            out.reason = llm::to_string(llm::RejectReason::empty_summary);
            last_was_parse_error = false;
            continue;
        }
        if (words.size() > cfg.max_summary_words) {
            out.reason = llm::to_string(llm::RejectReason::summary_too_long);
            last_was_parse_error = false;
            continue;
        }
        out.status = "accepted";
        out.summary = summary;
        for (std::size_t i = 1; i <= member_count; ++i) out.indices.push_back(i);
        return out;
    }
    out.status = last_was_parse_error ? "skipped" : "rejected";
    return out;
}

inline Json outcome_to_json(std::uint64_t query_id, const SelectionOutcome& o) {
    Json rec;
    rec["query_id"] = query_id;
    rec["status"] = o.status;
    rec["indices"] = o.indices;
    rec["summary"] = o.summary;
    rec["reason"] = o.reason;
    rec["asks"] = o.asks;
    rec["response_hash"] = to_hex(o.response_hash);
    return rec;
}

}  // namespace detail

inline std::uint64_t selections_stage_key(const config::RunConfig& cfg, std::uint64_t flow_key) {
    std::uint64_t k = hash_combine(flow_key, fnv1a64(prompts::kSelectSummarizeVersion));
    k = hash_combine(k, fnv1a64(prompts::kSummarizeVersion));
    k = hash_combine(k, fnv1a64(cfg.chat.model));
    k = hash_combine(k, cfg.bounds.min_sel);
    k = hash_combine(k, cfg.bounds.max_sel);
    k = hash_combine(k, cfg.max_summary_words);
    k = hash_combine(k, cfg.policy.reask_budget);
    if (cfg.mode == synth::PipelineMode::sum_wo_sel) k = hash_combine(k, cfg.sum_neighbors);
    return k;
}

// One terminal record per visited group, in visit order.
inline std::vector<Json> selections_stage(const config::RunConfig& cfg,
                                          const corpus::CorpusHandle& c,
                                          const std::vector<group::Group>& groups,
                                          const std::vector<std::size_t>& order,
                                          llm::ChatClient& client, std::uint64_t key) {
    store::StageWriter sw(cfg.output_dir, "selections", key, config::config_hash(cfg));
    if (sw.skip()) return store::read_stage(cfg.output_dir, "selections");

    std::vector<Json> records;
    records.reserve(order.size());
    for (std::size_t gi : order) {
        const group::Group& g = groups[gi];
        detail::SelectionOutcome outcome;
        if (cfg.mode == synth::PipelineMode::icsd ||
            cfg.mode == synth::PipelineMode::sel_wo_sum) {
            std::vector<std::string> texts;
            texts.reserve(g.member_ids.size());
            for (auto id : g.member_ids) texts.push_back(c.at(id).text);
            outcome = detail::ask_selection(client, texts, g.query_id, cfg);
        } else {  // sum_wo_sel and gtg summarize without selecting
            std::size_t take = g.member_ids.size();
            if (cfg.mode == synth::PipelineMode::sum_wo_sel)
                take = std::min<std::size_t>(cfg.sum_neighbors + 1, take);
            std::vector<std::string> texts;
            for (std::size_t i = 0; i < take; ++i) texts.push_back(c.at(g.member_ids[i]).text);
            outcome = detail::ask_summary(client, texts, take, cfg);
        }
        Json rec = detail::outcome_to_json(g.query_id, outcome);
        sw.append(rec);
        records.push_back(std::move(rec));
    }
    sw.commit();
    return records;
}

// Condense stage for the generative/retrieval baselines: one record per
// caption, in corpus order.
inline std::vector<Json> condense_stage(const config::RunConfig& cfg,
                                        const corpus::CorpusHandle& c, llm::ChatClient& client,
                                        std::uint64_t key) {
    store::StageWriter sw(cfg.output_dir, "condense", key, config::config_hash(cfg));
    if (sw.skip()) return store::read_stage(cfg.output_dir, "condense");

    std::vector<Json> records;
    records.reserve(c.size());
    for (const auto& cap : c.captions) {
        const std::string prompt = llm::build_condense_prompt(cap.text);
        const std::string raw = client.request_with_retry(prompt);
        const std::string condensed = llm::parse_condense_response(raw);
        Json rec;
        rec["caption_id"] = cap.id;
        rec["condensed"] = condensed;
        rec["status"] = condensed.empty() ? "skipped" : "accepted";
        sw.append(rec);
        records.push_back(std::move(rec));
    }
    sw.commit();
    return records;
}

// ---------------------------------------------------------------------------
// Pair construction, manifest, images, report
// ---------------------------------------------------------------------------

struct RunCounts {
    std::size_t groups_in = 0, accepted = 0, rejected = 0, skipped = 0;
    std::map<std::string, std::size_t> rejection_hist;
};

inline std::vector<synth::MultiContextPair> pairs_from_selections(
    const config::RunConfig& cfg, const corpus::CorpusHandle& c,
    const std::vector<group::Group>& groups, const std::vector<Json>& records,
    RunCounts& counts) {
    std::unordered_map<std::uint64_t, const group::Group*> by_query;
    for (const auto& g : groups) by_query[g.query_id] = &g;

    std::vector<synth::MultiContextPair> pairs;
    for (const auto& rec : records) {
        ++counts.groups_in;
        const std::string status = rec.at("status").get<std::string>();
        if (status == "rejected") {
            ++counts.rejected;
            ++counts.rejection_hist[rec.value("reason", "unknown")];
            continue;
        }
        if (status != "accepted") {
            ++counts.skipped;
            continue;
        }
        ++counts.accepted;
        const group::Group& g = *by_query.at(rec.at("query_id").get<std::uint64_t>());
        synth::MultiContextPair p;
        p.mode = cfg.mode;
        for (const auto& v : rec.at("indices")) {
            const auto ix = v.get<std::size_t>();
            if (ix < 1 || ix > g.member_ids.size())
                throw DataError("selection index out of group bounds in stage file");
            p.caption_ids.push_back(g.member_ids[ix - 1]);
        }
        const std::string summary = rec.at("summary").get<std::string>();
        // job prompt: the uni-context query caption for sel_wo_sum, the
        // summary sentence everywhere else; pair summary mirrors it
        const std::string job_prompt =
            cfg.mode == synth::PipelineMode::sel_wo_sum ? c.at(g.query_id).text : summary;
        p.summary = job_prompt;
        p.job =
            synth::make_generation_job(job_prompt, cfg.gen, synth::pair_seed(cfg.seed, pairs.size()));
        p.pair_id = synth::pair_hash(p);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

inline std::vector<synth::MultiContextPair> pairs_uni_context(const config::RunConfig& cfg,
                                                              const corpus::CorpusHandle& c) {
    std::vector<synth::MultiContextPair> pairs;
    pairs.reserve(c.size());
    for (const auto& cap : c.captions) {
        synth::MultiContextPair p;
        p.mode = cfg.mode;
        p.summary = cap.text;
        p.caption_ids = {cap.id};
        p.job =
            synth::make_generation_job(cap.text, cfg.gen, synth::pair_seed(cfg.seed, pairs.size()));
        p.pair_id = synth::pair_hash(p);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

inline std::vector<synth::MultiContextPair> pairs_from_condense(
    const config::RunConfig& cfg, const std::vector<Json>& records,
    const std::optional<synth::ImageIndex>& index,
    std::optional<embed::TextEmbedder>& cond_embedder, RunCounts& counts) {
    std::vector<synth::MultiContextPair> pairs;
    for (const auto& rec : records) {
        if (rec.at("status").get<std::string>() != "accepted") {
            ++counts.skipped;
            continue;
        }
        const auto id = rec.at("caption_id").get<corpus::CaptionId>();
        const std::string condensed = rec.at("condensed").get<std::string>();
        synth::MultiContextPair p;
        p.mode = cfg.mode;
        p.summary = condensed;
        p.caption_ids = {id};
        if (cfg.mode == synth::PipelineMode::generative_baseline) {
            p.job = synth::make_generation_job(condensed, cfg.gen,
                                               synth::pair_seed(cfg.seed, pairs.size()));
        } else {
            const auto vec = cond_embedder->embed(corpus::tokenize(condensed));
            const std::size_t row = synth::retrieve_image(vec, *index);
            p.image_path = index->ids[row];
        }
        p.pair_id = synth::pair_hash(p);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

inline std::uint64_t manifest_stage_key(const config::RunConfig& cfg, std::uint64_t pairs_key) {
    std::uint64_t k = hash_combine(pairs_key, fnv1a64(synth::to_string(cfg.mode)));
    k = hash_combine(k, cfg.seed);
    k = hash_combine(k, cfg.gen.width);
    k = hash_combine(k, cfg.gen.height);
    k = hash_combine(k, cfg.gen.steps);
    k = hash_combine(k, fnv1a64(cfg.gen.sampler));
    return k;
}

inline std::filesystem::path manifest_stage(const config::RunConfig& cfg,
                                            const std::vector<synth::MultiContextPair>& pairs,
                                            std::uint64_t man_key) {
    store::StageWriter sw(cfg.output_dir, "manifest", man_key, config::config_hash(cfg));
    if (!sw.skip()) {
        for (const auto& p : pairs) sw.append(synth::pair_to_json(p));
        sw.commit();
    }
    return sw.path();
}

inline std::size_t images_stage(const config::RunConfig& cfg,
                                const std::vector<synth::MultiContextPair>& pairs,
                                std::uint64_t man_key) {
    if (cfg.image_backend == "none") return 0;
    std::unique_ptr<synth::ImageBackend> backend;
    if (cfg.image_backend == "http")
        backend = std::make_unique<synth::HttpImageBackend>(cfg.image_endpoint,
                                                            cfg.output_dir / "images");
    else
        backend = std::make_unique<synth::StubImageBackend>(cfg.output_dir / "images");

    store::StageWriter sw(cfg.output_dir, "images", man_key, config::config_hash(cfg));
    if (sw.skip()) return sw.count();
    std::size_t submitted = 0;
    for (const auto& p : pairs) {
        if (!p.job) continue;
        const auto path = backend->submit(*p.job);
        ++submitted;
        Json rec;
        rec["job_id"] = to_hex(p.job->job_id);
        rec["path"] = path.string();
        sw.append(rec);
    }
    sw.commit();
    return submitted;
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

inline PipelineResult run_pipeline(const config::RunConfig& cfg,
                                   llm::ChatProvider* provider_override = nullptr) {
    namespace fs = std::filesystem;
    config::validate_for_run(cfg);
    fs::create_directories(cfg.output_dir);
    const std::uint64_t cfg_hash = config::config_hash(cfg);

    detail::StageClock clock;
    PipelineResult result;

    clock.start("corpus");
    corpus::CorpusHandle c = ingest_stage(cfg);
    clock.stop();
    const std::uint64_t corpus_hash = corpus::content_hash(c);

    LlmContext llm_ctx;
    if (config::needs_llm(cfg.mode)) llm_ctx = make_llm_context(cfg, provider_override);

    RunCounts counts;
    std::vector<synth::MultiContextPair> pairs;
    std::uint64_t pairs_key = 0;

    const bool grouping = config::needs_grouping(cfg.mode);
    if (grouping || cfg.mode == synth::PipelineMode::gtg) {
        std::vector<group::Group> groups;
        std::vector<std::size_t> order;
        std::uint64_t flow_key = 0;
        if (grouping) {
            clock.start("embed");
            embed::TextEmbedder key_embedder(detail::embedder_config(cfg));
            key_embedder.fit_idf(c);
            const std::uint64_t fingerprint = key_embedder.fingerprint();
            embed::EmbeddingMatrix m = embed_stage(cfg, c);
            clock.stop();

            clock.start("groups");
            const std::uint64_t gk = groups_stage_key(cfg, c, fingerprint);
            groups = groups_stage(cfg, c, m, gk);
            clock.stop();

            clock.start("cover");
            order = cover_stage(cfg, c, groups, gk);
            clock.stop();
            flow_key = hash_combine(gk, fnv1a64("cover"));
        } else {
            clock.start("groups");
            const std::uint64_t gk = hash_combine(corpus_hash, fnv1a64("gtg-groups"));
            groups = gtg_groups_stage(cfg, c, gk);
            order.resize(groups.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            clock.stop();
            flow_key = gk;
        }

        clock.start("select");
        const std::uint64_t sel_key = selections_stage_key(cfg, flow_key);
        const auto records = selections_stage(cfg, c, groups, order, *llm_ctx.client, sel_key);
        clock.stop();

        clock.start("pairs");
        pairs = pairs_from_selections(cfg, c, groups, records, counts);
        clock.stop();
        pairs_key = sel_key;
    } else if (cfg.mode == synth::PipelineMode::uni_context) {
        clock.start("pairs");
        pairs = pairs_uni_context(cfg, c);
        clock.stop();
        pairs_key = hash_combine(corpus_hash, fnv1a64("uni"));
    } else {
        clock.start("condense");
        std::uint64_t cd_key = hash_combine(corpus_hash, fnv1a64(prompts::kCondenseVersion));
        cd_key = hash_combine(cd_key, fnv1a64(cfg.chat.model));
        std::optional<synth::ImageIndex> index;
        std::optional<embed::TextEmbedder> cond_embedder;
        if (cfg.mode == synth::PipelineMode::retrieval_baseline) {
            index = synth::load_image_index(cfg.image_index);
            cond_embedder.emplace(detail::embedder_config(cfg));
            cond_embedder->fit_idf(c);
            if (cond_embedder->dim() != index->features.dim)
                throw DataError("image index dim " + std::to_string(index->features.dim) +
                                " does not match embedder dim " +
                                std::to_string(cond_embedder->dim()));
            cd_key = hash_combine(cd_key, cond_embedder->fingerprint());
            cd_key = hash_combine(cd_key, hash_file(cfg.image_index));
        }
        const auto records = condense_stage(cfg, c, *llm_ctx.client, cd_key);
        pairs = pairs_from_condense(cfg, records, index, cond_embedder, counts);
        clock.stop();
        pairs_key = cd_key;
    }

    clock.start("manifest");
    const std::uint64_t man_key = manifest_stage_key(cfg, pairs_key);
    result.manifest_path = manifest_stage(cfg, pairs, man_key);
    clock.stop();

    clock.start("images");
    const std::size_t jobs_submitted = images_stage(cfg, pairs, man_key);
    clock.stop();

    Json report;
    report["tool"] = kToolName;
    report["version"] = kToolVersion;
    report["mode"] = synth::to_string(cfg.mode);
    report["config_hash"] = to_hex(cfg_hash);
    Json ingest_meta = Json::object();
    {
        std::ifstream mi(cfg.output_dir / "corpus.meta.json");
        if (mi) {
            Json j = Json::parse(mi, nullptr, false);
            if (!j.is_discarded()) ingest_meta = j;
        }
    }
    report["counts"]["corpus_records_read"] = ingest_meta.value("records_read", c.size());
    report["counts"]["corpus_kept"] = c.size();
    report["counts"]["corpus_blanks_skipped"] = ingest_meta.value("blanks_skipped", std::size_t{0});
    report["counts"]["corpus_length_filtered"] =
        ingest_meta.value("length_filtered", std::size_t{0});
    report["counts"]["corpus_duplicates_dropped"] =
        ingest_meta.value("duplicates_dropped", std::size_t{0});
    report["counts"]["groups_in"] = counts.groups_in;
    report["counts"]["selections_accepted"] = counts.accepted;
    report["counts"]["selections_rejected"] = counts.rejected;
    report["counts"]["selections_skipped"] = counts.skipped;
    report["counts"]["pairs"] = pairs.size();
    report["counts"]["jobs_submitted"] = jobs_submitted;
    Json hist = Json::object();
    for (const auto& [reason, n] : counts.rejection_hist) hist[reason] = n;
    report["rejections"] = hist;
    report["durations_ms"] = clock.to_json();

    result.report_path = cfg.output_dir / "report.json";
    {
        std::ofstream out(result.report_path, std::ios::trunc);
        out << report.dump(2) << "\n";
    }
    result.report = std::move(report);
    result.pairs = std::move(pairs);
    return result;
}

}  // namespace icsd::pipeline
