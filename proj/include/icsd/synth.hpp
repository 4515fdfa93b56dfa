#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "icsd/corpus.hpp"
#include "icsd/embed.hpp"
#include "icsd/errors.hpp"
#include "icsd/group.hpp"
#include "icsd/hash.hpp"
#include "icsd/http.hpp"
#include "icsd/jsonl.hpp"
#include "icsd/llm.hpp"

namespace icsd::synth {

enum class PipelineMode {
    uni_context,
    sel_wo_sum,
    sum_wo_sel,
    icsd,
    gtg,
    retrieval_baseline,
    generative_baseline,
};

inline const char* to_string(PipelineMode m) {
    switch (m) {
        case PipelineMode::uni_context: return "uni_context";
        case PipelineMode::sel_wo_sum: return "sel_wo_sum";
        case PipelineMode::sum_wo_sel: return "sum_wo_sel";
        case PipelineMode::icsd: return "icsd";
        case PipelineMode::gtg: return "gtg";
        case PipelineMode::retrieval_baseline: return "retrieval_baseline";
        case PipelineMode::generative_baseline: return "generative_baseline";
    }
    return "unknown";
}

inline PipelineMode mode_from_string(const std::string& s) {
    if (s == "uni_context") return PipelineMode::uni_context;
    if (s == "sel_wo_sum") return PipelineMode::sel_wo_sum;
    if (s == "sum_wo_sel") return PipelineMode::sum_wo_sel;
    if (s == "icsd") return PipelineMode::icsd;
    if (s == "gtg") return PipelineMode::gtg;
    if (s == "retrieval_baseline") return PipelineMode::retrieval_baseline;
    if (s == "generative_baseline") return PipelineMode::generative_baseline;
    throw ConfigError("unknown pipeline mode: " + s);
}

struct GenParams {
    std::uint32_t width = 512;
    std::uint32_t height = 512;
    std::uint32_t steps = 20;
    std::string sampler = "dpm-solver";
};

struct GenerationJob {
    std::uint64_t job_id = 0;
    std::string prompt_text;  // the summary verbatim; no prompt engineering
    std::uint32_t width = 512;
    std::uint32_t height = 512;
    std::uint32_t steps = 20;
    std::string sampler = "dpm-solver";
    std::uint64_t seed = 0;
};

inline std::uint64_t job_hash(const std::string& prompt, const GenParams& p,
                              std::uint64_t seed) {
    std::uint64_t h = fnv1a64(prompt);
    h = hash_combine(h, p.width);
    h = hash_combine(h, p.height);
    h = hash_combine(h, p.steps);
    h = hash_combine(h, fnv1a64(p.sampler));
    h = hash_combine(h, seed);
    return h;
}

// One image seed per pair, derived from the run seed so a run is replayable
// but pairs stay decorrelated.
inline std::uint64_t pair_seed(std::uint64_t run_seed, std::uint64_t pair_index) {
    return hash_combine(hash_mix(run_seed), pair_index);
}

inline GenerationJob make_generation_job(const std::string& summary, const GenParams& params,
                                         std::uint64_t seed) {
    if (summary.empty()) throw DataError("make_generation_job: empty summary");
    GenerationJob job;
    job.prompt_text = summary;
    job.width = params.width;
    job.height = params.height;
    job.steps = params.steps;
    job.sampler = params.sampler;
    job.seed = seed;
    job.job_id = job_hash(summary, params, seed);
    return job;
}

struct MultiContextPair {
    std::uint64_t pair_id = 0;
    std::optional<GenerationJob> job;  // absent for retrieval_baseline
    std::vector<corpus::CaptionId> caption_ids;
    std::string summary;
    PipelineMode mode = PipelineMode::icsd;
    std::optional<std::string> image_path;  // retrieval_baseline only
};

inline std::uint64_t pair_hash(const MultiContextPair& p) {
    std::uint64_t h = fnv1a64(to_string(p.mode));
    h = hash_combine(h, p.job ? p.job->job_id : fnv1a64(p.image_path.value_or("")));
    for (auto id : p.caption_ids) h = hash_combine(h, id);
    h = hash_combine(h, fnv1a64(p.summary));
    return h;
}

// Maps each accepted selection's 1-based indices back to global caption ids
// through its group's member order. selections[i] pairs with jobs[i].
inline std::vector<MultiContextPair> assemble_pairs(
    const std::vector<llm::SelectionResult>& selections,
    const std::vector<group::Group>& groups, const std::vector<GenerationJob>& jobs,
    PipelineMode mode = PipelineMode::icsd) {
    if (selections.size() != jobs.size())
        throw DataError("assemble_pairs: selections/jobs length mismatch");
    std::unordered_map<std::uint64_t, const group::Group*> by_query;
    for (const auto& g : groups) by_query[g.query_id] = &g;

    std::vector<MultiContextPair> pairs;
    pairs.reserve(selections.size());
    for (std::size_t i = 0; i < selections.size(); ++i) {
        const auto& sel = selections[i];
        auto it = by_query.find(sel.group_ref);
        if (it == by_query.end())
            throw DataError("assemble_pairs: selection references unknown group query " +
                            std::to_string(sel.group_ref));
        const group::Group& g = *it->second;
        MultiContextPair p;
        p.mode = mode;
        p.summary = sel.summary;
        p.job = jobs[i];
        for (std::size_t ix : sel.selected_indices) {
            if (ix < 1 || ix > g.member_ids.size())
                throw DataError("assemble_pairs: index " + std::to_string(ix) +
                                " outside group of size " + std::to_string(g.member_ids.size()));
            p.caption_ids.push_back(g.member_ids[ix - 1]);
        }
        p.pair_id = pair_hash(p);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

// ---------------------------------------------------------------------------
// Manifest records
// ---------------------------------------------------------------------------

inline Json job_to_json(const GenerationJob& j) {
    Json out;
    out["job_id"] = to_hex(j.job_id);
    out["prompt"] = j.prompt_text;
    out["width"] = j.width;
    out["height"] = j.height;
    out["steps"] = j.steps;
    out["sampler"] = j.sampler;
    out["seed"] = j.seed;
    return out;
}

inline Json pair_to_json(const MultiContextPair& p) {
    Json out;
    out["pair_id"] = to_hex(p.pair_id);
    out["mode"] = to_string(p.mode);
    out["summary"] = p.summary;
    out["caption_ids"] = p.caption_ids;
    if (p.job)
        out["job"] = job_to_json(*p.job);
    else
        out["job"] = nullptr;
    if (p.image_path) out["image_path"] = *p.image_path;
    return out;
}

inline MultiContextPair pair_from_json(const Json& rec) {
    MultiContextPair p;
    p.pair_id = std::stoull(rec.at("pair_id").get<std::string>(), nullptr, 16);
    p.mode = mode_from_string(rec.at("mode").get<std::string>());
    p.summary = rec.at("summary").get<std::string>();
    for (const auto& v : rec.at("caption_ids")) p.caption_ids.push_back(v.get<std::uint64_t>());
    if (rec.contains("job") && !rec["job"].is_null()) {
        const auto& j = rec["job"];
        GenerationJob job;
        job.job_id = std::stoull(j.at("job_id").get<std::string>(), nullptr, 16);
        job.prompt_text = j.at("prompt").get<std::string>();
        job.width = j.at("width").get<std::uint32_t>();
        job.height = j.at("height").get<std::uint32_t>();
        job.steps = j.at("steps").get<std::uint32_t>();
        job.sampler = j.at("sampler").get<std::string>();
        job.seed = j.at("seed").get<std::uint64_t>();
        p.job = std::move(job);
    }
    if (rec.contains("image_path")) p.image_path = rec["image_path"].get<std::string>();
    return p;
}

// ---------------------------------------------------------------------------
// Image retrieval (nearest stored image feature for a summary vector)
// ---------------------------------------------------------------------------

struct ImageIndex {
    embed::EmbeddingMatrix features;  // unit-norm rows
    std::vector<std::string> ids;     // parallel to rows
};

inline ImageIndex load_image_index(const std::filesystem::path& path) {
    auto loaded = embed::read_matrix_file(path);
    ImageIndex index;
    index.features = std::move(loaded.matrix);
    index.ids = std::move(loaded.row_ids);
    if (index.features.rows() == 0) throw DataError("image index is empty: " + path.string());
    if (index.ids.size() != index.features.rows())
        throw DataError("image index id table does not match row count: " + path.string());
    for (std::size_t r = 0; r < index.features.rows(); ++r)
        embed::detail::check_finite_unit(index.features.row(r));
    return index;
}

// Argmax cosine over the index; ties break toward the lexicographically
// smallest id. Rows are unit-norm so the dot product is the cosine.
inline std::size_t retrieve_image(std::span<const float> summary_vec, const ImageIndex& index) {
    if (index.features.rows() == 0) throw DataError("retrieve_image: empty index");
    if (summary_vec.size() != index.features.dim)
        throw DataError("retrieve_image: dimension mismatch");
    std::size_t best = 0;
    float best_score = group::detail::dot(summary_vec.data(), index.features.row(0).data(),
                                          index.features.dim);
    for (std::size_t r = 1; r < index.features.rows(); ++r) {
        const float s = group::detail::dot(summary_vec.data(), index.features.row(r).data(),
                                           index.features.dim);
        if (s > best_score || (s == best_score && index.ids[r] < index.ids[best])) {
            best = r;
            best_score = s;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Image generation backends
// ---------------------------------------------------------------------------

class ImageBackend {
  public:
    virtual ~ImageBackend() = default;
    // Returns the path recorded for the job's output.
    virtual std::filesystem::path submit(const GenerationJob& job) = 0;
};

// Desk-scale stand-in: writes one placeholder record per job so the pipeline
// and its manifests are exercisable without a diffusion service.
class StubImageBackend : public ImageBackend {
  public:
    explicit StubImageBackend(std::filesystem::path out_dir) : dir_(std::move(out_dir)) {
        std::filesystem::create_directories(dir_);
    }

    std::filesystem::path submit(const GenerationJob& job) override {
        const auto path = dir_ / (to_hex(job.job_id) + ".json");
        Json rec = job_to_json(job);
        rec["status"] = "stubbed";
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + path.string());
        out << rec.dump() << "\n";
        return path;
    }

  private:
    std::filesystem::path dir_;
};

// Posts {"prompt","width","height","steps","seed"} and stores the returned
// image bytes under <job_id>.png.
class HttpImageBackend : public ImageBackend {
  public:
    HttpImageBackend(std::string endpoint, std::filesystem::path out_dir,
                     std::uint32_t timeout_ms = 120000)
        : url_(parse_url(endpoint)), dir_(std::move(out_dir)), timeout_ms_(timeout_ms) {
        std::filesystem::create_directories(dir_);
    }

    std::filesystem::path submit(const GenerationJob& job) override {
        Json body;
        body["prompt"] = job.prompt_text;
        body["width"] = job.width;
        body["height"] = job.height;
        body["steps"] = job.steps;
        body["seed"] = job.seed;
        auto client = make_http_client(url_, timeout_ms_);
        auto res = client->Post(url_.path, body.dump(), "application/json");
        if (!res)
            throw ProviderError("image backend transport: " + httplib::to_string(res.error()));
        if (res->status < 200 || res->status >= 300)
            throw ProviderError("image backend status " + std::to_string(res->status), 1,
                                res->status);
        const auto path = dir_ / (to_hex(job.job_id) + ".png");
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + path.string());
        out.write(res->body.data(), static_cast<std::streamsize>(res->body.size()));
        return path;
    }

  private:
    ParsedUrl url_;
    std::filesystem::path dir_;
    std::uint32_t timeout_ms_;
};

}  // namespace icsd::synth
