#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "icsd/corpus.hpp"
#include "icsd/errors.hpp"
#include "icsd/hash.hpp"
#include "icsd/http.hpp"
#include "icsd/util.hpp"

namespace icsd::embed {

enum class EmbedderMode { exact_vocab, hashed_ngram, remote };

inline std::string_view to_string(EmbedderMode m) {
    switch (m) {
        case EmbedderMode::exact_vocab: return "exact-vocab";
        case EmbedderMode::hashed_ngram: return "hashed-ngram";
        case EmbedderMode::remote: return "remote";
    }
    return "hashed-ngram";
}

inline EmbedderMode embedder_mode_from(std::string_view s) {
    if (s == "exact-vocab") return EmbedderMode::exact_vocab;
    if (s == "hashed-ngram") return EmbedderMode::hashed_ngram;
    if (s == "remote") return EmbedderMode::remote;
    throw ConfigError("unknown embedder mode: " + std::string(s));
}

inline constexpr std::uint64_t kDefaultHashSeed = 0x6d5f4a1c9b3e82d7ull;

struct RemoteEmbedConfig {
    std::string endpoint;
    std::string model;
    std::string api_key_env = "ICSD_API_KEY";
    int batch_size = 64;
    int max_retries = 3;
    int backoff_base_ms = 250;
    int backoff_cap_ms = 10000;
    int timeout_ms = 30000;
};

struct EmbedderConfig {
    EmbedderMode mode = EmbedderMode::hashed_ngram;
    std::uint32_t dim = 256;                // hashed-ngram bucket count
    std::uint64_t hash_seed = kDefaultHashSeed;
    std::vector<std::string> vocab;         // exact-vocab: frozen vocabulary
    RemoteEmbedConfig remote;
};

struct EmbeddingMatrix {
    std::uint32_t dim = 0;
    std::uint64_t fingerprint = 0;
    std::vector<float> data;  // row-major, row i aligned with caption id i

    std::size_t rows() const { return dim == 0 ? 0 : data.size() / dim; }
    std::span<const float> row(std::size_t i) const {
        return std::span<const float>(data.data() + i * dim, dim);
    }
};

namespace detail {

inline void l2_normalize(std::span<float> v) {
    double ss = 0.0;
    for (float x : v) ss += static_cast<double>(x) * x;
    if (ss <= 0.0) throw DataError("cannot normalize zero-norm embedding");
    const float inv = static_cast<float>(1.0 / std::sqrt(ss));
    for (float& x : v) x *= inv;
}

inline void check_finite_unit(std::span<const float> v) {
    double ss = 0.0;
    for (float x : v) {
        if (!std::isfinite(x)) throw DataError("embedding contains NaN/Inf");
        ss += static_cast<double>(x) * x;
    }
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-5)
        throw DataError("embedding is not unit-norm");
}

}  // namespace detail

// Deterministic local embedders plus the idf state for hashed-ngram mode.
//
// exact-vocab:  binary bag-of-words over a frozen vocabulary, L2-normalized.
// hashed-ngram: word unigrams+bigrams hashed into dim buckets with a fixed
//               64-bit seed, tf*idf weighted, L2-normalized. idf = ln(n/df)
//               over the corpus passed to fit_idf; without a fit all weights
//               are 1. Terms unseen at fit time weigh ln(n).
class TextEmbedder {
  public:
    explicit TextEmbedder(EmbedderConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.mode == EmbedderMode::exact_vocab) {
            if (cfg_.vocab.empty())
                throw ConfigError("exact-vocab embedder requires a vocabulary");
            for (const auto& w : cfg_.vocab)
                vocab_index_.emplace(w, static_cast<std::uint32_t>(vocab_index_.size()));
        }
        if (cfg_.mode == EmbedderMode::hashed_ngram && cfg_.dim == 0)
            throw ConfigError("hashed-ngram embedder requires dim > 0");
    }

    std::uint32_t dim() const {
        return cfg_.mode == EmbedderMode::exact_vocab
                   ? static_cast<std::uint32_t>(cfg_.vocab.size())
                   : cfg_.dim;
    }

    const EmbedderConfig& config() const { return cfg_; }

    void fit_idf(const corpus::CorpusHandle& c) {
        if (cfg_.mode != EmbedderMode::hashed_ngram) return;
        std::unordered_map<std::uint64_t, std::uint64_t> df;
        for (const auto& cap : c.captions) {
            std::unordered_set<std::uint64_t> doc_terms;
            for_each_term(cap.tokens, [&](std::uint64_t key) { doc_terms.insert(key); });
            for (std::uint64_t key : doc_terms) ++df[key];
        }
        idf_.clear();
        idf_docs_ = c.size();
        const double n = static_cast<double>(idf_docs_);
        for (const auto& [key, d] : df)
            idf_[key] = static_cast<float>(std::log(n / static_cast<double>(d)));
        idf_source_hash_ = corpus::content_hash(c);
    }

    std::vector<float> embed(const std::vector<std::string>& tokens) const {
        std::vector<float> v(dim(), 0.0f);
        if (cfg_.mode == EmbedderMode::exact_vocab) {
            for (const auto& tok : tokens) {
                auto it = vocab_index_.find(tok);
                if (it == vocab_index_.end())
                    throw DataError("token out of frozen vocabulary: " + tok);
                v[it->second] = 1.0f;
            }
        } else {
            accumulate_hashed(tokens, v, /*use_idf=*/true);
            bool all_zero = std::all_of(v.begin(), v.end(), [](float x) { return x == 0.0f; });
            if (all_zero && !tokens.empty()) {
                // every term had idf 0 (present in all documents); fall back to tf
                accumulate_hashed(tokens, v, /*use_idf=*/false);
            }
        }
        if (std::all_of(v.begin(), v.end(), [](float x) { return x == 0.0f; }))
            throw DataError("text has no tokens to embed");
        detail::l2_normalize(v);
        return v;
    }

    std::vector<float> embed(std::string_view text) const {
        return embed(corpus::tokenize(text));
    }

    // Identifies the embedder config plus any fitted idf state; keys caches.
    std::uint64_t fingerprint() const {
        std::uint64_t h = fnv1a64(to_string(cfg_.mode));
        h = hash_combine(h, cfg_.dim);
        h = hash_combine(h, cfg_.hash_seed);
        for (const auto& w : cfg_.vocab) h = fnv1a64(w, fnv1a64("\x1f", h));
        if (cfg_.mode == EmbedderMode::remote) {
            h = fnv1a64(cfg_.remote.endpoint, h);
            h = fnv1a64(cfg_.remote.model, h);
        }
        h = hash_combine(h, idf_source_hash_);
        return h;
    }

  private:
    template <typename Fn>
    void for_each_term(const std::vector<std::string>& tokens, Fn&& fn) const {
        const std::uint64_t basis = kFnvOffsetBasis ^ cfg_.hash_seed;
        for (const auto& tok : tokens) fn(fnv1a64(tok, basis));
        for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
            std::uint64_t h = fnv1a64(tokens[i], basis);
            h = fnv1a64(" ", h);
            fn(fnv1a64(tokens[i + 1], h));
        }
    }

    void accumulate_hashed(const std::vector<std::string>& tokens, std::vector<float>& v,
                           bool use_idf) const {
        std::map<std::uint64_t, std::uint32_t> tf;  // ordered: deterministic accumulation
        for_each_term(tokens, [&](std::uint64_t key) { ++tf[key]; });
        for (const auto& [key, count] : tf) {
            float w = static_cast<float>(count);
            if (use_idf && !idf_.empty()) {
                auto it = idf_.find(key);
                const double n = static_cast<double>(idf_docs_);
                w *= (it != idf_.end()) ? it->second : static_cast<float>(std::log(n));
            }
            v[static_cast<std::size_t>(hash_mix(key) % cfg_.dim)] += w;
        }
    }

    EmbedderConfig cfg_;
    std::unordered_map<std::string, std::uint32_t> vocab_index_;
    std::unordered_map<std::uint64_t, float> idf_;
    std::uint64_t idf_source_hash_ = 0;
    std::size_t idf_docs_ = 0;
};

inline std::vector<float> embed_text(std::string_view text, const EmbedderConfig& cfg) {
    if (cfg.mode == EmbedderMode::remote)
        throw ConfigError("embed_text: remote mode requires embed_corpus or a client");
    return TextEmbedder(cfg).embed(text);
}

// ---------------------------------------------------------------------------
// Binary matrix files. One layout serves the embedding cache and the image
// feature index (the index appends an id table). Little-endian only.
//
//   magic[8] version:u32 dim:u32 rows:u64 fingerprint:u64 payload_hash:u64
//   idtable_bytes:u64 payload(rows*dim f32) idtable(len:u32 bytes)*
// ---------------------------------------------------------------------------

inline constexpr char kMatrixMagic[8] = {'I', 'C', 'S', 'D', 'M', 'A', 'T', '1'};
inline constexpr std::uint32_t kMatrixVersion = 1;

struct MatrixFileHeader {
    char magic[8];
    std::uint32_t version;
    std::uint32_t dim;
    std::uint64_t rows;
    std::uint64_t fingerprint;
    std::uint64_t payload_hash;
    std::uint64_t idtable_bytes;
};
static_assert(sizeof(MatrixFileHeader) == 48);

namespace detail {

inline std::string encode_id_table(const std::vector<std::string>& ids) {
    std::string out;
    for (const auto& id : ids) {
        std::uint32_t len = static_cast<std::uint32_t>(id.size());
        out.append(reinterpret_cast<const char*>(&len), sizeof(len));
        out.append(id);
    }
    return out;
}

inline std::vector<std::string> decode_id_table(const std::string& buf, std::uint64_t rows) {
    std::vector<std::string> ids;
    ids.reserve(rows);
    std::size_t off = 0;
    for (std::uint64_t i = 0; i < rows; ++i) {
        if (off + sizeof(std::uint32_t) > buf.size()) throw DataError("truncated id table");
        std::uint32_t len;
        std::memcpy(&len, buf.data() + off, sizeof(len));
        off += sizeof(len);
        if (off + len > buf.size()) throw DataError("truncated id table");
        ids.emplace_back(buf.data() + off, len);
        off += len;
    }
    return ids;
}

}  // namespace detail

inline void write_matrix_file(const std::filesystem::path& path, const EmbeddingMatrix& m,
                              const std::vector<std::string>* row_ids = nullptr) {
    std::string idtable;
    if (row_ids) {
        if (row_ids->size() != m.rows())
            throw DataError("id table size does not match matrix rows");
        idtable = detail::encode_id_table(*row_ids);
    }
    MatrixFileHeader h{};
    std::memcpy(h.magic, kMatrixMagic, 8);
    h.version = kMatrixVersion;
    h.dim = m.dim;
    h.rows = m.rows();
    h.fingerprint = m.fingerprint;
    h.payload_hash = fnv1a64(m.data.data(), m.data.size() * sizeof(float));
    if (!idtable.empty()) h.payload_hash = fnv1a64(idtable.data(), idtable.size(), h.payload_hash);
    h.idtable_bytes = idtable.size();

    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + tmp);
        out.write(reinterpret_cast<const char*>(&h), sizeof(h));
        out.write(reinterpret_cast<const char*>(m.data.data()),
                  static_cast<std::streamsize>(m.data.size() * sizeof(float)));
        out.write(idtable.data(), static_cast<std::streamsize>(idtable.size()));
        if (!out) throw DataError("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

struct LoadedMatrix {
    EmbeddingMatrix matrix;
    std::vector<std::string> row_ids;  // empty when the file has no id table
};

// Returns nullopt on any validation failure (caller recomputes).
inline std::optional<LoadedMatrix> try_read_matrix_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    MatrixFileHeader h{};
    if (!in.read(reinterpret_cast<char*>(&h), sizeof(h))) return std::nullopt;
    if (std::memcmp(h.magic, kMatrixMagic, 8) != 0 || h.version != kMatrixVersion)
        return std::nullopt;
    LoadedMatrix out;
    out.matrix.dim = h.dim;
    out.matrix.fingerprint = h.fingerprint;
    out.matrix.data.resize(static_cast<std::size_t>(h.rows) * h.dim);
    if (!in.read(reinterpret_cast<char*>(out.matrix.data.data()),
                 static_cast<std::streamsize>(out.matrix.data.size() * sizeof(float))))
        return std::nullopt;
    std::string idtable(static_cast<std::size_t>(h.idtable_bytes), '\0');
    if (h.idtable_bytes > 0 &&
        !in.read(idtable.data(), static_cast<std::streamsize>(idtable.size())))
        return std::nullopt;
    std::uint64_t check = fnv1a64(out.matrix.data.data(), out.matrix.data.size() * sizeof(float));
    if (!idtable.empty()) check = fnv1a64(idtable.data(), idtable.size(), check);
    if (check != h.payload_hash) return std::nullopt;
    if (h.idtable_bytes > 0) out.row_ids = detail::decode_id_table(idtable, h.rows);
    return out;
}

inline LoadedMatrix read_matrix_file(const std::filesystem::path& path) {
    auto loaded = try_read_matrix_file(path);
    if (!loaded) throw DataError("invalid or corrupt matrix file: " + path.string());
    return std::move(*loaded);
}

// ---------------------------------------------------------------------------
// Remote embedding provider (substitutes for a hosted text encoder).
// Wire format: POST {"input": [str], "model": str}
//           -> {"data": [{"embedding": [float]}, ...]} in input order.
// ---------------------------------------------------------------------------

class RemoteEmbedClient {
  public:
    explicit RemoteEmbedClient(RemoteEmbedConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.endpoint.empty()) throw ConfigError("remote embedder requires an endpoint");
        url_ = parse_url(cfg_.endpoint);
        if (const char* key = std::getenv(cfg_.api_key_env.c_str())) api_key_ = key;
    }

    std::vector<std::vector<float>> embed_batch(const std::vector<std::string>& texts) {
        Json body;
        body["input"] = texts;
        body["model"] = cfg_.model;
        const std::string payload = body.dump();

        int attempts = 0;
        int last_status = 0;
        std::string last_error;
        for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
            ++attempts;
            if (attempt > 0) {
                int delay = cfg_.backoff_base_ms << std::min(attempt - 1, 16);
                std::this_thread::sleep_for(
                    std::chrono::milliseconds(std::min(delay, cfg_.backoff_cap_ms)));
            }
            auto client = make_http_client(url_, cfg_.timeout_ms);
            httplib::Headers headers;
            if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
            auto res = client->Post(url_.path, headers, payload, "application/json");
            if (!res) {
                last_error = httplib::to_string(res.error());
                continue;
            }
            last_status = res->status;
            if (res->status == 200) return parse_response(res->body, texts.size());
            last_error = "HTTP " + std::to_string(res->status);
            if (res->status != 429 && res->status < 500) break;  // not retryable
        }
        throw ProviderError("embedding provider failed after " + std::to_string(attempts) +
                                " attempt(s): " + last_error,
                            attempts, last_status);
    }

  private:
    static std::vector<std::vector<float>> parse_response(const std::string& body,
                                                          std::size_t expected) {
        Json j;
        try {
            j = Json::parse(body);
        } catch (const nlohmann::json::exception& e) {
            throw ProviderError(std::string("malformed embedding response: ") + e.what());
        }
        if (!j.contains("data") || !j["data"].is_array())
            throw ProviderError("embedding response has no \"data\" array");
        std::vector<std::vector<float>> out;
        out.reserve(expected);
        for (const auto& item : j["data"]) {
            if (!item.contains("embedding") || !item["embedding"].is_array())
                throw ProviderError("embedding response item has no \"embedding\"");
            out.push_back(item["embedding"].get<std::vector<float>>());
        }
        return out;
    }

    RemoteEmbedConfig cfg_;
    ParsedUrl url_;
    std::string api_key_;
};

struct EmbedCorpusOptions {
    std::filesystem::path cache_dir;  // empty: no disk cache
    unsigned threads = 0;             // 0: hardware concurrency
};

namespace detail {

inline std::filesystem::path cache_path(const std::filesystem::path& dir,
                                        std::uint64_t corpus_hash, std::uint64_t fingerprint) {
    return dir / ("emb-" + to_hex(corpus_hash) + "-" + to_hex(fingerprint) + ".bin");
}

// Partial remote progress: header rows/payload_hash track completed rows only.
class PartialWriter {
  public:
    PartialWriter(const std::filesystem::path& part, std::uint32_t dim, std::uint64_t fingerprint)
        : path_(part), dim_(dim) {
        header_ = MatrixFileHeader{};
        std::memcpy(header_.magic, kMatrixMagic, 8);
        header_.version = kMatrixVersion;
        header_.dim = dim;
        header_.fingerprint = fingerprint;
        header_.payload_hash = kFnvOffsetBasis;
    }

    // Returns rows recovered from an existing partial file, appending their
    // floats to `data`. Invalid partials are discarded.
    std::size_t open_or_resume(std::vector<float>& data) {
        std::ifstream in(path_, std::ios::binary);
        if (in) {
            MatrixFileHeader h{};
            if (in.read(reinterpret_cast<char*>(&h), sizeof(h)) &&
                std::memcmp(h.magic, kMatrixMagic, 8) == 0 && h.version == kMatrixVersion &&
                h.dim == dim_ && h.fingerprint == header_.fingerprint) {
                std::vector<float> rows(static_cast<std::size_t>(h.rows) * dim_);
                if (in.read(reinterpret_cast<char*>(rows.data()),
                            static_cast<std::streamsize>(rows.size() * sizeof(float))) &&
                    fnv1a64(rows.data(), rows.size() * sizeof(float)) == h.payload_hash) {
                    in.close();
                    header_.rows = h.rows;
                    header_.payload_hash = fnv1a64(rows.data(), rows.size() * sizeof(float));
                    data.insert(data.end(), rows.begin(), rows.end());
                    out_.open(path_, std::ios::binary | std::ios::in | std::ios::out);
                    out_.seekp(static_cast<std::streamoff>(sizeof(MatrixFileHeader) +
                                                           rows.size() * sizeof(float)));
                    return static_cast<std::size_t>(h.rows);
                }
            }
        }
        in.close();
        out_.open(path_, std::ios::binary | std::ios::trunc | std::ios::out);
        out_.write(reinterpret_cast<const char*>(&header_), sizeof(header_));
        return 0;
    }

    void append_rows(const float* rows, std::size_t count) {
        out_.seekp(0, std::ios::end);
        out_.write(reinterpret_cast<const char*>(rows),
                   static_cast<std::streamsize>(count * dim_ * sizeof(float)));
        header_.rows += count;
        header_.payload_hash = fnv1a64(rows, count * dim_ * sizeof(float), header_.payload_hash);
        out_.seekp(0);
        out_.write(reinterpret_cast<const char*>(&header_), sizeof(header_));
        out_.flush();
    }

    void discard() {
        out_.close();
        std::error_code ec;
        std::filesystem::remove(path_, ec);
    }

  private:
    std::filesystem::path path_;
    std::uint32_t dim_;
    MatrixFileHeader header_;
    std::fstream out_;
};

}  // namespace detail

// One row per caption, cached on disk keyed by (corpus content hash, embedder
// fingerprint). Unchanged inputs are served from cache without recomputation;
// a corrupt cache is detected by checksum and silently recomputed. Remote runs
// persist partial progress and resume after provider failures.
inline EmbeddingMatrix embed_corpus(const corpus::CorpusHandle& c, const EmbedderConfig& cfg,
                                    const EmbedCorpusOptions& opts = {}) {
    if (c.empty()) throw DataError("embed_corpus: corpus is empty");

    TextEmbedder embedder(cfg);
    embedder.fit_idf(c);
    const std::uint64_t corpus_hash = corpus::content_hash(c);
    const std::uint64_t fingerprint = embedder.fingerprint();

    std::filesystem::path cache;
    if (!opts.cache_dir.empty()) {
        std::filesystem::create_directories(opts.cache_dir);
        cache = detail::cache_path(opts.cache_dir, corpus_hash, fingerprint);
        if (auto loaded = try_read_matrix_file(cache);
            loaded && loaded->matrix.rows() == c.size() &&
            loaded->matrix.fingerprint == fingerprint)
            return std::move(loaded->matrix);
    }

    EmbeddingMatrix m;
    m.fingerprint = fingerprint;

    if (cfg.mode == EmbedderMode::remote) {
        RemoteEmbedClient client(cfg.remote);
        const int batch = std::max(1, cfg.remote.batch_size);

        // probe dim with the first batch unless a partial file already knows it
        std::vector<float> data;
        std::size_t done = 0;
        std::unique_ptr<detail::PartialWriter> partial;
        if (!cache.empty()) {
            auto part_path = cache.string() + ".part";
            // dim unknown before the first response; probe one batch first
            std::ifstream probe(part_path, std::ios::binary);
            MatrixFileHeader ph{};
            if (probe.read(reinterpret_cast<char*>(&ph), sizeof(ph)) &&
                std::memcmp(ph.magic, kMatrixMagic, 8) == 0 && ph.fingerprint == fingerprint) {
                m.dim = ph.dim;
            }
            probe.close();
            if (m.dim != 0) {
                partial = std::make_unique<detail::PartialWriter>(part_path, m.dim, fingerprint);
                done = partial->open_or_resume(data);
            }
        }

        while (done < c.size()) {
            std::vector<std::string> texts;
            const std::size_t end = std::min(c.size(), done + static_cast<std::size_t>(batch));
            for (std::size_t i = done; i < end; ++i) texts.push_back(c.captions[i].text);
            std::vector<std::vector<float>> vecs;
            try {
                vecs = client.embed_batch(texts);
            } catch (const ProviderError&) {
                // progress up to `done` is already on disk; rethrow for the caller
                throw;
            }
            if (vecs.size() != texts.size())
                throw ProviderError("embedding provider returned " + std::to_string(vecs.size()) +
                                    " vectors for " + std::to_string(texts.size()) + " inputs");
            for (auto& v : vecs) {
                if (m.dim == 0) {
                    m.dim = static_cast<std::uint32_t>(v.size());
                    if (m.dim == 0) throw ProviderError("provider returned empty embedding");
                    if (!cache.empty()) {
                        partial = std::make_unique<detail::PartialWriter>(cache.string() + ".part",
                                                                          m.dim, fingerprint);
                        partial->open_or_resume(data);
                    }
                }
                if (v.size() != m.dim)
                    throw ProviderError("provider embedding dim changed mid-corpus");
                detail::l2_normalize(v);  // never trust remote norms
                data.insert(data.end(), v.begin(), v.end());
            }
            if (partial)
                partial->append_rows(data.data() + done * m.dim, end - done);
            done = end;
        }
        m.data = std::move(data);
        if (partial) partial->discard();
    } else {
        m.dim = embedder.dim();
        m.data.assign(c.size() * static_cast<std::size_t>(m.dim), 0.0f);
        std::atomic<bool> failed{false};
        std::string error;
        std::mutex error_mu;
        parallel_for(c.size(), opts.threads, [&](std::size_t begin, std::size_t end) {
            for (std::size_t i = begin; i < end && !failed.load(std::memory_order_relaxed); ++i) {
                try {
                    auto v = embedder.embed(c.captions[i].tokens);
                    std::copy(v.begin(), v.end(), m.data.begin() + i * m.dim);
                } catch (const std::exception& e) {
                    std::lock_guard lock(error_mu);
                    failed = true;
                    error = e.what();
                }
            }
        });
        if (failed) throw DataError("embed_corpus: " + error);
    }

    for (std::size_t i = 0; i < m.rows(); ++i) detail::check_finite_unit(m.row(i));
    if (!cache.empty()) write_matrix_file(cache, m);
    return m;
}

}  // namespace icsd::embed
