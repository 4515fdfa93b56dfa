#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "icsd/errors.hpp"
#include "icsd/hash.hpp"
#include "icsd/jsonl.hpp"
#include "icsd/util.hpp"

namespace icsd::corpus {

using CaptionId = std::uint64_t;

enum class CaptionSource { annotated, crawled, generated };

inline std::string_view to_string(CaptionSource s) {
    switch (s) {
        case CaptionSource::annotated: return "annotated";
        case CaptionSource::crawled: return "crawled";
        case CaptionSource::generated: return "generated";
    }
    return "crawled";
}

inline CaptionSource caption_source_from(std::string_view s) {
    if (s == "annotated") return CaptionSource::annotated;
    if (s == "crawled") return CaptionSource::crawled;
    if (s == "generated") return CaptionSource::generated;
    throw DataError("unknown caption source: " + std::string(s));
}

struct Caption {
    CaptionId id = 0;
    std::string text;                     // whitespace-normalized, non-empty
    std::vector<std::string> tokens;      // always tokenize(text)
    CaptionSource source = CaptionSource::crawled;
    std::optional<std::string> image_id;  // only for annotated corpora
};

struct SourceManifest {
    std::string origin;
    std::uint64_t records_read = 0;
    std::uint64_t blanks_skipped = 0;
    std::uint64_t length_filtered = 0;
    std::uint64_t duplicates_dropped = 0;
    // new id -> id assigned at load time, survives filter/dedup re-densification
    std::vector<CaptionId> original_ids;
};

struct CorpusHandle {
    std::vector<Caption> captions;
    SourceManifest manifest;

    std::size_t size() const { return captions.size(); }
    bool empty() const { return captions.empty(); }
    const Caption& at(CaptionId id) const {
        if (id >= captions.size()) throw DataError("caption id out of range: " + std::to_string(id));
        return captions[static_cast<std::size_t>(id)];
    }
};

// Lowercase, strip punctuation, split on whitespace runs. One tokenizer for
// everything: length filters, dedup keys, metric n-grams, summary word counts.
// Bytes outside ASCII pass through untouched.
inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            if (!cur.empty()) {
                tokens.push_back(std::move(cur));
                cur.clear();
            }
        } else if (std::ispunct(c)) {
            // stripped, not replaced by a space
        } else {
            cur.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out.push_back(' ');
        out += tokens[i];
    }
    return out;
}

enum class CorpusFormat { plain_lines, jsonl };

inline std::string_view to_string(CorpusFormat f) {
    return f == CorpusFormat::plain_lines ? "plain-lines" : "jsonl";
}

inline CorpusFormat corpus_format_from(std::string_view s) {
    if (s == "plain-lines" || s == "plain" || s == "lines" || s == "txt")
        return CorpusFormat::plain_lines;
    if (s == "jsonl") return CorpusFormat::jsonl;
    throw ConfigError("unknown corpus format: " + std::string(s));
}

namespace detail {

inline void push_caption(CorpusHandle& c, std::string text, CaptionSource source,
                         std::optional<std::string> image_id) {
    std::string norm = collapse_whitespace(text);
    ++c.manifest.records_read;
    if (norm.empty()) {
        ++c.manifest.blanks_skipped;
        return;
    }
    Caption cap;
    cap.id = c.captions.size();
    cap.text = std::move(norm);
    cap.tokens = tokenize(cap.text);
    cap.source = source;
    cap.image_id = std::move(image_id);
    c.manifest.original_ids.push_back(cap.id);
    c.captions.push_back(std::move(cap));
}

}  // namespace detail

// canonical corpus jsonl: {"id": int, "text": str, "tokens": [str],
// "source": str, "image_id"?: str}
inline Json to_json(const Caption& cap) {
    Json j;
    j["id"] = cap.id;
    j["text"] = cap.text;
    j["tokens"] = cap.tokens;
    j["source"] = std::string(to_string(cap.source));
    if (cap.image_id) j["image_id"] = *cap.image_id;
    return j;
}

inline CorpusHandle load_corpus(const std::filesystem::path& path, CorpusFormat format,
                                CaptionSource default_source = CaptionSource::crawled) {
    CorpusHandle c;
    c.manifest.origin = path.string();
    if (format == CorpusFormat::plain_lines) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open corpus file " + path.string());
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            detail::push_caption(c, line, default_source, std::nullopt);
        }
    } else {
        for_each_jsonl_record(path, [&](std::size_t lineno, const Json& rec) {
            if (!rec.is_object() || !rec.contains("text") || !rec["text"].is_string())
                throw DataError(path.string() + ":" + std::to_string(lineno) +
                                ": jsonl record has no \"text\" string field");
            CaptionSource src = default_source;
            if (rec.contains("source")) src = caption_source_from(rec["source"].get<std::string>());
            std::optional<std::string> image_id;
            if (rec.contains("image_id")) {
                if (rec["image_id"].is_string())
                    image_id = rec["image_id"].get<std::string>();
                else if (rec["image_id"].is_number_integer())
                    image_id = std::to_string(rec["image_id"].get<std::int64_t>());
                else
                    throw DataError(path.string() + ":" + std::to_string(lineno) +
                                    ": \"image_id\" must be a string or integer");
            }
            detail::push_caption(c, rec["text"].get<std::string>(), src, std::move(image_id));
        });
    }
    if (c.captions.empty())
        throw DataError("corpus " + path.string() + " contains no captions after load");
    return c;
}

inline constexpr std::size_t kNoLengthBound = std::numeric_limits<std::size_t>::max();

// Keeps captions with min_words <= |tokens| <= max_words, re-densifies ids.
inline CorpusHandle filter_by_length(const CorpusHandle& in, std::size_t min_words,
                                     std::size_t max_words = kNoLengthBound) {
    if (min_words > max_words)
        throw ConfigError("filter_by_length: min_words > max_words");
    CorpusHandle out;
    out.manifest = in.manifest;
    out.manifest.original_ids.clear();
    for (const Caption& cap : in.captions) {
        const std::size_t w = cap.tokens.size();
        if (w < min_words || w > max_words) {
            ++out.manifest.length_filtered;
            continue;
        }
        Caption kept = cap;
        kept.id = out.captions.size();
        out.manifest.original_ids.push_back(in.manifest.original_ids[cap.id]);
        out.captions.push_back(std::move(kept));
    }
    return out;
}

// Removes exact duplicates by normalized token sequence, first occurrence kept.
inline CorpusHandle dedup(const CorpusHandle& in) {
    CorpusHandle out;
    out.manifest = in.manifest;
    out.manifest.original_ids.clear();
    std::unordered_map<std::string, bool> seen;
    seen.reserve(in.captions.size());
    for (const Caption& cap : in.captions) {
        std::string key = join_tokens(cap.tokens);
        if (!seen.emplace(std::move(key), true).second) {
            ++out.manifest.duplicates_dropped;
            continue;
        }
        Caption kept = cap;
        kept.id = out.captions.size();
        out.manifest.original_ids.push_back(in.manifest.original_ids[cap.id]);
        out.captions.push_back(std::move(kept));
    }
    return out;
}

inline void save_canonical(const CorpusHandle& c, std::ostream& os) {
    for (const Caption& cap : c.captions) os << to_json(cap).dump() << '\n';
}

inline void save_canonical(const CorpusHandle& c, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write corpus file " + path.string());
    save_canonical(c, os);
}

// Reads a canonical corpus file. Tokens are recomputed so the tokenization
// invariant holds even if the file was edited by hand.
inline CorpusHandle load_canonical(const std::filesystem::path& path) {
    CorpusHandle c;
    c.manifest.origin = path.string();
    for_each_jsonl_record(path, [&](std::size_t lineno, const Json& rec) {
        if (!rec.contains("text") || !rec["text"].is_string())
            throw DataError(path.string() + ":" + std::to_string(lineno) +
                            ": jsonl record has no \"text\" string field");
        CaptionSource src = CaptionSource::crawled;
        if (rec.contains("source")) src = caption_source_from(rec["source"].get<std::string>());
        std::optional<std::string> image_id;
        if (rec.contains("image_id")) image_id = rec["image_id"].get<std::string>();
        detail::push_caption(c, rec["text"].get<std::string>(), src, std::move(image_id));
    });
    if (c.captions.empty()) throw DataError("corpus " + path.string() + " is empty");
    return c;
}

// Content hash over texts and image ids; keys embedding caches and stage markers.
inline std::uint64_t content_hash(const CorpusHandle& c) {
    std::uint64_t h = kFnvOffsetBasis;
    for (const Caption& cap : c.captions) {
        h = fnv1a64(cap.text, h);
        h = fnv1a64("\x1f", h);
        if (cap.image_id) h = fnv1a64(*cap.image_id, h);
        h = fnv1a64("\x1e", h);
    }
    return h;
}

}  // namespace icsd::corpus
