#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <queue>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "icsd/corpus.hpp"
#include "icsd/embed.hpp"
#include "icsd/errors.hpp"
#include "icsd/jsonl.hpp"
#include "icsd/util.hpp"

namespace icsd::group {

using corpus::CaptionId;

// A query caption plus its k nearest corpus captions by cosine similarity.
// member_ids[0] is always the query; scores are non-increasing; ties broken
// by ascending caption id. Scores are clamped to [-1, 1].
struct Group {
    CaptionId query_id = 0;
    std::vector<CaptionId> member_ids;
    std::vector<float> scores;

    std::size_t size() const { return member_ids.size(); }
};

struct CoverState {
    std::vector<char> uncovered;          // indexed by caption id
    std::vector<CaptionId> selected;      // group query ids in pick order
    std::vector<std::uint64_t> newly_covered;  // per pick, parallel to selected
};

namespace detail {

// Shared by every similarity path. Fixed 4-accumulator order keeps results
// bitwise identical between the per-query and blocked paths while breaking
// the FMA latency chain.
[[gnu::noinline]] inline float dot(const float* a, const float* b, std::size_t n) {
    float s0 = 0.f, s1 = 0.f, s2 = 0.f, s3 = 0.f;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return ((s0 + s1) + (s2 + s3));
}

inline float clamp_score(float s) { return std::min(1.0f, std::max(-1.0f, s)); }

// Candidate ordering: higher score first, then lower id.
struct ScoredId {
    float score;
    CaptionId id;
};

inline bool better(const ScoredId& a, const ScoredId& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
}

}  // namespace detail

inline float cosine_similarity(std::span<const float> u, std::span<const float> v) {
    if (u.size() != v.size())
        throw DataError("cosine_similarity: dimension mismatch (" + std::to_string(u.size()) +
                        " vs " + std::to_string(v.size()) + ")");
    const double nu = std::sqrt(static_cast<double>(detail::dot(u.data(), u.data(), u.size())));
    const double nv = std::sqrt(static_cast<double>(detail::dot(v.data(), v.data(), v.size())));
    if (nu == 0.0 || nv == 0.0) throw DataError("cosine_similarity: zero-norm vector");
    return static_cast<float>(detail::dot(u.data(), v.data(), u.size()) / (nu * nv));
}

namespace detail {

// Fixed-capacity worst-at-top heap over (score desc, id asc).
class TopKHeap {
  public:
    explicit TopKHeap(std::size_t k) : k_(k) { heap_.reserve(k); }

    void offer(float score, CaptionId id) {
        if (k_ == 0) return;
        if (heap_.size() < k_) {
            heap_.push_back({score, id});
            std::push_heap(heap_.begin(), heap_.end(), better_cmp);
        } else if (better({score, id}, heap_.front())) {
            std::pop_heap(heap_.begin(), heap_.end(), better_cmp);
            heap_.back() = {score, id};
            std::push_heap(heap_.begin(), heap_.end(), better_cmp);
        }
    }

    // Ascending-rank order (best first). sort_heap's ascending order under
    // better_cmp already puts the best candidate at position 0.
    std::vector<ScoredId> take_sorted() {
        std::sort_heap(heap_.begin(), heap_.end(), better_cmp);
        return std::move(heap_);
    }

  private:
    // std heaps keep the *largest* element at front; invert so the worst
    // candidate sits on top and is evicted first.
    static bool better_cmp(const ScoredId& a, const ScoredId& b) { return better(a, b); }

    std::size_t k_;
    std::vector<ScoredId> heap_;
};

inline Group finalize_group(CaptionId query_id, std::vector<ScoredId> neighbors) {
    Group g;
    g.query_id = query_id;
    g.member_ids.reserve(neighbors.size() + 1);
    g.scores.reserve(neighbors.size() + 1);
    g.member_ids.push_back(query_id);
    g.scores.push_back(1.0f);  // s_qq of a unit vector
    for (const auto& n : neighbors) {
        g.member_ids.push_back(n.id);
        g.scores.push_back(n.score);
    }
    return g;
}

}  // namespace detail

inline Group top_k_group(CaptionId query_id, const embed::EmbeddingMatrix& m, std::size_t k) {
    const std::size_t n = m.rows();
    if (query_id >= n) throw DataError("top_k_group: query id out of range");
    if (k >= n && !(k == 0 && n == 1))
        throw DataError("top_k_group: k must satisfy k <= n-1");

    detail::TopKHeap heap(k);
    const float* q = m.row(query_id).data();
    for (std::size_t j = 0; j < n; ++j) {
        if (j == query_id) continue;
        const float s = detail::clamp_score(detail::dot(q, m.row(j).data(), m.dim));
        heap.offer(s, static_cast<CaptionId>(j));
    }
    return detail::finalize_group(query_id, heap.take_sorted());
}

struct TopKOptions {
    std::size_t block = 1024;  // candidate tile rows
    unsigned threads = 0;
    // Restrict candidates to captions sharing at least one token with the
    // query (inverted index). Changes results; off by default. Queries with
    // fewer than k sharing candidates fall back to the full scan.
    bool token_prefilter = false;
    const corpus::CorpusHandle* prefilter_corpus = nullptr;
};

namespace detail {

inline std::vector<ScoredId> prefiltered_candidates(
    CaptionId query_id, const embed::EmbeddingMatrix& m, std::size_t k,
    const std::unordered_map<std::string, std::vector<CaptionId>>& index,
    const corpus::CorpusHandle& corpus) {
    std::unordered_set<CaptionId> seen;
    for (const auto& tok : corpus.captions[query_id].tokens) {
        auto it = index.find(tok);
        if (it == index.end()) continue;
        for (CaptionId id : it->second)
            if (id != query_id) seen.insert(id);
    }
    if (seen.size() < k) return {};  // signal fallback
    TopKHeap heap(k);
    const float* q = m.row(query_id).data();
    for (CaptionId id : seen)
        heap.offer(clamp_score(dot(q, m.row(id).data(), m.dim)), id);
    return heap.take_sorted();
}

}  // namespace detail

// One group per caption; identical output to n independent top_k_group calls.
// Candidate rows are visited in fixed tiles so the score arithmetic matches
// the per-query path bit for bit; per-query heaps are worker-local.
inline std::vector<Group> top_k_all(const embed::EmbeddingMatrix& m, std::size_t k,
                                    const TopKOptions& opts = {}) {
    const std::size_t n = m.rows();
    if (n == 0) throw DataError("top_k_all: empty matrix");
    if (k >= n && !(k == 0 && n == 1))
        throw DataError("top_k_all: k must satisfy k <= n-1");
    const std::size_t block = std::max<std::size_t>(1, opts.block);

    std::unordered_map<std::string, std::vector<CaptionId>> inverted;
    if (opts.token_prefilter) {
        if (!opts.prefilter_corpus || opts.prefilter_corpus->size() != n)
            throw ConfigError("token_prefilter requires the corpus that produced the matrix");
        for (const auto& cap : opts.prefilter_corpus->captions) {
            std::unordered_set<std::string> uniq(cap.tokens.begin(), cap.tokens.end());
            for (const auto& tok : uniq) inverted[tok].push_back(cap.id);
        }
    }

    std::vector<Group> groups(n);
    parallel_for(n, opts.threads, [&](std::size_t qbegin, std::size_t qend) {
        for (std::size_t qi = qbegin; qi < qend; ++qi) {
            if (opts.token_prefilter) {
                auto neighbors = detail::prefiltered_candidates(
                    static_cast<CaptionId>(qi), m, k, inverted, *opts.prefilter_corpus);
                if (!neighbors.empty() || k == 0) {
                    groups[qi] =
                        detail::finalize_group(static_cast<CaptionId>(qi), std::move(neighbors));
                    continue;
                }
            }
            detail::TopKHeap heap(k);
            const float* q = m.row(qi).data();
            for (std::size_t cb = 0; cb < n; cb += block) {
                const std::size_t cend = std::min(n, cb + block);
                for (std::size_t j = cb; j < cend; ++j) {
                    if (j == qi) continue;
                    heap.offer(detail::clamp_score(detail::dot(q, m.row(j).data(), m.dim)),
                               static_cast<CaptionId>(j));
                }
            }
            groups[qi] = detail::finalize_group(static_cast<CaptionId>(qi), heap.take_sorted());
        }
    });
    return groups;
}

// Greedy cover: repeatedly pick the group with the most members still
// uncovered until nothing is left. Lazy stale-score max-heap; scores only
// decrease, so re-validating on pop preserves exact greedy order. Ties break
// by ascending query id.
inline CoverState greedy_cover(const std::vector<Group>& groups,
                               const std::vector<CaptionId>& corpus_ids) {
    std::size_t max_id = 0;
    for (CaptionId id : corpus_ids) max_id = std::max<std::size_t>(max_id, id);
    for (const Group& g : groups)
        for (CaptionId id : g.member_ids) max_id = std::max<std::size_t>(max_id, id);

    CoverState state;
    state.uncovered.assign(max_id + 1, 0);
    std::size_t remaining = 0;
    for (CaptionId id : corpus_ids) {
        if (!state.uncovered[id]) ++remaining;
        state.uncovered[id] = 1;
    }

    auto current_overlap = [&](const Group& g) {
        std::uint64_t o = 0;
        for (CaptionId id : g.member_ids) o += state.uncovered[id];
        return o;
    };

    struct Entry {
        std::uint64_t overlap;
        CaptionId query_id;
        std::size_t group_index;
    };
    auto worse = [](const Entry& a, const Entry& b) {
        if (a.overlap != b.overlap) return a.overlap < b.overlap;
        return a.query_id > b.query_id;
    };
    std::priority_queue<Entry, std::vector<Entry>, decltype(worse)> heap(worse);
    {
        std::unordered_set<CaptionId> query_ids;
        for (std::size_t i = 0; i < groups.size(); ++i) {
            if (!query_ids.insert(groups[i].query_id).second)
                throw DataError("greedy_cover: duplicate group query_id " +
                                std::to_string(groups[i].query_id));
            heap.push({current_overlap(groups[i]), groups[i].query_id, i});
        }
    }

    auto uncoverable = [&]() -> DataError {
        for (CaptionId id : corpus_ids)
            if (state.uncovered[id])
                return DataError("greedy_cover: caption id " + std::to_string(id) +
                                 " is not coverable by any group");
        return DataError("greedy_cover: internal accounting error");
    };

    while (remaining > 0) {
        if (heap.empty()) throw uncoverable();
        Entry top = heap.top();
        heap.pop();
        const std::uint64_t fresh = current_overlap(groups[top.group_index]);
        if (fresh != top.overlap) {
            if (fresh > 0) heap.push({fresh, top.query_id, top.group_index});
            continue;
        }
        if (fresh == 0) throw uncoverable();
        for (CaptionId id : groups[top.group_index].member_ids) {
            if (state.uncovered[id]) {
                state.uncovered[id] = 0;
                --remaining;
            }
        }
        state.selected.push_back(top.query_id);
        state.newly_covered.push_back(fresh);
    }
    return state;
}

// ---------------------------------------------------------------------------
// jsonl persistence
// ---------------------------------------------------------------------------

inline Json to_json(const Group& g) {
    Json j;
    j["query_id"] = g.query_id;
    j["member_ids"] = g.member_ids;
    j["scores"] = g.scores;
    return j;
}

inline Group group_from_json(const Json& j) {
    Group g;
    g.query_id = j.at("query_id").get<CaptionId>();
    g.member_ids = j.at("member_ids").get<std::vector<CaptionId>>();
    g.scores = j.at("scores").get<std::vector<float>>();
    if (g.member_ids.empty() || g.member_ids[0] != g.query_id)
        throw DataError("group record: member_ids[0] must equal query_id");
    if (g.scores.size() != g.member_ids.size())
        throw DataError("group record: scores and member_ids must be parallel");
    return g;
}

inline std::vector<Group> load_groups(const std::filesystem::path& path) {
    std::vector<Group> out;
    for_each_jsonl_record(path, [&](std::size_t, const Json& rec) {
        out.push_back(group_from_json(rec));
    });
    return out;
}

inline Json cover_pick_to_json(std::size_t rank, CaptionId query_id, std::uint64_t newly) {
    Json j;
    j["rank"] = rank;
    j["query_id"] = query_id;
    j["newly_covered"] = newly;
    return j;
}

}  // namespace icsd::group
