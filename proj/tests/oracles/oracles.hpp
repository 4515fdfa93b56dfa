#pragma once

// Independent reference implementations used only by tests. Deliberately
// written with different data structures and control flow than the library
// (plain sorts, map<vector<string>,..> n-gram keys, subset enumeration) so
// that agreement actually checks the production code paths.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "icsd/embed.hpp"
#include "icsd/group.hpp"
#include "icsd/metrics.hpp"

namespace oracle {

using Tokens = std::vector<std::string>;
using Ngram = std::vector<std::string>;

// ---------------------------------------------------------------------------
// top-k neighbours by exhaustive full sort. Scores use the library's dot
// kernel so float rounding is identical and any mismatch is a selection bug,
// not an arithmetic one.
// ---------------------------------------------------------------------------

inline std::vector<icsd::group::Group> topk_full_sort(const icsd::embed::EmbeddingMatrix& m,
                                                      std::size_t k) {
    const std::size_t n = m.rows();
    std::vector<icsd::group::Group> out(n);
    for (std::size_t q = 0; q < n; ++q) {
        std::vector<std::pair<float, std::uint64_t>> scored;
        scored.reserve(n - 1);
        for (std::size_t j = 0; j < n; ++j) {
            if (j == q) continue;
            float s = icsd::group::detail::dot(m.row(q).data(), m.row(j).data(), m.dim);
            s = std::min(1.0f, std::max(-1.0f, s));
            scored.emplace_back(s, static_cast<std::uint64_t>(j));
        }
        std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        icsd::group::Group g;
        g.query_id = q;
        g.member_ids.push_back(q);
        g.scores.push_back(1.0f);
        for (std::size_t i = 0; i < k && i < scored.size(); ++i) {
            g.member_ids.push_back(scored[i].second);
            g.scores.push_back(scored[i].first);
        }
        out[q] = std::move(g);
    }
    return out;
}

inline bool groups_equal(const std::vector<icsd::group::Group>& a,
                         const std::vector<icsd::group::Group>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].query_id != b[i].query_id) return false;
        if (a[i].member_ids != b[i].member_ids) return false;
        if (a[i].scores.size() != b[i].scores.size()) return false;
        for (std::size_t j = 0; j < a[i].scores.size(); ++j)
            if (a[i].scores[j] != b[i].scores[j]) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// minimum set cover by subset enumeration; feasible only for tiny instances.
// Returns the size of the smallest sub-collection covering `universe`, or
// SIZE_MAX when no sub-collection does.
// ---------------------------------------------------------------------------

inline std::size_t min_cover_size(const std::vector<std::vector<std::uint64_t>>& sets,
                                  const std::vector<std::uint64_t>& universe) {
    const std::size_t g = sets.size();
    std::set<std::uint64_t> need(universe.begin(), universe.end());
    std::size_t best = static_cast<std::size_t>(-1);
    for (std::uint32_t mask = 1; mask < (1u << g); ++mask) {
        std::set<std::uint64_t> covered;
        for (std::size_t i = 0; i < g; ++i)
            if (mask & (1u << i)) covered.insert(sets[i].begin(), sets[i].end());
        if (std::includes(covered.begin(), covered.end(), need.begin(), need.end()))
            best = std::min(best, static_cast<std::size_t>(std::popcount(mask)));
    }
    return best;
}

// ---------------------------------------------------------------------------
// BLEU@4 straight from the definition.
// ---------------------------------------------------------------------------

inline std::map<Ngram, int> count_ngrams(const Tokens& toks, std::size_t n) {
    std::map<Ngram, int> out;
    if (toks.size() < n) return out;
    for (std::size_t i = 0; i + n <= toks.size(); ++i)
        ++out[Ngram(toks.begin() + i, toks.begin() + i + n)];
    return out;
}

inline double bleu4_direct(const std::vector<icsd::metrics::EvalPair>& pairs, bool add_one) {
    std::array<double, 5> num{}, den{};
    double c_total = 0.0, r_total = 0.0;
    for (const auto& p : pairs) {
        const long c = static_cast<long>(p.hypothesis.size());
        c_total += static_cast<double>(c);
        long best_len = -1;
        for (const auto& ref : p.references) {
            const long rl = static_cast<long>(ref.size());
            if (best_len < 0) {
                best_len = rl;
                continue;
            }
            if (std::labs(rl - c) < std::labs(best_len - c) ||
                (std::labs(rl - c) == std::labs(best_len - c) && rl < best_len))
                best_len = rl;
        }
        r_total += static_cast<double>(best_len);
        for (std::size_t n = 1; n <= 4; ++n) {
            std::map<Ngram, int> cap;
            for (const auto& ref : p.references)
                for (const auto& [g, cnt] : count_ngrams(ref, n))
                    cap[g] = std::max(cap[g], cnt);
            for (const auto& [g, cnt] : count_ngrams(p.hypothesis, n)) {
                auto it = cap.find(g);
                num[n] += std::min(cnt, it == cap.end() ? 0 : it->second);
                den[n] += cnt;
            }
        }
    }
    double logsum = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
        double p;
        if (add_one && n >= 2)
            p = (num[n] + 1.0) / (den[n] + 1.0);
        else
            p = den[n] > 0.0 ? num[n] / den[n] : 0.0;
        if (p <= 0.0) return 0.0;
        logsum += std::log(p) / 4.0;
    }
    const double bp =
        (c_total > r_total || c_total == 0.0) ? 1.0 : std::exp(1.0 - r_total / c_total);
    return bp * std::exp(logsum);
}

// ---------------------------------------------------------------------------
// CIDEr-D transcribed from the canonical consensus-scorer structure:
// tf * (log N - log df) vectors per n, clipped dot / norms, Gaussian length
// penalty, mean over n then refs, x10, mean over images.
// ---------------------------------------------------------------------------

struct CiderVec {
    std::array<std::map<Ngram, double>, 4> vec;
    std::array<double, 4> norm{};
    double length = 0.0;
};

inline double cider_d_direct(const std::vector<icsd::metrics::EvalPair>& pairs,
                             double sigma = 6.0) {
    std::map<Ngram, double> doc_freq;
    for (const auto& p : pairs) {
        std::set<Ngram> in_image;
        for (const auto& ref : p.references)
            for (std::size_t n = 1; n <= 4; ++n)
                for (const auto& [g, cnt] : count_ngrams(ref, n)) in_image.insert(g);
        for (const auto& g : in_image) doc_freq[g] += 1.0;
    }
    const double log_num = std::log(static_cast<double>(pairs.size()));

    auto counts2vec = [&](const Tokens& toks) {
        CiderVec v;
        for (std::size_t n = 1; n <= 4; ++n) {
            for (const auto& [g, tf] : count_ngrams(toks, n)) {
                auto it = doc_freq.find(g);
                const double df =
                    std::log(std::max(1.0, it == doc_freq.end() ? 0.0 : it->second));
                const double w = static_cast<double>(tf) * (log_num - df);
                v.vec[n - 1][g] = w;
                v.norm[n - 1] += w * w;
            }
        }
        for (double& x : v.norm) x = std::sqrt(x);
        v.length = static_cast<double>(toks.size());
        return v;
    };

    double total = 0.0;
    for (const auto& p : pairs) {
        const CiderVec hyp = counts2vec(p.hypothesis);
        std::array<double, 4> score{};
        for (const auto& ref : p.references) {
            const CiderVec rv = counts2vec(ref);
            const double delta = hyp.length - rv.length;
            for (std::size_t n = 0; n < 4; ++n) {
                double val = 0.0;
                for (const auto& [g, w] : hyp.vec[n]) {
                    auto it = rv.vec[n].find(g);
                    if (it != rv.vec[n].end()) val += std::min(w, it->second) * it->second;
                }
                if (hyp.norm[n] != 0.0 && rv.norm[n] != 0.0) val /= hyp.norm[n] * rv.norm[n];
                val *= std::exp(-(delta * delta) / (2.0 * sigma * sigma));
                score[n] += val;
            }
        }
        double avg = (score[0] + score[1] + score[2] + score[3]) / 4.0;
        avg /= static_cast<double>(p.references.size());
        total += avg * 10.0;
    }
    return total / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Deterministic caption generator for metric fixtures: no library RNG helpers.
// ---------------------------------------------------------------------------

inline Tokens random_caption(std::uint64_t& state, std::size_t min_len = 4,
                             std::size_t max_len = 14) {
    static const char* kWords[] = {"a",     "the",   "dog",   "cat",   "man",    "woman",
                                   "red",   "blue",  "small", "large", "sits",   "runs",
                                   "on",    "near",  "table", "chair", "street", "park",
                                   "holds", "rides", "bike",  "ball",  "young",  "old"};
    constexpr std::size_t kCount = sizeof(kWords) / sizeof(kWords[0]);
    auto next = [&state]() {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        return state;
    };
    const std::size_t len = min_len + next() % (max_len - min_len + 1);
    Tokens out;
    out.reserve(len);
    for (std::size_t i = 0; i < len; ++i) out.push_back(kWords[next() % kCount]);
    return out;
}

}  // namespace oracle
