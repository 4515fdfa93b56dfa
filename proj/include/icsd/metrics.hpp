#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "icsd/corpus.hpp"
#include "icsd/errors.hpp"
#include "icsd/jsonl.hpp"

namespace icsd::metrics {

struct EvalPair {
    std::string image_key;
    std::vector<std::string> hypothesis;
    std::vector<std::vector<std::string>> references;  // at least one
};

namespace detail {

using Counts = std::unordered_map<std::string, std::uint32_t>;

// n-gram key: tokens joined by a separator that cannot appear inside a token
inline Counts ngram_counts(const std::vector<std::string>& tokens, std::size_t n) {
    Counts out;
    if (tokens.size() < n || n == 0) return out;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        std::string key = tokens[i];
        for (std::size_t j = 1; j < n; ++j) {
            key.push_back('\x1f');
            key += tokens[i + j];
        }
        ++out[key];
    }
    return out;
}

inline std::size_t lcs_length(const std::vector<std::string>& a,
                              const std::vector<std::string>& b) {
    if (a.empty() || b.empty()) return 0;
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = (a[i - 1] == b[j - 1]) ? prev[j - 1] + 1
                                            : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

}  // namespace detail

struct Fraction {
    std::uint64_t num = 0;
    std::uint64_t den = 0;
    double value() const { return den == 0 ? 0.0 : static_cast<double>(num) / den; }
};

// Corpus-level clipped n-gram precision: numerator clips each hypothesis
// n-gram count at the maximum count over that pair's references.
inline Fraction modified_precision(const std::vector<EvalPair>& pairs, std::size_t n) {
    if (n == 0) throw DataError("modified_precision: n must be >= 1");
    Fraction f;
    for (const auto& pair : pairs) {
        detail::Counts hyp = detail::ngram_counts(pair.hypothesis, n);
        detail::Counts max_ref;
        for (const auto& ref : pair.references) {
            for (const auto& [g, c] : detail::ngram_counts(ref, n)) {
                auto& slot = max_ref[g];
                slot = std::max(slot, c);
            }
        }
        for (const auto& [g, c] : hyp) {
            auto it = max_ref.find(g);
            f.num += std::min(c, it == max_ref.end() ? 0u : it->second);
            f.den += c;
        }
    }
    return f;
}

enum class BleuSmoothing { none, add_one };

// Geometric mean of clipped precisions n=1..4 with uniform weights, times the
// brevity penalty exp(1 - r/c) for c <= r. r sums closest-reference lengths
// (ties toward the shorter reference). add_one smoothing applies to n >= 2.
inline double bleu4(const std::vector<EvalPair>& pairs,
                    BleuSmoothing smoothing = BleuSmoothing::none) {
    if (pairs.empty()) throw DataError("bleu4: empty pair list");

    double hyp_len = 0.0, ref_len = 0.0;
    for (const auto& pair : pairs) {
        const std::size_t c = pair.hypothesis.size();
        hyp_len += static_cast<double>(c);
        std::size_t best = pair.references.front().size();
        for (const auto& ref : pair.references) {
            const std::size_t r = ref.size();
            const auto diff = [&](std::size_t len) {
                return len > c ? len - c : c - len;
            };
            if (diff(r) < diff(best) || (diff(r) == diff(best) && r < best)) best = r;
        }
        ref_len += static_cast<double>(best);
    }

    double log_sum = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
        Fraction f = modified_precision(pairs, n);
        double p;
        if (smoothing == BleuSmoothing::add_one && n >= 2)
            p = static_cast<double>(f.num + 1) / static_cast<double>(f.den + 1);
        else
            p = f.value();
        if (p <= 0.0) return 0.0;
        log_sum += 0.25 * std::log(p);
    }
    const double bp = hyp_len >= ref_len || hyp_len == 0.0
                          ? 1.0
                          : std::exp(1.0 - ref_len / hyp_len);
    return bp * std::exp(log_sum);
}

// Per pair, max over references of the LCS F-measure with beta = 1.2:
// P = LCS/|hyp|, R = LCS/|ref|, F = (1+b^2)PR / (R + b^2 P). Corpus mean.
inline double rouge_l(const std::vector<EvalPair>& pairs, double beta = 1.2) {
    if (pairs.empty()) throw DataError("rouge_l: empty pair list");
    const double b2 = beta * beta;
    double total = 0.0;
    for (const auto& pair : pairs) {
        double best = 0.0;
        for (const auto& ref : pair.references) {
            if (pair.hypothesis.empty() || ref.empty()) continue;
            const double lcs = static_cast<double>(detail::lcs_length(pair.hypothesis, ref));
            if (lcs == 0.0) continue;
            const double p = lcs / static_cast<double>(pair.hypothesis.size());
            const double r = lcs / static_cast<double>(ref.size());
            best = std::max(best, (1.0 + b2) * p * r / (r + b2 * p));
        }
        total += best;
    }
    return total / static_cast<double>(pairs.size());
}

namespace detail {

struct TfIdfVecs {
    std::array<std::unordered_map<std::string, double>, 4> vec;
    std::array<double, 4> norm{};
    double length = 0.0;  // unigram token count
};

inline TfIdfVecs cider_vectors(const std::vector<std::string>& tokens,
                               const std::unordered_map<std::string, std::uint32_t>& df,
                               double log_num_images) {
    TfIdfVecs out;
    for (std::size_t n = 1; n <= 4; ++n) {
        for (const auto& [g, c] : ngram_counts(tokens, n)) {
            auto it = df.find(g);
            const double d = it == df.end() ? 1.0 : std::max(1.0, static_cast<double>(it->second));
            const double w = static_cast<double>(c) * (log_num_images - std::log(d));
            out.vec[n - 1][g] = w;
            out.norm[n - 1] += w * w;
        }
    }
    for (double& x : out.norm) x = std::sqrt(x);
    out.length = static_cast<double>(tokens.size());
    return out;
}

}  // namespace detail

// Consensus metric over clipped tf-idf n-gram cosines with a Gaussian length
// penalty (sigma = 6), averaged over references and n = 1..4, scaled to
// [0, 10], then averaged over pairs. Document frequencies come from this
// evaluation set's own references, so a single-image set scores 0 by idf.
inline double cider_d(const std::vector<EvalPair>& pairs, double sigma = 6.0,
                      std::vector<double>* per_pair = nullptr) {
    if (pairs.empty()) throw DataError("cider_d: empty pair list");

    std::unordered_map<std::string, std::uint32_t> df;
    for (const auto& pair : pairs) {
        std::unordered_set<std::string> image_grams;
        for (const auto& ref : pair.references)
            for (std::size_t n = 1; n <= 4; ++n)
                for (const auto& [g, c] : detail::ngram_counts(ref, n)) image_grams.insert(g);
        for (const auto& g : image_grams) ++df[g];
    }
    const double log_n = std::log(static_cast<double>(pairs.size()));

    double total = 0.0;
    for (const auto& pair : pairs) {
        auto hyp = detail::cider_vectors(pair.hypothesis, df, log_n);
        std::array<double, 4> acc{};
        for (const auto& ref : pair.references) {
            auto rv = detail::cider_vectors(ref, df, log_n);
            const double delta = hyp.length - rv.length;
            const double penalty = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
            for (std::size_t n = 0; n < 4; ++n) {
                double dot = 0.0;
                for (const auto& [g, w] : hyp.vec[n]) {
                    auto it = rv.vec[n].find(g);
                    if (it == rv.vec[n].end()) continue;
                    dot += std::min(w, it->second) * it->second;  // clip hyp at ref count
                }
                if (hyp.norm[n] > 0.0 && rv.norm[n] > 0.0)
                    dot /= hyp.norm[n] * rv.norm[n];
                acc[n] += dot * penalty;
            }
        }
        double pair_score = 0.0;
        for (double v : acc) pair_score += v;
        pair_score /= 4.0 * static_cast<double>(pair.references.size());
        pair_score *= 10.0;
        if (per_pair) per_pair->push_back(pair_score);
        total += pair_score;
    }
    return total / static_cast<double>(pairs.size());
}

// Exact-match METEOR: unigram alignment only, no stemming or synonym stages.
// Per pair the best reference by score counts; alignment is greedy
// left-to-right preferring the ref position that continues the current run.
inline double meteor_exact(const std::vector<EvalPair>& pairs) {
    if (pairs.empty()) throw DataError("meteor_exact: empty pair list");

    auto score_against = [](const std::vector<std::string>& hyp,
                            const std::vector<std::string>& ref) {
        if (hyp.empty() || ref.empty()) return 0.0;
        std::unordered_map<std::string, std::vector<std::size_t>> positions;
        for (std::size_t j = 0; j < ref.size(); ++j) positions[ref[j]].push_back(j);
        std::unordered_map<std::string, std::size_t> next_unused;
        std::vector<char> used(ref.size(), 0);

        std::size_t m = 0, chunks = 0;
        bool prev_aligned = false;
        std::size_t prev_pos = 0;
        for (const auto& tok : hyp) {
            auto it = positions.find(tok);
            if (it == positions.end()) {
                prev_aligned = false;
                continue;
            }
            std::size_t chosen = ref.size();
            if (prev_aligned && prev_pos + 1 < ref.size() && ref[prev_pos + 1] == tok &&
                !used[prev_pos + 1]) {
                chosen = prev_pos + 1;  // continue the run
            } else {
                for (std::size_t p : it->second)
                    if (!used[p]) { chosen = p; break; }
            }
            if (chosen == ref.size()) {
                prev_aligned = false;
                continue;
            }
            used[chosen] = 1;
            ++m;
            if (!(prev_aligned && chosen == prev_pos + 1)) ++chunks;
            prev_aligned = true;
            prev_pos = chosen;
        }
        if (m == 0) return 0.0;
        const double p = static_cast<double>(m) / static_cast<double>(hyp.size());
        const double r = static_cast<double>(m) / static_cast<double>(ref.size());
        const double f_mean = 10.0 * p * r / (r + 9.0 * p);
        const double frag = static_cast<double>(chunks) / static_cast<double>(m);
        return f_mean * (1.0 - 0.5 * frag * frag * frag);
    };

    double total = 0.0;
    for (const auto& pair : pairs) {
        double best = 0.0;
        for (const auto& ref : pair.references)
            best = std::max(best, score_against(pair.hypothesis, ref));
        total += best;
    }
    return total / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

struct PairBreakdown {
    std::string image_key;
    double rouge_l = 0.0;
    double meteor = 0.0;
    double cider_d = 0.0;
};

struct MetricReport {
    double bleu4 = 0.0;
    double rouge_l = 0.0;
    double cider_d = 0.0;
    double meteor = 0.0;
    std::vector<PairBreakdown> pairs;
    Json config;
};

inline MetricReport evaluate(const std::vector<EvalPair>& pairs,
                             BleuSmoothing smoothing = BleuSmoothing::none) {
    for (const auto& pair : pairs)
        if (pair.references.empty())
            throw DataError("evaluate: pair " + pair.image_key + " has no references");
    MetricReport rep;
    rep.bleu4 = bleu4(pairs, smoothing);
    rep.rouge_l = rouge_l(pairs);
    std::vector<double> cider_per_pair;
    rep.cider_d = cider_d(pairs, 6.0, &cider_per_pair);
    rep.meteor = meteor_exact(pairs);
    rep.pairs.reserve(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        std::vector<EvalPair> one{pairs[i]};
        PairBreakdown b;
        b.image_key = pairs[i].image_key;
        b.rouge_l = rouge_l(one);
        b.meteor = meteor_exact(one);
        b.cider_d = cider_per_pair[i];  // shares the corpus-wide idf table
        rep.pairs.push_back(b);
    }
    rep.config["tokenizer"] = "lowercase, punctuation stripped, whitespace split";
    rep.config["bleu_smoothing"] = smoothing == BleuSmoothing::none ? "none" : "add_one";
    rep.config["meteor"] = "exact-match";
    rep.config["rouge_beta"] = 1.2;
    rep.config["cider_sigma"] = 6.0;
    return rep;
}

// Hypothesis file: jsonl {"image_key","caption"}; reference file: jsonl
// {"image_key","captions":[str]}. Every hypothesis key must have references.
inline std::vector<EvalPair> load_eval_pairs(const std::filesystem::path& hyp_path,
                                             const std::filesystem::path& ref_path) {
    std::unordered_map<std::string, std::vector<std::vector<std::string>>> refs;
    for_each_jsonl_record(ref_path, [&](std::size_t lineno, const Json& rec) {
        if (!rec.contains("image_key") || !rec.contains("captions"))
            throw DataError(ref_path.string() + ":" + std::to_string(lineno) +
                            ": reference record needs \"image_key\" and \"captions\"");
        auto& slot = refs[rec["image_key"].get<std::string>()];
        for (const auto& c : rec["captions"])
            slot.push_back(corpus::tokenize(c.get<std::string>()));
    });

    std::vector<EvalPair> pairs;
    std::unordered_set<std::string> seen;
    for_each_jsonl_record(hyp_path, [&](std::size_t lineno, const Json& rec) {
        if (!rec.contains("image_key") || !rec.contains("caption"))
            throw DataError(hyp_path.string() + ":" + std::to_string(lineno) +
                            ": hypothesis record needs \"image_key\" and \"caption\"");
        const std::string key = rec["image_key"].get<std::string>();
        if (!seen.insert(key).second)
            throw DataError("duplicate hypothesis image_key: " + key);
        auto it = refs.find(key);
        if (it == refs.end() || it->second.empty())
            throw DataError("no references for image_key: " + key);
        EvalPair p;
        p.image_key = key;
        p.hypothesis = corpus::tokenize(rec["caption"].get<std::string>());
        p.references = it->second;
        pairs.push_back(std::move(p));
    });
    if (pairs.empty()) throw DataError("no hypothesis records in " + hyp_path.string());
    return pairs;
}

inline Json report_to_json(const MetricReport& rep) {
    Json j;
    j["scores"]["bleu4"] = rep.bleu4;
    j["scores"]["rouge_l"] = rep.rouge_l;
    j["scores"]["cider_d"] = rep.cider_d;
    j["scores"]["meteor_exact"] = rep.meteor;
    j["display"]["B@4"] = rep.bleu4 * 100.0;
    j["display"]["M (exact)"] = rep.meteor * 100.0;
    j["display"]["R"] = rep.rouge_l * 100.0;
    j["display"]["C"] = rep.cider_d * 100.0;
    j["pairs"] = Json::array();
    for (const auto& p : rep.pairs) {
        Json row;
        row["image_key"] = p.image_key;
        row["rouge_l"] = p.rouge_l;
        row["meteor_exact"] = p.meteor;
        row["cider_d"] = p.cider_d;
        j["pairs"].push_back(row);
    }
    j["config"] = rep.config;
    return j;
}

// Aligned-column table on the x100 display scale.
inline std::string render_table(const MetricReport& rep) {
    std::ostringstream os;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-10s %8s %10s %8s %8s\n", "", "B@4", "M (exact)", "R", "C");
    os << buf;
    std::snprintf(buf, sizeof(buf), "%-10s %8.1f %10.1f %8.1f %8.1f\n", "corpus",
                  rep.bleu4 * 100.0, rep.meteor * 100.0, rep.rouge_l * 100.0,
                  rep.cider_d * 100.0);
    os << buf;
    return os.str();
}

}  // namespace icsd::metrics
