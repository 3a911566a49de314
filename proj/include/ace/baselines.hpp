#pragma once

// Classical estimators used for comparison.
//
// Independence treats element occurrences as independent Bernoulli events
// with probability freq(e)/N:
//   superset: N * prod_i freq(e_i)/N
//   subset:   N * prod_{e not in literal} (1 - freq(e)/N)
//   overlap:  min(N, sum_i freq(e_i))
//
// Sampling keeps a seeded uniform sample of records (without replacement,
// ratio rho) and scales the matching count by N/sample_size.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <unordered_set>
#include <vector>

#include "ace/common.hpp"
#include "ace/corpus.hpp"
#include "ace/queries.hpp"

namespace ace {

inline double clamp_estimate(double est, double n_records) {
    return std::min(std::max(est, 1.0), std::max(n_records, 1.0));
}

class IndependenceEstimator {
public:
    explicit IndependenceEstimator(const FrequencyTable& table) : table_(&table) {
        // Precomputed log product of absence probabilities over the whole
        // universe; subset queries divide the literal's terms back out.
        log_absent_total_ = 0.0;
        for (double f : table.freq) log_absent_total_ += log_absent(f);
    }

    double estimate(const SetQuery& q) const {
        const double n = table_->n_records;
        if (n <= 0.0) return 1.0;
        switch (q.op) {
            case Op::Overlap: {
                double s = 0.0;
                for (ElementId e : q.elements) s += freq(e);
                return clamp_estimate(s, n);
            }
            case Op::Superset: {
                double logp = 0.0;
                for (ElementId e : q.elements) {
                    const double f = freq(e);
                    if (f <= 0.0) return 1.0;
                    logp += std::log(f / n);
                }
                return clamp_estimate(n * std::exp(logp), n);
            }
            default: {
                double logp = log_absent_total_;
                for (ElementId e : q.elements) logp -= log_absent(freq(e));
                return clamp_estimate(n * std::exp(logp), n);
            }
        }
    }

private:
    double freq(ElementId e) const {
        return e < table_->freq.size() ? table_->freq[e] : 0.0;
    }

    double log_absent(double f) const {
        const double n = table_->n_records;
        const double p = std::min(f / n, 1.0);
        if (p >= 1.0) return -std::numeric_limits<double>::infinity();
        return std::log1p(-p);
    }

    const FrequencyTable* table_;
    double log_absent_total_ = 0.0;
};

// Uniform record sample. Holds copies of the sampled records so estimation
// never touches the corpus.
class SampleSketch {
public:
    SampleSketch(const Corpus& c, double ratio, std::uint64_t seed) {
        if (!(ratio > 0.0) || ratio > 1.0) throw DomainError("sample ratio must be in (0, 1]");
        n_records_ = static_cast<double>(c.size());
        const std::size_t want = std::min(
            c.size(), static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(c.size()))));
        std::vector<std::uint32_t> live;
        live.reserve(c.size());
        for (std::size_t pos = 0; pos < c.position_count(); ++pos)
            if (c.live(pos)) live.push_back(static_cast<std::uint32_t>(pos));
        Rng rng(seed);
        for (std::size_t i : rng.sample_without_replacement(live.size(), want))
            sample_.push_back(c.record(live[i]).elements);
    }

    std::size_t sample_size() const { return sample_.size(); }

    std::size_t bytes() const {
        std::size_t b = sizeof(*this) + sample_.capacity() * sizeof(sample_[0]);
        for (const auto& r : sample_) b += r.capacity() * sizeof(ElementId);
        return b;
    }

    double estimate(const SetQuery& q) const {
        if (sample_.empty()) return 1.0;
        std::unordered_set<ElementId> literal(q.elements.begin(), q.elements.end());
        std::size_t hits = 0;
        for (const auto& elems : sample_) {
            bool match = false;
            switch (q.op) {
                case Op::Superset: {
                    match = true;
                    for (ElementId e : q.elements) {
                        if (!std::binary_search(elems.begin(), elems.end(), e)) {
                            match = false;
                            break;
                        }
                    }
                    break;
                }
                case Op::Subset: {
                    match = true;
                    for (ElementId e : elems) {
                        if (!literal.count(e)) {
                            match = false;
                            break;
                        }
                    }
                    break;
                }
                default: {
                    for (ElementId e : elems) {
                        if (literal.count(e)) {
                            match = true;
                            break;
                        }
                    }
                    break;
                }
            }
            if (match) ++hits;
        }
        const double scaled =
            static_cast<double>(hits) * n_records_ / static_cast<double>(sample_.size());
        return clamp_estimate(scaled, n_records_);
    }

private:
    std::vector<std::vector<ElementId>> sample_;  // each sorted
    double n_records_ = 0.0;
};

}  // namespace ace
