#pragma once

// Benchmark engine and synthetic data: Zipf-distributed corpora with planted
// co-occurrence pairs, nearest-rank Q-error summaries, and per-estimator
// per-class benchmark reports serializable to JSON and CSV.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ace/common.hpp"
#include "ace/corpus.hpp"
#include "ace/queries.hpp"

namespace ace {

// ---------------------------------------------------------------------------
// Synthetic corpora

struct SynthSpec {
    std::size_t n_records = 50000;
    std::size_t n_elements = 2000;
    double zipf_exponent = 1.1;
    std::size_t n_pairs = 50;       // planted co-occurrence pairs
    double pair_co_prob = 1.0;      // P(second appears | first appears)
    double avg_set_size = 1.8;
};

// Element frequencies follow a Zipf law over the base universe. The last
// n_pairs element ids are reserved as pair partners: partner i tags along
// whenever base element i (one of the n_pairs most frequent) is drawn, with
// the configured probability. Record ids are 0..N-1.
inline Corpus synth_corpus(const SynthSpec& spec, Rng& rng) {
    if (spec.n_elements == 0 || spec.n_records == 0)
        throw GenerationInfeasible("synth: empty corpus requested");
    if (spec.n_pairs * 2 > spec.n_elements)
        throw GenerationInfeasible("synth: more pair elements than the universe holds");
    const std::size_t base = spec.n_elements - spec.n_pairs;
    if (spec.avg_set_size < 1.0 || spec.avg_set_size > static_cast<double>(base))
        throw GenerationInfeasible("synth: average set size out of range");
    if (spec.pair_co_prob < 0.0 || spec.pair_co_prob > 1.0)
        throw GenerationInfeasible("synth: co-occurrence probability out of range");

    Corpus c;
    for (std::size_t i = 0; i < spec.n_elements; ++i)
        c.universe().intern("e" + std::to_string(i));

    std::vector<double> cum(base);
    double total = 0.0;
    for (std::size_t k = 0; k < base; ++k) {
        total += std::pow(static_cast<double>(k + 1), -spec.zipf_exponent);
        cum[k] = total;
    }

    // Shifted geometric sizes: 1 + Geom(1/avg) has mean avg.
    const double p = 1.0 / spec.avg_set_size;
    const double log1mp = p < 1.0 ? std::log1p(-p) : 0.0;

    for (std::size_t i = 0; i < spec.n_records; ++i) {
        std::size_t size = 1;
        if (p < 1.0) {
            const double u = rng.uniform();
            size = 1 + static_cast<std::size_t>(std::log1p(-u) / log1mp);
        }
        size = std::min(size, base);

        std::vector<ElementId> elems;
        std::size_t attempts = 0;
        while (elems.size() < size) {
            if (++attempts > 1000 * size)
                throw GenerationInfeasible("synth: cannot draw distinct elements");
            const double u = rng.uniform() * total;
            const auto it = std::upper_bound(cum.begin(), cum.end(), u);
            const auto e = static_cast<ElementId>(it - cum.begin());
            if (std::find(elems.begin(), elems.end(), e) == elems.end()) elems.push_back(e);
        }
        const std::size_t drawn = elems.size();
        for (std::size_t j = 0; j < drawn; ++j) {
            const ElementId e = elems[j];
            if (e < spec.n_pairs && rng.uniform() < spec.pair_co_prob) {
                const auto partner = static_cast<ElementId>(base + e);
                if (std::find(elems.begin(), elems.end(), partner) == elems.end())
                    elems.push_back(partner);
            }
        }
        c.add_record(static_cast<std::int64_t>(i), std::move(elems));
    }
    return c;
}

// ---------------------------------------------------------------------------
// Summary statistics

// Nearest-rank percentile of an unsorted sample: the ceil(p/100 * n)-th
// smallest value.
inline double nearest_rank(std::vector<double> values, double percentile) {
    if (values.empty()) throw DomainError("nearest_rank: empty sample");
    if (percentile <= 0.0 || percentile > 100.0)
        throw DomainError("nearest_rank: percentile out of (0, 100]");
    std::sort(values.begin(), values.end());
    const auto n = static_cast<double>(values.size());
    const auto rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * n));
    return values[std::max<std::size_t>(rank, 1) - 1];
}

// ---------------------------------------------------------------------------
// Benchmarking

struct EstimatorEntry {
    std::string name;
    std::function<double(const SetQuery&)> estimate;
    std::size_t size_bytes = 0;
    double build_seconds = 0.0;
};

struct ClassStats {
    std::string label;  // "overall", "regular", "high", "low"
    std::size_t queries = 0;
    std::size_t failures = 0;
    double mean_q = 0.0;
    double p50 = 0.0;
    double p95 = 0.0;
    double p99 = 0.0;
    double avg_latency_ms = 0.0;
};

struct EstimatorReport {
    std::string name;
    std::size_t size_bytes = 0;
    double build_seconds = 0.0;
    std::vector<ClassStats> classes;
};

struct BenchReport {
    std::size_t n_records = 0;
    std::size_t n_queries = 0;
    std::vector<EstimatorReport> estimators;
};

namespace detail {

struct Measurement {
    double qerr = 0.0;
    double latency_ms = 0.0;
    bool failed = false;
};

inline ClassStats summarize(const std::string& label, const std::vector<Measurement>& rows) {
    ClassStats s;
    s.label = label;
    std::vector<double> qs;
    double lat = 0.0;
    for (const auto& r : rows) {
        ++s.queries;
        if (r.failed) {
            ++s.failures;
            continue;
        }
        qs.push_back(r.qerr);
        lat += r.latency_ms;
    }
    if (!qs.empty()) {
        double sum = 0.0;
        for (double q : qs) sum += q;
        s.mean_q = sum / static_cast<double>(qs.size());
        s.p50 = nearest_rank(qs, 50.0);
        s.p95 = nearest_rank(qs, 95.0);
        s.p99 = nearest_rank(qs, 99.0);
        s.avg_latency_ms = lat / static_cast<double>(qs.size());
    }
    return s;
}

}  // namespace detail

// Runs every estimator over the labeled workload. Latencies are warm,
// single-threaded wall-clock times measured after 10 discarded warm-up calls.
// A throwing estimator records a failure for that query and is excluded from
// that class's quantiles. measure_latency=false reports all latencies as zero
// so that repeated runs produce byte-identical reports.
inline BenchReport bench(const std::vector<EstimatorEntry>& estimators, const Workload& workload,
                         const Corpus& corpus, bool measure_latency = true) {
    if (workload.queries.empty()) throw DomainError("bench: empty workload");
    BenchReport report;
    report.n_records = corpus.size();
    report.n_queries = workload.queries.size();

    for (const auto& est : estimators) {
        EstimatorReport er;
        er.name = est.name;
        er.size_bytes = est.size_bytes;
        er.build_seconds = est.build_seconds;

        for (std::size_t w = 0; w < 10; ++w) {
            const auto& q = workload.queries[w % workload.queries.size()].query;
            try {
                est.estimate(q);
            } catch (...) {
            }
        }

        std::vector<detail::Measurement> all;
        std::map<FreqClass, std::vector<detail::Measurement>> by_class;
        all.reserve(workload.queries.size());
        for (const auto& lq : workload.queries) {
            detail::Measurement m;
            const auto start = std::chrono::steady_clock::now();
            try {
                const double estimate = est.estimate(lq.query);
                const auto stop = std::chrono::steady_clock::now();
                if (measure_latency)
                    m.latency_ms = std::chrono::duration<double, std::milli>(stop - start).count();
                m.qerr = qerror(estimate, lq.cardinality);
            } catch (...) {
                m.failed = true;
            }
            all.push_back(m);
            by_class[lq.cls].push_back(m);
        }

        er.classes.push_back(detail::summarize("overall", all));
        for (const auto& [cls, rows] : by_class)
            er.classes.push_back(detail::summarize(to_string(cls), rows));
        report.estimators.push_back(std::move(er));
    }
    return report;
}

// ---------------------------------------------------------------------------
// Report serialization

inline nlohmann::json report_to_json(const BenchReport& r) {
    nlohmann::json j;
    j["n_records"] = r.n_records;
    j["n_queries"] = r.n_queries;
    auto arr = nlohmann::json::array();
    for (const auto& er : r.estimators) {
        nlohmann::json je;
        je["name"] = er.name;
        je["size_bytes"] = er.size_bytes;
        je["build_seconds"] = er.build_seconds;
        auto classes = nlohmann::json::array();
        for (const auto& cs : er.classes) {
            nlohmann::json jc;
            jc["class"] = cs.label;
            jc["queries"] = cs.queries;
            jc["failures"] = cs.failures;
            jc["mean_q"] = cs.mean_q;
            jc["p50"] = cs.p50;
            jc["p95"] = cs.p95;
            jc["p99"] = cs.p99;
            jc["avg_latency_ms"] = cs.avg_latency_ms;
            classes.push_back(std::move(jc));
        }
        je["classes"] = std::move(classes);
        arr.push_back(std::move(je));
    }
    j["estimators"] = std::move(arr);
    return j;
}

namespace detail {

inline std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

// One row per estimator x class; numeric formatting matches the JSON values
// digit for digit.
inline std::string report_to_csv(const BenchReport& r) {
    std::string out =
        "estimator,class,queries,failures,mean_q,p50,p95,p99,avg_latency_ms,"
        "size_bytes,build_seconds\n";
    for (const auto& er : r.estimators) {
        for (const auto& cs : er.classes) {
            out += er.name + "," + cs.label + "," + std::to_string(cs.queries) + "," +
                   std::to_string(cs.failures) + "," + detail::num(cs.mean_q) + "," +
                   detail::num(cs.p50) + "," + detail::num(cs.p95) + "," + detail::num(cs.p99) +
                   "," + detail::num(cs.avg_latency_ms) + "," + std::to_string(er.size_bytes) +
                   "," + detail::num(er.build_seconds) + "\n";
        }
    }
    return out;
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for write: " + path);
    os << content;
    if (!os) throw IoError("write failed: " + path);
}

}  // namespace ace
