#pragma once

// Set queries over a corpus: exact evaluation through the inverted index,
// q-error, workload generation, and workload JSONL serialization.
//
// Semantics, for query literal Q and record R:
//   superset: count records with R >= Q (R contains every query element)
//   subset:   count records with R <= Q (every record element is in Q)
//   overlap:  count records with R and Q sharing at least one element

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "ace/common.hpp"
#include "ace/corpus.hpp"

namespace ace {

enum class Op { Subset, Superset, Overlap };

inline const char* to_string(Op op) {
    switch (op) {
        case Op::Subset: return "subset";
        case Op::Superset: return "superset";
        default: return "overlap";
    }
}

inline Op op_from_string(const std::string& s) {
    if (s == "subset") return Op::Subset;
    if (s == "superset") return Op::Superset;
    if (s == "overlap") return Op::Overlap;
    throw ParseError("unknown query op: " + s);
}

struct SetQuery {
    Op op = Op::Overlap;
    std::vector<ElementId> elements;  // sorted, unique

    static SetQuery make(Op op, std::vector<ElementId> elems) {
        if (elems.empty()) throw DomainError("query literal must not be empty");
        std::sort(elems.begin(), elems.end());
        elems.erase(std::unique(elems.begin(), elems.end()), elems.end());
        return SetQuery{op, std::move(elems)};
    }
};

struct LabeledQuery {
    SetQuery query;
    double cardinality = 0.0;
    FreqClass cls = FreqClass::Regular;  // generation class of the literal
};

struct Workload {
    std::vector<LabeledQuery> queries;
};

// ---------------------------------------------------------------------------
// Exact evaluation

namespace detail {

inline std::size_t count_superset(const Corpus& c, const SetQuery& q) {
    // Intersect postings, shortest list first.
    std::vector<const std::vector<std::uint32_t>*> lists;
    lists.reserve(q.elements.size());
    for (ElementId e : q.elements) {
        const auto& p = c.postings(e);
        if (p.empty()) return 0;
        lists.push_back(&p);
    }
    std::stable_sort(lists.begin(), lists.end(),
                     [](const auto* a, const auto* b) { return a->size() < b->size(); });
    std::vector<std::uint32_t> acc(*lists[0]);
    for (std::size_t i = 1; i < lists.size() && !acc.empty(); ++i) {
        std::vector<std::uint32_t> next;
        next.reserve(acc.size());
        std::set_intersection(acc.begin(), acc.end(), lists[i]->begin(), lists[i]->end(),
                              std::back_inserter(next));
        acc.swap(next);
    }
    return acc.size();
}

inline std::size_t count_overlap(const Corpus& c, const SetQuery& q) {
    if (q.elements.size() == 1) return c.postings(q.elements[0]).size();
    std::unordered_set<std::uint32_t> seen;
    for (ElementId e : q.elements) {
        const auto& p = c.postings(e);
        seen.insert(p.begin(), p.end());
    }
    return seen.size();
}

inline std::size_t count_subset(const Corpus& c, const SetQuery& q) {
    // A record inside the literal must contain only query elements, so it is
    // reachable through the postings of its own members; the union of query
    // postings covers all candidates.
    std::unordered_set<ElementId> literal(q.elements.begin(), q.elements.end());
    std::unordered_set<std::uint32_t> seen;
    std::size_t count = 0;
    for (ElementId e : q.elements) {
        for (std::uint32_t pos : c.postings(e)) {
            if (!seen.insert(pos).second) continue;
            const auto& elems = c.record(pos).elements;
            bool inside = true;
            for (ElementId re : elems) {
                if (!literal.count(re)) {
                    inside = false;
                    break;
                }
            }
            if (inside) ++count;
        }
    }
    return count;
}

}  // namespace detail

inline std::size_t evaluate_exact(const Corpus& c, const SetQuery& q) {
    switch (q.op) {
        case Op::Superset: return detail::count_superset(c, q);
        case Op::Subset: return detail::count_subset(c, q);
        default: return detail::count_overlap(c, q);
    }
}

// q-error: max(1, est/truth, truth/est). Both inputs must be positive.
inline double qerror(double estimate, double truth) {
    if (!(estimate > 0.0) || !(truth > 0.0))
        throw DomainError("qerror requires positive estimate and truth");
    return std::max({1.0, estimate / truth, truth / estimate});
}

// ---------------------------------------------------------------------------
// Workload generation

// Class constraint for generated literals. Regular leaves literals
// unconstrained; High/Low restrict literal elements to that frequency class.
struct GenLimits {
    std::size_t max_attempts = 10000;
};

namespace detail {

inline bool class_ok(const Corpus& c, ElementId e, FreqClass want) {
    return c.element_class(e) == want;
}

template <typename FilterFn>
inline std::vector<ElementId> filter_elements(const std::vector<ElementId>& in, FilterFn&& keep) {
    std::vector<ElementId> out;
    out.reserve(in.size());
    for (ElementId e : in)
        if (keep(e)) out.push_back(e);
    return out;
}

inline std::uint32_t nth_live_position(const Corpus& c, Rng& rng) {
    if (c.size() == 0) throw GenerationInfeasible("corpus has no live records");
    while (true) {
        const std::size_t pos = rng.uniform_index(c.position_count());
        if (c.live(pos)) return static_cast<std::uint32_t>(pos);
    }
}

}  // namespace detail

// Subset literals come from the union of 5 to 10 uniformly drawn records;
// class-constrained variants keep only elements of that class. Retries until
// the literal is non-empty and matches at least one record.
inline LabeledQuery gen_subset(const Corpus& c, Rng& rng, FreqClass cls = FreqClass::Regular,
                               const GenLimits& limits = {}) {
    if (c.size() < 5) throw GenerationInfeasible("subset generation needs at least 5 records");
    for (std::size_t attempt = 0; attempt < limits.max_attempts; ++attempt) {
        const std::size_t k = static_cast<std::size_t>(rng.uniform_int(5, 10));
        std::vector<ElementId> pool;
        std::unordered_set<std::uint32_t> picked;
        while (picked.size() < std::min(k, c.size())) {
            picked.insert(detail::nth_live_position(c, rng));
        }
        for (std::uint32_t pos : picked) {
            const auto& elems = c.record(pos).elements;
            pool.insert(pool.end(), elems.begin(), elems.end());
        }
        if (cls != FreqClass::Regular)
            pool = detail::filter_elements(pool, [&](ElementId e) { return detail::class_ok(c, e, cls); });
        if (pool.empty()) continue;
        SetQuery q = SetQuery::make(Op::Subset, std::move(pool));
        const std::size_t card = evaluate_exact(c, q);
        if (card == 0) continue;
        return LabeledQuery{std::move(q), static_cast<double>(card), cls};
    }
    throw GenerationInfeasible(std::string("could not generate a feasible ") + to_string(cls) +
                               " subset query");
}

// Superset and overlap literals draw 2 to 4 distinct elements from one
// uniformly drawn record (class-filtered first when constrained).
inline LabeledQuery gen_from_record(const Corpus& c, Op op, Rng& rng,
                                    FreqClass cls = FreqClass::Regular,
                                    const GenLimits& limits = {}) {
    if (op == Op::Subset) throw DomainError("gen_from_record handles superset and overlap only");
    if (c.size() == 0) throw GenerationInfeasible("corpus has no live records");
    // Anchor records are drawn uniformly among those with at least two
    // literal-eligible elements. Conditioning the draw up front keeps rare
    // classes from exhausting the attempt budget on records that can never
    // qualify; the accepted-record distribution is the same either way.
    std::vector<std::uint32_t> anchors;
    for (std::size_t pos = 0; pos < c.position_count(); ++pos) {
        if (!c.live(pos)) continue;
        const auto& elems = c.record(pos).elements;
        std::size_t usable = 0;
        if (cls == FreqClass::Regular) {
            usable = elems.size();
        } else {
            for (ElementId e : elems)
                if (detail::class_ok(c, e, cls)) ++usable;
        }
        if (usable >= 2) anchors.push_back(static_cast<std::uint32_t>(pos));
    }
    if (anchors.empty())
        throw GenerationInfeasible(std::string("no record can anchor a ") + to_string(cls) +
                                   " " + to_string(op) + " query");
    for (std::size_t attempt = 0; attempt < limits.max_attempts; ++attempt) {
        const std::uint32_t pos = anchors[rng.uniform_index(anchors.size())];
        std::vector<ElementId> elems = c.record(pos).elements;
        if (cls != FreqClass::Regular)
            elems = detail::filter_elements(elems, [&](ElementId e) { return detail::class_ok(c, e, cls); });
        if (elems.size() < 2) continue;
        const std::size_t m =
            std::min(static_cast<std::size_t>(rng.uniform_int(2, 4)), elems.size());
        std::vector<ElementId> chosen;
        chosen.reserve(m);
        for (std::size_t i : rng.sample_without_replacement(elems.size(), m))
            chosen.push_back(elems[i]);
        SetQuery q = SetQuery::make(op, std::move(chosen));
        const std::size_t card = evaluate_exact(c, q);
        if (card == 0) continue;
        return LabeledQuery{std::move(q), static_cast<double>(card), cls};
    }
    throw GenerationInfeasible(std::string("could not generate a feasible ") + to_string(cls) +
                               " " + to_string(op) + " query");
}

inline LabeledQuery gen_query(const Corpus& c, Op op, Rng& rng,
                              FreqClass cls = FreqClass::Regular, const GenLimits& limits = {}) {
    return op == Op::Subset ? gen_subset(c, rng, cls, limits) : gen_from_record(c, op, rng, cls, limits);
}

// regular : high-frequency : low-frequency mix of a generated workload.
struct ClassRatios {
    std::size_t regular = 3;
    std::size_t high = 2;
    std::size_t low = 2;
};

// Generates n queries of one operator with the requested class mix (counts
// rounded down for the constrained classes, remainder regular). A class with
// no matching elements in the corpus falls back to regular with a warning.
inline Workload gen_workload(const Corpus& c, Op op, std::size_t n, ClassRatios ratios, Rng& rng,
                             const GenLimits& limits = {}) {
    const std::size_t total = ratios.regular + ratios.high + ratios.low;
    if (total == 0) throw DomainError("gen_workload: all class ratios are zero");
    std::size_t high = n * ratios.high / total;
    std::size_t low = n * ratios.low / total;
    bool has_high = false, has_low = false;
    for (std::size_t e = 0; e < c.universe().size(); ++e) {
        const auto id = static_cast<ElementId>(e);
        if (c.freq(id) == 0) continue;
        has_high = has_high || c.element_class(id) == FreqClass::High;
        has_low = has_low || c.element_class(id) == FreqClass::Low;
    }
    if (high > 0 && !has_high) {
        std::fprintf(stderr, "warning: no high-frequency elements, generating as regular\n");
        high = 0;
    }
    if (low > 0 && !has_low) {
        std::fprintf(stderr, "warning: no low-frequency elements, generating as regular\n");
        low = 0;
    }
    const std::size_t regular = n - high - low;
    Workload w;
    w.queries.reserve(n);
    for (std::size_t i = 0; i < regular; ++i)
        w.queries.push_back(gen_query(c, op, rng, FreqClass::Regular, limits));
    for (std::size_t i = 0; i < high; ++i)
        w.queries.push_back(gen_query(c, op, rng, FreqClass::High, limits));
    for (std::size_t i = 0; i < low; ++i)
        w.queries.push_back(gen_query(c, op, rng, FreqClass::Low, limits));
    rng.shuffle(w.queries);
    return w;
}

inline Workload gen_workload(const Corpus& c, Op op, std::size_t n, Rng& rng,
                             const GenLimits& limits = {}) {
    return gen_workload(c, op, n, ClassRatios{}, rng, limits);
}

// ---------------------------------------------------------------------------
// Workload JSONL: {"op":..., "elements":[...], "cardinality":..., "class":...}

inline void write_workload_jsonl(const std::string& path, const Corpus& c, const Workload& w) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for write: " + path);
    for (const auto& lq : w.queries) {
        nlohmann::json j;
        j["op"] = to_string(lq.query.op);
        auto arr = nlohmann::json::array();
        for (ElementId e : lq.query.elements) arr.push_back(c.universe().name_of(e));
        j["elements"] = std::move(arr);
        j["cardinality"] = static_cast<std::int64_t>(lq.cardinality);
        j["class"] = to_string(lq.cls);
        os << j.dump() << "\n";
    }
    if (!os) throw IoError("write failed: " + path);
}

inline Workload read_workload_jsonl(const std::string& path, const Corpus& c) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open workload: " + path);
    Workload w;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto j = detail::parse_jsonl_line(line, path, line_no);
        const std::string where = path + ":" + std::to_string(line_no);
        for (const char* key : {"op", "elements", "cardinality", "class"})
            if (!j.contains(key)) throw ParseError(where + ": missing field " + key);
        if (!j["elements"].is_array() || j["elements"].empty())
            throw ParseError(where + ": elements must be a non-empty array");
        if (!j["cardinality"].is_number())
            throw ParseError(where + ": cardinality must be a number");
        std::vector<ElementId> elems;
        elems.reserve(j["elements"].size());
        for (const auto& e : j["elements"]) {
            if (!e.is_string()) throw ParseError(where + ": elements must be strings");
            elems.push_back(c.universe().id_of(e.get<std::string>()));
        }
        LabeledQuery lq;
        lq.query = SetQuery::make(op_from_string(j["op"].get<std::string>()), std::move(elems));
        lq.cardinality = j["cardinality"].get<double>();
        lq.cls = freq_class_from_string(j["class"].get<std::string>());
        w.queries.push_back(std::move(lq));
    }
    return w;
}

}  // namespace ace
