#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "ace/harness.hpp"
#include "support/naive_oracle.hpp"

using namespace ace;

TEST_CASE("nearest-rank quantiles on the worked sample") {
    // Oracle by hand for [1, 1, 2, 4]: ranks are ceil(p/100 * 4), so
    // p50 -> rank 2 -> 1, p95 -> rank 4 -> 4, p99 -> rank 4 -> 4,
    // and the mean is (1 + 1 + 2 + 4) / 4 = 2.
    std::vector<double> qs = {1.0, 1.0, 2.0, 4.0};
    double mean = 0.0;
    for (double q : qs) mean += q;
    mean /= static_cast<double>(qs.size());

    REQUIRE(mean == 2.0);
    REQUIRE(nearest_rank(qs, 50.0) == 1.0);
    REQUIRE(nearest_rank(qs, 95.0) == 4.0);
    REQUIRE(nearest_rank(qs, 99.0) == 4.0);
}

TEST_CASE("nearest-rank quantiles: edges and validation") {
    std::vector<double> one = {7.0};
    REQUIRE(nearest_rank(one, 50.0) == 7.0);
    REQUIRE(nearest_rank(one, 100.0) == 7.0);

    std::vector<double> unsorted = {4.0, 1.0, 2.0, 1.0};
    REQUIRE(nearest_rank(unsorted, 50.0) == 1.0);

    REQUIRE_THROWS_AS(nearest_rank({}, 50.0), DomainError);
    REQUIRE_THROWS_AS(nearest_rank(one, 0.0), DomainError);
    REQUIRE_THROWS_AS(nearest_rank(one, 101.0), DomainError);
}

TEST_CASE("synthetic corpus honors the record count exactly") {
    SynthSpec spec;
    spec.n_records = 1234;
    spec.n_elements = 100;
    spec.n_pairs = 5;
    Rng rng(9);
    Corpus c = synth_corpus(spec, rng);
    REQUIRE(c.size() == 1234);
    REQUIRE(c.universe().size() == 100);
    for (std::size_t pos = 0; pos < c.position_count(); ++pos) {
        REQUIRE(c.live(pos));
        REQUIRE_FALSE(c.record(pos).elements.empty());
    }
}

TEST_CASE("planted pair with co-occurrence probability 1 is inseparable") {
    SynthSpec spec;
    spec.n_records = 4000;
    spec.n_elements = 200;
    spec.zipf_exponent = 1.1;
    spec.n_pairs = 10;
    spec.pair_co_prob = 1.0;
    spec.avg_set_size = 2.0;
    Rng rng(17);
    Corpus c = synth_corpus(spec, rng);

    const std::size_t base = spec.n_elements - spec.n_pairs;
    for (std::size_t i = 0; i < spec.n_pairs; ++i) {
        const auto first = static_cast<ElementId>(i);
        const auto second = static_cast<ElementId>(base + i);
        REQUIRE(c.freq(first) > 0);
        REQUIRE(c.freq(second) == c.freq(first));

        // The partner never appears alone, so querying for both together
        // matches exactly the records that contain the first element.
        const auto both = SetQuery::make(Op::Overlap, {first, second});
        const auto alone = SetQuery::make(Op::Overlap, {first});
        REQUIRE(evaluate_exact(c, both) == evaluate_exact(c, alone));
        REQUIRE(evaluate_exact(c, both) == ace::testing::naive_count(c, both));
    }
}

TEST_CASE("zipf exponent zero gives near-uniform frequencies") {
    SynthSpec spec;
    spec.n_records = 50000;
    spec.n_elements = 2000;
    spec.zipf_exponent = 0.0;
    spec.n_pairs = 0;
    spec.avg_set_size = 1.8;
    Rng rng(3);
    Corpus c = synth_corpus(spec, rng);

    std::size_t lo = c.size(), hi = 0;
    for (std::size_t e = 0; e < spec.n_elements; ++e) {
        const std::size_t f = c.freq(static_cast<ElementId>(e));
        lo = std::min(lo, f);
        hi = std::max(hi, f);
    }
    REQUIRE(lo > 0);
    REQUIRE(static_cast<double>(hi) / static_cast<double>(lo) < 3.0);
}

TEST_CASE("zipf exponent skews frequencies toward low ranks") {
    SynthSpec spec;
    spec.n_records = 20000;
    spec.n_elements = 500;
    spec.zipf_exponent = 1.1;
    spec.n_pairs = 0;
    Rng rng(4);
    Corpus c = synth_corpus(spec, rng);
    REQUIRE(c.freq(0) > 20 * c.freq(400));
}

TEST_CASE("infeasible synth specs are rejected") {
    Rng rng(1);
    SynthSpec empty;
    empty.n_records = 0;
    REQUIRE_THROWS_AS(synth_corpus(empty, rng), GenerationInfeasible);

    SynthSpec pairs;
    pairs.n_elements = 10;
    pairs.n_pairs = 6;
    REQUIRE_THROWS_AS(synth_corpus(pairs, rng), GenerationInfeasible);

    SynthSpec big_sets;
    big_sets.n_elements = 10;
    big_sets.n_pairs = 2;
    big_sets.avg_set_size = 9.5;  // exceeds the 8 base elements
    REQUIRE_THROWS_AS(synth_corpus(big_sets, rng), GenerationInfeasible);

    SynthSpec bad_prob;
    bad_prob.pair_co_prob = 1.5;
    REQUIRE_THROWS_AS(synth_corpus(bad_prob, rng), GenerationInfeasible);
}

namespace {

Workload tiny_workload(const Corpus& c) {
    Workload w;
    Rng rng(11);
    for (int i = 0; i < 12; ++i) w.queries.push_back(gen_query(c, Op::Overlap, rng));
    return w;
}

}  // namespace

TEST_CASE("bench scores the exact oracle at q-error 1") {
    SynthSpec spec;
    spec.n_records = 500;
    spec.n_elements = 60;
    spec.n_pairs = 4;
    Rng rng(5);
    Corpus c = synth_corpus(spec, rng);
    Workload w = tiny_workload(c);

    EstimatorEntry oracle{"oracle",
                          [&](const SetQuery& q) {
                              return static_cast<double>(evaluate_exact(c, q));
                          },
                          0, 0.0};
    BenchReport r = bench({oracle}, w, c);

    REQUIRE(r.n_records == c.size());
    REQUIRE(r.n_queries == w.queries.size());
    REQUIRE(r.estimators.size() == 1);
    const auto& overall = r.estimators[0].classes.at(0);
    REQUIRE(overall.label == "overall");
    REQUIRE(overall.queries == w.queries.size());
    REQUIRE(overall.failures == 0);
    REQUIRE(overall.mean_q == 1.0);
    REQUIRE(overall.p50 == 1.0);
    REQUIRE(overall.p99 == 1.0);
    REQUIRE(overall.avg_latency_ms >= 0.0);
}

TEST_CASE("bench counts estimator failures and excludes them from quantiles") {
    SynthSpec spec;
    spec.n_records = 300;
    spec.n_elements = 40;
    spec.n_pairs = 0;
    Rng rng(6);
    Corpus c = synth_corpus(spec, rng);
    Workload w = tiny_workload(c);

    int calls = 0;
    EstimatorEntry flaky{"flaky",
                         [&](const SetQuery& q) -> double {
                             ++calls;
                             if (calls % 3 == 0) throw std::runtime_error("boom");
                             return static_cast<double>(evaluate_exact(c, q));
                         },
                         0, 0.0};
    BenchReport r = bench({flaky}, w, c);

    const auto& overall = r.estimators[0].classes.at(0);
    REQUIRE(overall.queries == w.queries.size());
    REQUIRE(overall.failures > 0);
    REQUIRE(overall.failures < w.queries.size());
    // Successes all hit the oracle, so quantiles ignore the failed calls.
    REQUIRE(overall.mean_q == 1.0);
    REQUIRE(overall.p99 == 1.0);

    std::size_t class_failures = 0;
    for (std::size_t i = 1; i < r.estimators[0].classes.size(); ++i)
        class_failures += r.estimators[0].classes[i].failures;
    REQUIRE(class_failures == overall.failures);
}

TEST_CASE("bench rejects an empty workload") {
    SynthSpec spec;
    spec.n_records = 50;
    spec.n_elements = 20;
    spec.n_pairs = 0;
    Rng rng(7);
    Corpus c = synth_corpus(spec, rng);
    REQUIRE_THROWS_AS(bench({}, Workload{}, c), DomainError);
}

namespace {

std::vector<double> csv_numbers(const std::string& csv) {
    std::vector<double> out;
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);  // header
    while (std::getline(lines, line)) {
        std::istringstream fields(line);
        std::string field;
        int col = 0;
        while (std::getline(fields, field, ',')) {
            if (col >= 4 && col <= 8) out.push_back(std::strtod(field.c_str(), nullptr));
            ++col;
        }
    }
    return out;
}

}  // namespace

TEST_CASE("JSON and CSV reports carry identical numbers") {
    SynthSpec spec;
    spec.n_records = 400;
    spec.n_elements = 50;
    spec.n_pairs = 3;
    Rng rng(8);
    Corpus c = synth_corpus(spec, rng);
    Workload w = tiny_workload(c);

    Rng noise(21);
    EstimatorEntry jitter{"jitter",
                          [&](const SetQuery& q) {
                              const auto t = static_cast<double>(evaluate_exact(c, q));
                              return std::max(1.0, t * (1.0 + noise.uniform()));
                          },
                          4096, 0.125};
    BenchReport r = bench({jitter}, w, c);

    const nlohmann::json j = report_to_json(r);
    const std::string csv = report_to_csv(r);

    // Round-trip the JSON through text to make sure nothing is lost.
    const nlohmann::json j2 = nlohmann::json::parse(j.dump());
    REQUIRE(j2 == j);

    std::vector<double> from_json;
    for (const auto& je : j2.at("estimators"))
        for (const auto& jc : je.at("classes")) {
            from_json.push_back(jc.at("mean_q").get<double>());
            from_json.push_back(jc.at("p50").get<double>());
            from_json.push_back(jc.at("p95").get<double>());
            from_json.push_back(jc.at("p99").get<double>());
            from_json.push_back(jc.at("avg_latency_ms").get<double>());
        }
    const std::vector<double> from_csv = csv_numbers(csv);

    REQUIRE(from_json.size() == from_csv.size());
    REQUIRE(!from_json.empty());
    for (std::size_t i = 0; i < from_json.size(); ++i) REQUIRE(from_json[i] == from_csv[i]);

    REQUIRE(j2.at("estimators").at(0).at("size_bytes").get<std::size_t>() == 4096);
    REQUIRE(j2.at("estimators").at(0).at("build_seconds").get<double>() == 0.125);
    REQUIRE(csv.find("jitter,overall,") != std::string::npos);
}

TEST_CASE("bench report covers every frequency class present in the workload") {
    SynthSpec spec;
    spec.n_records = 50000;
    spec.n_elements = 2000;
    spec.n_pairs = 20;
    Rng rng(10);
    Corpus c = synth_corpus(spec, rng);

    Workload w = gen_workload(c, Op::Overlap, 30, {3, 2, 2}, rng);
    EstimatorEntry one{"one", [](const SetQuery&) { return 1.0; }, 0, 0.0};
    BenchReport r = bench({one}, w, c);

    std::map<std::string, std::size_t> counts;
    for (const auto& cs : r.estimators[0].classes) counts[cs.label] = cs.queries;
    REQUIRE(counts.at("overall") == 30);
    REQUIRE(counts.count("regular") == 1);
    REQUIRE(counts.count("high") == 1);
    REQUIRE(counts.count("low") == 1);
    REQUIRE(counts.at("regular") + counts.at("high") + counts.at("low") == 30);
}
