#pragma once

// Shared corpus fixtures for the unit and acceptance suites.

#include <string>
#include <vector>

#include "ace/common.hpp"
#include "ace/corpus.hpp"

namespace ace::testing {

// Seven short social posts. Frequencies: "Trump" appears in 4 records and
// "Harris" in 2, which pins down the hand-computed estimator examples.
inline Corpus micro_corpus() {
    const std::vector<std::vector<std::string>> posts = {
        {"Trump", "shot"},
        {"Spain", "Euros", "Yamal"},
        {"Biden", "Harris", "Trump"},
        {"Harris", "Trump", "debate"},
        {"JD Vance", "Trump"},
        {"Messi", "Yamal"},
        {"Messi", "Argentina", "Copa America"},
    };
    Corpus c;
    std::int64_t id = 1;
    for (const auto& post : posts) {
        std::vector<ElementId> elems;
        for (const auto& name : post) elems.push_back(c.universe().intern(name));
        c.add_record(id++, std::move(elems));
    }
    return c;
}

// Small random corpus: n records of 1..max_size elements over m names.
inline Corpus random_corpus(Rng& rng, std::size_t n, std::size_t m, std::size_t max_size = 5) {
    Corpus c;
    for (std::size_t i = 0; i < m; ++i) c.universe().intern("e" + std::to_string(i));
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t sz = 1 + rng.uniform_index(max_size);
        std::vector<ElementId> elems;
        for (std::size_t j = 0; j < sz; ++j)
            elems.push_back(static_cast<ElementId>(rng.uniform_index(m)));
        c.add_record(static_cast<std::int64_t>(i), std::move(elems));
    }
    return c;
}

}  // namespace ace::testing
