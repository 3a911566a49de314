#pragma once

// Reference cardinality computation by naive per-record scan, kept free of
// the inverted-index machinery so the two paths can check each other.

#include <unordered_set>

#include "ace/corpus.hpp"
#include "ace/queries.hpp"

namespace ace::testing {

inline std::size_t naive_count(const Corpus& c, const SetQuery& q) {
    std::unordered_set<ElementId> literal(q.elements.begin(), q.elements.end());
    std::size_t count = 0;
    for (std::size_t pos = 0; pos < c.position_count(); ++pos) {
        if (!c.live(pos)) continue;
        const auto& elems = c.record(pos).elements;
        bool match = false;
        switch (q.op) {
            case Op::Superset: {
                std::size_t found = 0;
                for (ElementId e : elems) found += literal.count(e);
                match = found == literal.size();
                break;
            }
            case Op::Subset: {
                match = true;
                for (ElementId e : elems)
                    if (!literal.count(e)) match = false;
                break;
            }
            case Op::Overlap: {
                for (ElementId e : elems)
                    if (literal.count(e)) match = true;
                break;
            }
        }
        if (match) ++count;
    }
    return count;
}

}  // namespace ace::testing
