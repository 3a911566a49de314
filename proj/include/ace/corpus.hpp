#pragma once

// Set-valued record store: string element universe, append-only record slots
// with a live mask (so deletions keep slice positions stable), and an inverted
// index that always reflects live records only.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "ace/common.hpp"

namespace ace {

using ElementId = std::uint32_t;

enum class FreqClass { Low, Regular, High };

inline const char* to_string(FreqClass c) {
    switch (c) {
        case FreqClass::Low: return "low";
        case FreqClass::High: return "high";
        default: return "regular";
    }
}

inline FreqClass freq_class_from_string(const std::string& s) {
    if (s == "low") return FreqClass::Low;
    if (s == "high") return FreqClass::High;
    if (s == "regular") return FreqClass::Regular;
    throw ParseError("unknown frequency class: " + s);
}

// Low: frequency at most 0.01% of live records. High: at least 0.1%.
inline FreqClass frequency_class(std::size_t freq, std::size_t n_records) {
    if (n_records == 0) return FreqClass::Low;
    const double ratio = static_cast<double>(freq) / static_cast<double>(n_records);
    if (ratio <= 0.0001) return FreqClass::Low;
    if (ratio >= 0.001) return FreqClass::High;
    return FreqClass::Regular;
}

class ElementUniverse {
public:
    ElementId intern(const std::string& name) {
        auto it = ids_.find(name);
        if (it != ids_.end()) return it->second;
        const ElementId id = static_cast<ElementId>(names_.size());
        names_.push_back(name);
        ids_.emplace(name, id);
        return id;
    }

    ElementId id_of(const std::string& name) const {
        auto it = ids_.find(name);
        if (it == ids_.end()) throw UnknownElement(name);
        return it->second;
    }

    std::optional<ElementId> try_id_of(const std::string& name) const {
        auto it = ids_.find(name);
        if (it == ids_.end()) return std::nullopt;
        return it->second;
    }

    const std::string& name_of(ElementId id) const {
        if (id >= names_.size()) throw DomainError("element id out of range");
        return names_[id];
    }

    std::size_t size() const { return names_.size(); }

private:
    std::vector<std::string> names_;
    std::unordered_map<std::string, ElementId> ids_;
};

struct SetRecord {
    std::int64_t id = 0;
    std::vector<ElementId> elements;  // sorted, unique
};

class Corpus {
public:
    ElementUniverse& universe() { return universe_; }
    const ElementUniverse& universe() const { return universe_; }

    std::size_t size() const { return live_count_; }          // live records
    std::size_t position_count() const { return records_.size(); }  // incl. dead slots

    bool live(std::size_t pos) const { return live_[pos]; }
    const SetRecord& record(std::size_t pos) const { return records_[pos]; }

    std::size_t freq(ElementId e) const {
        return e < postings_.size() ? postings_[e].size() : 0;
    }

    static const std::vector<std::uint32_t>& empty_postings() {
        static const std::vector<std::uint32_t> none;
        return none;
    }

    // Ascending live record positions containing e.
    const std::vector<std::uint32_t>& postings(ElementId e) const {
        return e < postings_.size() ? postings_[e] : empty_postings();
    }

    FreqClass element_class(ElementId e) const { return frequency_class(freq(e), size()); }

    std::optional<std::size_t> position_of(std::int64_t record_id) const {
        auto it = by_id_.find(record_id);
        if (it == by_id_.end()) return std::nullopt;
        return it->second;
    }

    // Appends a record; elements are deduplicated and sorted. Rejects empty
    // element lists and duplicate record ids.
    std::size_t add_record(std::int64_t record_id, std::vector<ElementId> elements) {
        if (elements.empty()) throw DomainError("record " + std::to_string(record_id) + " has no elements");
        if (by_id_.count(record_id))
            throw DomainError("duplicate record id: " + std::to_string(record_id));
        std::sort(elements.begin(), elements.end());
        elements.erase(std::unique(elements.begin(), elements.end()), elements.end());
        const std::size_t pos = records_.size();
        for (ElementId e : elements) {
            if (e >= postings_.size()) postings_.resize(e + 1);
            postings_[e].push_back(static_cast<std::uint32_t>(pos));
        }
        records_.push_back(SetRecord{record_id, std::move(elements)});
        live_.push_back(true);
        by_id_.emplace(record_id, pos);
        ++live_count_;
        return pos;
    }

    // Marks a record dead and removes it from the inverted index. The slot
    // stays so existing slice position lists remain valid.
    void remove_record(std::int64_t record_id) {
        auto it = by_id_.find(record_id);
        if (it == by_id_.end())
            throw DomainError("cannot delete unknown record id: " + std::to_string(record_id));
        const std::size_t pos = it->second;
        if (!live_[pos]) throw DomainError("record already deleted: " + std::to_string(record_id));
        live_[pos] = false;
        --live_count_;
        by_id_.erase(it);
        const auto upos = static_cast<std::uint32_t>(pos);
        for (ElementId e : records_[pos].elements) {
            auto& plist = postings_[e];
            auto hit = std::lower_bound(plist.begin(), plist.end(), upos);
            if (hit != plist.end() && *hit == upos) plist.erase(hit);
        }
    }

private:
    ElementUniverse universe_;
    std::vector<SetRecord> records_;
    std::vector<bool> live_;
    std::vector<std::vector<std::uint32_t>> postings_;
    std::unordered_map<std::int64_t, std::size_t> by_id_;
    std::size_t live_count_ = 0;
};

// Element frequencies snapshotted for estimation, so predictions depend only
// on compact artifacts rather than the record store.
struct FrequencyTable {
    std::vector<double> freq;  // indexed by element id
    double n_records = 0.0;

    static FrequencyTable from_corpus(const Corpus& c) {
        FrequencyTable t;
        t.n_records = static_cast<double>(c.size());
        t.freq.resize(c.universe().size());
        for (ElementId e = 0; e < t.freq.size(); ++e)
            t.freq[e] = static_cast<double>(c.freq(e));
        return t;
    }
};

struct IngestResult {
    Corpus corpus;
    std::size_t records = 0;
    std::size_t distinct_elements = 0;
};

namespace detail {

inline nlohmann::json parse_jsonl_line(const std::string& line, const std::string& path,
                                       std::size_t line_no) {
    try {
        return nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
}

}  // namespace detail

// Reads a dataset of lines {"id": <int>, "elements": ["a", ...]}.
inline IngestResult ingest_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open dataset: " + path);
    IngestResult res;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto j = detail::parse_jsonl_line(line, path, line_no);
        const std::string where = path + ":" + std::to_string(line_no);
        if (!j.is_object() || !j.contains("id") || !j.contains("elements"))
            throw ParseError(where + ": expected an object with id and elements");
        if (!j["id"].is_number_integer())
            throw ParseError(where + ": id must be an integer");
        if (!j["elements"].is_array() || j["elements"].empty())
            throw ParseError(where + ": elements must be a non-empty array");
        std::vector<ElementId> elems;
        elems.reserve(j["elements"].size());
        for (const auto& e : j["elements"]) {
            if (!e.is_string() || e.get<std::string>().empty())
                throw ParseError(where + ": elements must be non-empty strings");
            elems.push_back(res.corpus.universe().intern(e.get<std::string>()));
        }
        try {
            res.corpus.add_record(j["id"].get<std::int64_t>(), std::move(elems));
        } catch (const DomainError& e) {
            throw ParseError(where + ": " + e.what());
        }
    }
    res.records = res.corpus.size();
    res.distinct_elements = res.corpus.universe().size();
    return res;
}

inline void write_corpus_jsonl(const std::string& path, const Corpus& c) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for write: " + path);
    for (std::size_t pos = 0; pos < c.position_count(); ++pos) {
        if (!c.live(pos)) continue;
        const SetRecord& r = c.record(pos);
        nlohmann::json j;
        j["id"] = r.id;
        auto arr = nlohmann::json::array();
        for (ElementId e : r.elements) arr.push_back(c.universe().name_of(e));
        j["elements"] = std::move(arr);
        os << j.dump() << "\n";
    }
    if (!os) throw IoError("write failed: " + path);
}

// Partitions live records, in insertion order, into batches of at most
// batch_size positions. The final slice may be short.
struct SlicePlan {
    std::vector<std::vector<std::uint32_t>> slices;  // live positions per slice
};

inline SlicePlan slice(const Corpus& c, std::size_t batch_size) {
    if (batch_size == 0) throw DomainError("slice: batch_size must be positive");
    SlicePlan plan;
    std::vector<std::uint32_t> cur;
    cur.reserve(std::min(batch_size, c.size()));
    for (std::size_t pos = 0; pos < c.position_count(); ++pos) {
        if (!c.live(pos)) continue;
        cur.push_back(static_cast<std::uint32_t>(pos));
        if (cur.size() == batch_size) {
            plan.slices.push_back(std::move(cur));
            cur = {};
            cur.reserve(batch_size);
        }
    }
    if (!cur.empty()) plan.slices.push_back(std::move(cur));
    return plan;
}

}  // namespace ace
