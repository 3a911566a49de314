#pragma once

// Batched corpus updates. Inserts append whole new slices (chunked at the
// encoder's batch size) to the distilled matrix; deletes tombstone records
// and re-distill only the slices they touched, leaving every other block
// bit-identical. After an update the analyzer can be fine-tuned on a small
// relabeled query batch.

#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "ace/analyzer.hpp"
#include "ace/corpus.hpp"
#include "ace/encoder.hpp"
#include "ace/queries.hpp"

namespace ace {

struct UpdateBatch {
    std::vector<SetRecord> inserts;
    std::vector<std::int64_t> deletes;
};

struct UpdateReport {
    std::size_t inserted = 0;
    std::size_t deleted = 0;
    std::size_t new_slices = 0;
    std::size_t redistilled_slices = 0;
    std::vector<std::string> rejected;  // human-readable, one per skipped entry
};

// Reads {"op":"insert","id":...,"elements":[...]} / {"op":"delete","id":...}
// lines. Elements must already exist in the universe (fixed-universe setting);
// inserts naming unknown elements are rejected and reported, not fatal.
inline UpdateBatch read_updates_jsonl(const std::string& path, const ElementUniverse& universe,
                                      std::vector<std::string>* rejected = nullptr) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open updates: " + path);
    UpdateBatch batch;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto j = detail::parse_jsonl_line(line, path, line_no);
        const std::string where = path + ":" + std::to_string(line_no);
        if (!j.is_object() || !j.contains("op") || !j.contains("id") ||
            !j["op"].is_string() || !j["id"].is_number_integer())
            throw ParseError(where + ": expected an object with op and integer id");
        const std::string op = j["op"].get<std::string>();
        const auto id = j["id"].get<std::int64_t>();
        if (op == "delete") {
            batch.deletes.push_back(id);
            continue;
        }
        if (op != "insert") throw ParseError(where + ": op must be insert or delete");
        if (!j.contains("elements") || !j["elements"].is_array() || j["elements"].empty())
            throw ParseError(where + ": insert needs a non-empty elements array");
        SetRecord rec;
        rec.id = id;
        bool ok = true;
        for (const auto& e : j["elements"]) {
            if (!e.is_string() || e.get<std::string>().empty())
                throw ParseError(where + ": elements must be non-empty strings");
            const auto eid = universe.try_id_of(e.get<std::string>());
            if (!eid) {
                if (rejected)
                    rejected->push_back(where + ": unknown element " + e.get<std::string>());
                ok = false;
                break;
            }
            rec.elements.push_back(*eid);
        }
        if (ok) batch.inserts.push_back(std::move(rec));
    }
    return batch;
}

inline void write_updates_jsonl(const std::string& path, const UpdateBatch& batch,
                                const ElementUniverse& universe) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for write: " + path);
    for (const auto& rec : batch.inserts) {
        nlohmann::json j;
        j["op"] = "insert";
        j["id"] = rec.id;
        auto arr = nlohmann::json::array();
        for (ElementId e : rec.elements) arr.push_back(universe.name_of(e));
        j["elements"] = std::move(arr);
        os << j.dump() << "\n";
    }
    for (std::int64_t id : batch.deletes) {
        nlohmann::json j;
        j["op"] = "delete";
        j["id"] = id;
        os << j.dump() << "\n";
    }
    if (!os) throw IoError("write failed: " + path);
}

// Appends the inserted records to the corpus and distills them into fresh
// slices of at most B_d records each. Existing slice blocks never change.
// Records with out-of-universe elements or ids that are already live are
// rejected and reported.
inline UpdateReport insert_batch(Corpus& corpus, const EncoderModel& encoder,
                                 DistilledMatrix& sc, const std::vector<SetRecord>& inserts,
                                 Rng& rng) {
    UpdateReport report;
    std::vector<std::uint32_t> pending;
    auto flush = [&] {
        if (pending.empty()) return;
        DistilledSlice ds;
        ds.positions = std::move(pending);
        pending.clear();
        ds.init_seed = rng.next_u64();
        redistill_slice(encoder, corpus, ds);
        sc.slices.push_back(std::move(ds));
        ++report.new_slices;
    };

    for (const auto& rec : inserts) {
        bool ok = !rec.elements.empty();
        for (ElementId e : rec.elements)
            ok = ok && e < corpus.universe().size() && e < encoder.table.embeddings.rows();
        if (!ok) {
            report.rejected.push_back("record " + std::to_string(rec.id) +
                                      ": element outside the fixed universe");
            continue;
        }
        if (corpus.position_of(rec.id)) {
            report.rejected.push_back("record " + std::to_string(rec.id) +
                                      ": id already present");
            continue;
        }
        pending.push_back(
            static_cast<std::uint32_t>(corpus.add_record(rec.id, rec.elements)));
        ++report.inserted;
        if (pending.size() == encoder.hyper.batch_records) flush();
    }
    flush();
    return report;
}

// Tombstones the given record ids and re-distills only the slices that held
// them, reusing each slice's stored sampling seed. Unknown ids are reported
// and skipped.
inline UpdateReport delete_sets(Corpus& corpus, const EncoderModel& encoder, DistilledMatrix& sc,
                                const std::vector<std::int64_t>& ids) {
    std::unordered_map<std::uint32_t, std::size_t> slice_of;
    for (std::size_t si = 0; si < sc.slices.size(); ++si)
        for (std::uint32_t pos : sc.slices[si].positions) slice_of.emplace(pos, si);

    UpdateReport report;
    std::vector<bool> affected(sc.slices.size(), false);
    for (std::int64_t id : ids) {
        const auto pos = corpus.position_of(id);
        if (!pos) {
            report.rejected.push_back("record " + std::to_string(id) + ": not present");
            continue;
        }
        corpus.remove_record(id);
        ++report.deleted;
        const auto hit = slice_of.find(static_cast<std::uint32_t>(*pos));
        if (hit != slice_of.end()) affected[hit->second] = true;
    }

    for (std::size_t si = 0; si < sc.slices.size(); ++si) {
        if (!affected[si]) continue;
        auto& ds = sc.slices[si];
        std::vector<std::uint32_t> live;
        live.reserve(ds.positions.size());
        for (std::uint32_t pos : ds.positions)
            if (corpus.live(pos)) live.push_back(pos);
        ds.positions = std::move(live);
        redistill_slice(encoder, corpus, ds);
        ++report.redistilled_slices;
    }
    return report;
}

// Applies deletes then inserts from one batch.
inline UpdateReport apply_updates(Corpus& corpus, const EncoderModel& encoder,
                                  DistilledMatrix& sc, const UpdateBatch& batch, Rng& rng) {
    UpdateReport del = delete_sets(corpus, encoder, sc, batch.deletes);
    UpdateReport ins = insert_batch(corpus, encoder, sc, batch.inserts, rng);
    UpdateReport total;
    total.inserted = ins.inserted;
    total.deleted = del.deleted;
    total.new_slices = ins.new_slices;
    total.redistilled_slices = del.redistilled_slices;
    total.rejected = del.rejected;
    total.rejected.insert(total.rejected.end(), ins.rejected.begin(), ins.rejected.end());
    return total;
}

struct FineTuneConfig {
    std::size_t train_queries = 20;
    std::size_t val_queries = 10;
    std::size_t epochs = 10;
    double lambda = 0.001;
    AdamConfig adam{};
    std::uint64_t seed = 1;
};

// Relabels the base workload against the updated corpus, keeps a small random
// train/validation batch of still-nonempty queries, and continues training
// the analyzer on them.
inline AnalyzerTrainResult fine_tune(AnalyzerModel& m, const Workload& base,
                                     const Corpus& updated, const DistilledMatrix& sc,
                                     const EncoderModel& encoder, const FineTuneConfig& cfg) {
    std::vector<LabeledQuery> relabeled;
    for (const auto& lq : base.queries) {
        if (lq.query.op != m.op) continue;
        const double card = static_cast<double>(evaluate_exact(updated, lq.query));
        if (card >= 1.0) relabeled.push_back(LabeledQuery{lq.query, card, lq.cls});
    }
    if (relabeled.empty()) throw DomainError("fine_tune: no usable queries after relabeling");

    Rng rng(cfg.seed);
    rng.shuffle(relabeled);
    const std::size_t want = cfg.train_queries + cfg.val_queries;
    if (relabeled.size() > want) relabeled.resize(want);

    Workload w;
    w.queries = std::move(relabeled);
    AnalyzerTrainConfig tc;
    tc.epochs = cfg.epochs;
    tc.batch_queries = cfg.train_queries;
    tc.lambda = cfg.lambda;
    tc.val_fraction = static_cast<double>(cfg.val_queries) / static_cast<double>(want);
    tc.patience = cfg.epochs;  // no early stop on such a small signal
    tc.init_head_bias = false;
    tc.adam = cfg.adam;
    tc.seed = cfg.seed;
    return fit_analyzer(m, w, sc.stacked(), encoder.table.embeddings,
                        FrequencyTable::from_corpus(updated), tc);
}

}  // namespace ace
