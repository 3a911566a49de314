#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstring>

#include "ace/dynamic.hpp"
#include "support/fixtures.hpp"
#include "support/naive_oracle.hpp"

using namespace ace;
using ace::testing::naive_count;
using ace::testing::random_corpus;

namespace {

EncoderModel make_encoder(const Corpus& c, std::uint64_t seed, std::size_t batch_records,
                          double ratio) {
    EncoderHyper h;
    h.dim = 8;
    h.heads = 2;
    h.n_distill = 2;
    h.batch_records = batch_records;
    h.ratio = ratio;
    Rng rng(seed);
    return EncoderModel(h, ElementTable::create(c.universe().size(), 8, seed + 1), rng);
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    return a.size() == 0 || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

SetRecord rec(std::int64_t id, std::vector<ElementId> elems) {
    SetRecord r;
    r.id = id;
    r.elements = std::move(elems);
    return r;
}

std::vector<SetQuery> probe_queries(const Corpus& c, Rng& rng, std::size_t n) {
    std::vector<SetQuery> qs;
    const std::size_t m = c.universe().size();
    while (qs.size() < n) {
        std::vector<ElementId> lits;
        const std::size_t k = 1 + rng.uniform_index(3);
        for (std::size_t i = 0; i < k; ++i)
            lits.push_back(static_cast<ElementId>(rng.uniform_index(m)));
        const Op op = static_cast<Op>(rng.uniform_index(3));
        qs.push_back(SetQuery::make(op, lits));
    }
    return qs;
}

}  // namespace

TEST_CASE("inserting nothing leaves the distilled matrix untouched") {
    Rng rng(3);
    Corpus c = random_corpus(rng, 20, 10, 4);
    EncoderModel enc = make_encoder(c, 5, 8, 0.25);
    SlicePlan plan = slice(c, 8);
    DistilledMatrix dm = distill_corpus(enc, c, plan, 7);
    DistilledMatrix before = dm;

    Rng urng(9);
    UpdateReport rep = insert_batch(c, enc, dm, {}, urng);
    REQUIRE(rep.inserted == 0);
    REQUIRE(rep.new_slices == 0);
    REQUIRE(dm.slices.size() == before.slices.size());
    for (std::size_t i = 0; i < dm.slices.size(); ++i)
        REQUIRE(bit_equal(dm.slices[i].block, before.slices[i].block));
}

TEST_CASE("a full insert chunk becomes one new slice with ceiling rows") {
    Rng rng(11);
    Corpus c = random_corpus(rng, 20, 10, 4);
    EncoderModel enc = make_encoder(c, 13, 10, 0.2);
    SlicePlan plan = slice(c, 10);
    DistilledMatrix dm = distill_corpus(enc, c, plan, 15);
    const std::size_t slices_before = dm.slices.size();
    const std::size_t rows_before = dm.total_rows();

    std::vector<SetRecord> inserts;
    for (int i = 0; i < 10; ++i)
        inserts.push_back(rec(1000 + i, {static_cast<ElementId>(i % 10)}));
    Rng urng(17);
    UpdateReport rep = insert_batch(c, enc, dm, inserts, urng);

    REQUIRE(rep.inserted == 10);
    REQUIRE(rep.new_slices == 1);
    REQUIRE(dm.slices.size() == slices_before + 1);
    REQUIRE(dm.slices.back().block.rows() == 2);  // ceil(0.2 * 10)
    REQUIRE(dm.total_rows() == rows_before + 2);
    REQUIRE(c.size() == 30);
}

TEST_CASE("oversized insert batches split into encoder-sized chunks") {
    Rng rng(19);
    Corpus c = random_corpus(rng, 6, 8, 3);
    EncoderModel enc = make_encoder(c, 21, 4, 0.5);
    DistilledMatrix dm = distill_corpus(enc, c, slice(c, 4), 23);

    std::vector<SetRecord> inserts;
    for (int i = 0; i < 10; ++i)
        inserts.push_back(rec(500 + i, {static_cast<ElementId>(i % 8)}));
    Rng urng(25);
    UpdateReport rep = insert_batch(c, enc, dm, inserts, urng);
    REQUIRE(rep.inserted == 10);
    REQUIRE(rep.new_slices == 3);  // 4 + 4 + 2
    REQUIRE(dm.slices.back().block.rows() == 1);  // ceil(0.5 * 2)

    std::size_t expect_rows = 0;
    for (const auto& s : dm.slices)
        expect_rows += distilled_rows_for(s.positions.size(), enc.hyper.ratio);
    REQUIRE(dm.total_rows() == expect_rows);
}

TEST_CASE("inserts with duplicate ids or foreign elements are rejected") {
    Rng rng(27);
    Corpus c = random_corpus(rng, 10, 6, 3);
    EncoderModel enc = make_encoder(c, 29, 8, 0.5);
    DistilledMatrix dm = distill_corpus(enc, c, slice(c, 8), 31);

    std::vector<SetRecord> inserts = {
        rec(3, {0}),                               // id already live
        rec(100, {static_cast<ElementId>(99)}),    // element outside universe
        rec(101, {1, 2}),                          // fine
    };
    Rng urng(33);
    UpdateReport rep = insert_batch(c, enc, dm, inserts, urng);
    REQUIRE(rep.inserted == 1);
    REQUIRE(rep.rejected.size() == 2);
    REQUIRE(c.position_of(101).has_value());
}

TEST_CASE("updated corpus answers queries like a freshly built one") {
    Rng rng(35);
    Corpus c = random_corpus(rng, 40, 12, 4);
    EncoderModel enc = make_encoder(c, 37, 10, 0.2);
    DistilledMatrix dm = distill_corpus(enc, c, slice(c, 10), 39);

    std::vector<SetRecord> inserts;
    Rng irng(41);
    for (int i = 0; i < 15; ++i) {
        std::vector<ElementId> elems;
        const std::size_t k = 1 + irng.uniform_index(3);
        for (std::size_t j = 0; j < k; ++j)
            elems.push_back(static_cast<ElementId>(irng.uniform_index(12)));
        inserts.push_back(rec(2000 + i, elems));
    }
    Rng urng(43);
    insert_batch(c, enc, dm, inserts, urng);
    delete_sets(c, enc, dm, {0, 5, 11, 2003});

    // Rebuild an equivalent corpus from scratch: survivors plus inserts.
    Corpus fresh;
    for (std::size_t e = 0; e < c.universe().size(); ++e)
        fresh.universe().intern(c.universe().name_of(static_cast<ElementId>(e)));
    for (std::size_t pos = 0; pos < c.position_count(); ++pos)
        if (c.live(pos)) fresh.add_record(c.record(pos).id, c.record(pos).elements);

    REQUIRE(fresh.size() == c.size());
    Rng qrng(45);
    for (const auto& q : probe_queries(c, qrng, 60)) {
        const std::size_t updated = evaluate_exact(c, q);
        REQUIRE(updated == evaluate_exact(fresh, q));
        REQUIRE(updated == naive_count(c, q));
    }
}

TEST_CASE("deletes inside one slice re-distill that block alone") {
    Rng rng(47);
    Corpus c = random_corpus(rng, 30, 10, 4);
    EncoderModel enc = make_encoder(c, 49, 10, 0.3);
    DistilledMatrix dm = distill_corpus(enc, c, slice(c, 10), 51);
    REQUIRE(dm.slices.size() == 3);
    DistilledMatrix before = dm;

    // Records at positions 10..19 live in slice 1; ids match positions here.
    const std::int64_t id_a = c.record(12).id;
    const std::int64_t id_b = c.record(17).id;
    UpdateReport rep = delete_sets(c, enc, dm, {id_a, id_b});
    REQUIRE(rep.deleted == 2);
    REQUIRE(rep.redistilled_slices == 1);

    REQUIRE(bit_equal(dm.slices[0].block, before.slices[0].block));
    REQUIRE(bit_equal(dm.slices[2].block, before.slices[2].block));
    REQUIRE_FALSE(bit_equal(dm.slices[1].block, before.slices[1].block));
    REQUIRE(dm.slices[1].positions.size() == 8);
    REQUIRE(dm.slices[1].block.rows() == distilled_rows_for(8, 0.3));

    // The re-distilled block matches a from-scratch distillation of the
    // surviving rows under the stored seed.
    Tensor s_o = encode_slice(enc, c, dm.slices[1].positions);
    Rng draw(dm.slices[1].init_seed);
    Tensor expect = distill(enc, s_o, init_distilled(s_o, enc.hyper.ratio, draw));
    REQUIRE(bit_equal(dm.slices[1].block, expect));
}

TEST_CASE("unknown delete ids are reported while the rest proceed") {
    Rng rng(53);
    Corpus c = random_corpus(rng, 12, 8, 3);
    EncoderModel enc = make_encoder(c, 55, 6, 0.5);
    DistilledMatrix dm = distill_corpus(enc, c, slice(c, 6), 57);

    UpdateReport rep = delete_sets(c, enc, dm, {4, 9999, 7});
    REQUIRE(rep.deleted == 2);
    REQUIRE(rep.rejected.size() == 1);
    REQUIRE(c.size() == 10);
    REQUIRE_FALSE(c.position_of(4).has_value());
    REQUIRE_FALSE(c.position_of(7).has_value());
}

TEST_CASE("deleting everything in a slice empties its block") {
    Rng rng(59);
    Corpus c = random_corpus(rng, 8, 6, 3);
    EncoderModel enc = make_encoder(c, 61, 4, 0.5);
    DistilledMatrix dm = distill_corpus(enc, c, slice(c, 4), 63);
    REQUIRE(dm.slices.size() == 2);

    delete_sets(c, enc, dm, {0, 1, 2, 3});
    REQUIRE(dm.slices[0].positions.empty());
    REQUIRE(dm.slices[0].block.rows() == 0);
    REQUIRE(dm.total_rows() == dm.slices[1].block.rows());
}

TEST_CASE("delete and re-insert round trips at the oracle level") {
    Rng rng(65);
    Corpus c = random_corpus(rng, 30, 10, 4);
    EncoderModel enc = make_encoder(c, 67, 10, 0.2);
    DistilledMatrix dm = distill_corpus(enc, c, slice(c, 10), 69);

    Rng qrng(71);
    std::vector<SetQuery> probes = probe_queries(c, qrng, 40);
    std::vector<std::size_t> original;
    for (const auto& q : probes) original.push_back(evaluate_exact(c, q));

    std::vector<SetRecord> victims;
    for (std::int64_t id : {3, 8, 21}) {
        const auto pos = c.position_of(id);
        victims.push_back(c.record(*pos));
    }
    delete_sets(c, enc, dm, {3, 8, 21});
    Rng urng(73);
    insert_batch(c, enc, dm, victims, urng);

    for (std::size_t i = 0; i < probes.size(); ++i)
        REQUIRE(evaluate_exact(c, probes[i]) == original[i]);
}

TEST_CASE("frequencies stay consistent through arbitrary update sequences") {
    Rng rng(75);
    Corpus c = random_corpus(rng, 50, 12, 4);
    EncoderModel enc = make_encoder(c, 77, 12, 0.25);
    DistilledMatrix dm = distill_corpus(enc, c, slice(c, 12), 79);

    Rng urng(81);
    std::int64_t next_id = 10000;
    for (int round = 0; round < 6; ++round) {
        std::vector<std::int64_t> doomed;
        for (std::size_t pos = 0; pos < c.position_count(); ++pos)
            if (c.live(pos) && urng.uniform() < 0.15) doomed.push_back(c.record(pos).id);
        delete_sets(c, enc, dm, doomed);

        std::vector<SetRecord> births;
        const std::size_t n_new = urng.uniform_index(8);
        for (std::size_t i = 0; i < n_new; ++i) {
            std::vector<ElementId> elems;
            const std::size_t k = 1 + urng.uniform_index(3);
            for (std::size_t j = 0; j < k; ++j)
                elems.push_back(static_cast<ElementId>(urng.uniform_index(12)));
            births.push_back(rec(next_id++, elems));
        }
        insert_batch(c, enc, dm, births, urng);

        for (ElementId e = 0; e < c.universe().size(); ++e) {
            std::size_t scan = 0;
            for (std::size_t pos = 0; pos < c.position_count(); ++pos) {
                if (!c.live(pos)) continue;
                const auto& elems = c.record(pos).elements;
                scan += std::binary_search(elems.begin(), elems.end(), e) ? 1 : 0;
            }
            REQUIRE(c.freq(e) == scan);
            REQUIRE(c.postings(e).size() == scan);
        }

        std::size_t expect_rows = 0;
        for (const auto& s : dm.slices)
            expect_rows += distilled_rows_for(s.positions.size(), enc.hyper.ratio);
        REQUIRE(dm.total_rows() == expect_rows);
        for (const auto& s : dm.slices)
            for (std::uint32_t pos : s.positions) REQUIRE(c.live(pos));
    }
}

TEST_CASE("update files round trip and reject unknown elements") {
    Rng rng(83);
    Corpus c = random_corpus(rng, 10, 6, 3);

    UpdateBatch batch;
    batch.inserts.push_back(rec(100, {0, 2}));
    batch.inserts.push_back(rec(101, {4}));
    batch.deletes = {3, 7};

    const std::string path = "updates_roundtrip.jsonl";
    write_updates_jsonl(path, batch, c.universe());
    std::vector<std::string> rejected;
    UpdateBatch back = read_updates_jsonl(path, c.universe(), &rejected);
    std::remove(path.c_str());

    REQUIRE(rejected.empty());
    REQUIRE(back.inserts.size() == 2);
    REQUIRE(back.inserts[0].id == 100);
    REQUIRE(back.inserts[0].elements == std::vector<ElementId>{0, 2});
    REQUIRE(back.deletes == std::vector<std::int64_t>{3, 7});

    std::ofstream os("updates_bad.jsonl");
    os << R"({"op":"insert","id":1,"elements":["e0","no-such-element"]})" << "\n";
    os << R"({"op":"delete","id":2})" << "\n";
    os.close();
    rejected.clear();
    UpdateBatch partial = read_updates_jsonl("updates_bad.jsonl", c.universe(), &rejected);
    std::remove("updates_bad.jsonl");
    REQUIRE(partial.inserts.empty());
    REQUIRE(partial.deletes.size() == 1);
    REQUIRE(rejected.size() == 1);

    std::ofstream os2("updates_malformed.jsonl");
    os2 << R"({"op":"upsert","id":1})" << "\n";
    os2.close();
    REQUIRE_THROWS_AS(read_updates_jsonl("updates_malformed.jsonl", c.universe(), nullptr),
                      ParseError);
    std::remove("updates_malformed.jsonl");
}

TEST_CASE("fine tuning adapts an analyzer to the updated corpus") {
    Rng rng(85);
    Corpus c = random_corpus(rng, 120, 15, 4);
    EncoderModel enc = make_encoder(c, 87, 30, 0.2);
    DistilledMatrix dm = distill_corpus(enc, c, slice(c, 30), 89);
    FrequencyTable ft = FrequencyTable::from_corpus(c);

    // Base workload: overlap queries labeled on the original corpus.
    Workload base;
    Rng qrng(91);
    while (base.queries.size() < 50) {
        std::vector<ElementId> lits = {static_cast<ElementId>(qrng.uniform_index(15))};
        if (qrng.uniform() < 0.5) lits.push_back(static_cast<ElementId>(qrng.uniform_index(15)));
        SetQuery q = SetQuery::make(Op::Overlap, lits);
        const double card = static_cast<double>(evaluate_exact(c, q));
        if (card >= 1.0) base.queries.push_back(LabeledQuery{q, card, FreqClass::Regular});
    }

    AnalyzerHyper ah;
    ah.dim = 8;
    ah.heads = 2;
    ah.n_cross = 1;
    ah.n_self = 1;
    Rng arng(93);
    AnalyzerModel m(Op::Overlap, ah, arng);
    AnalyzerTrainConfig tc;
    tc.epochs = 10;
    tc.batch_queries = 25;
    tc.patience = 10;
    tc.seed = 95;
    fit_analyzer(m, base, dm.stacked(), enc.table.embeddings, ft, tc);

    // Grow the corpus, then fine-tune on relabeled queries.
    std::vector<SetRecord> inserts;
    std::int64_t id = 5000;
    for (int i = 0; i < 60; ++i)
        inserts.push_back(rec(id++, {static_cast<ElementId>(i % 15)}));
    Rng urng(97);
    insert_batch(c, enc, dm, inserts, urng);

    FineTuneConfig fc;
    fc.epochs = 5;
    fc.seed = 99;
    AnalyzerTrainResult res = fine_tune(m, base, c, dm, enc, fc);
    REQUIRE_FALSE(res.diverged);
    REQUIRE(res.train_loss.size() == 5);
    for (double v : res.train_loss) REQUIRE(std::isfinite(v));
}
