#pragma once

// Data encoder: frozen element embeddings, a single-layer mean-pool
// aggregator producing per-record embeddings, and an iterative cross-attention
// distiller compressing each record slice into a handful of rows. Trained
// jointly on cross entropy (recover member elements from the record
// embedding) + MMD (distilled rows match the slice distribution) + L2.

#include <algorithm>
#include <cmath>
#include <iostream>
#include <string>
#include <vector>

#include "ace/attention.hpp"
#include "ace/checkpoint.hpp"
#include "ace/common.hpp"
#include "ace/corpus.hpp"
#include "ace/tensor.hpp"

namespace ace {

// Frozen element embeddings, row j for element id j, entries N(0, 1/d).
struct ElementTable {
    Tensor embeddings;
    std::uint64_t seed = 0;

    static ElementTable create(std::size_t n_elements, std::size_t dim, std::uint64_t seed) {
        Rng rng(seed);
        ElementTable t;
        t.seed = seed;
        t.embeddings =
            Tensor::randn(n_elements, dim, rng, 1.0 / std::sqrt(static_cast<double>(dim)));
        return t;
    }
};

struct EncoderHyper {
    std::size_t dim = 64;           // d
    std::size_t heads = 8;          // h
    std::size_t n_distill = 4;
    std::size_t ffn_mult = 2;
    std::size_t batch_records = 10000;  // B_d
    double ratio = 0.001;               // r
};

struct EncoderModel {
    EncoderHyper hyper;
    ElementTable table;
    ParamSet params;
    std::size_t agg_w = 0, agg_b = 0;
    AttentionBlock distill_first{}, distill_shared{};

    EncoderModel(EncoderHyper h, ElementTable element_table, Rng& rng)
        : hyper(h), table(std::move(element_table)) {
        if (h.n_distill < 1) throw DomainError("n_distill must be at least 1");
        if (!(h.ratio > 0.0) || h.ratio > 1.0) throw DomainError("ratio must be in (0, 1]");
        if (h.dim % h.heads != 0) throw DomainError("dim must be divisible by heads");
        if (table.embeddings.cols() != h.dim)
            throw DimensionError("element table width does not match model dim");
        // Aggregator starts at identity so a fresh model reproduces plain
        // mean pooling of (rectified) element embeddings.
        agg_w = params.add("agg/w", Tensor::identity(h.dim));
        agg_b = params.add("agg/b", Tensor(1, h.dim, 0.0));
        distill_first =
            add_attention_block(params, "distill_first", h.dim, h.dim, h.dim, h.ffn_mult, rng);
        distill_shared =
            add_attention_block(params, "distill_shared", h.dim, h.dim, h.dim, h.ffn_mult, rng);
    }
};

// Distilled representation: one compact block per corpus slice, plus the
// record positions and sampling seed needed to rebuild exactly that block.
struct DistilledSlice {
    std::vector<std::uint32_t> positions;
    Tensor block;
    std::uint64_t init_seed = 0;
};

struct DistilledMatrix {
    std::size_t dim = 0;
    std::vector<DistilledSlice> slices;

    std::size_t total_rows() const {
        std::size_t n = 0;
        for (const auto& s : slices) n += s.block.rows();
        return n;
    }

    Tensor stacked() const {
        Tensor out(total_rows(), dim);
        std::size_t row = 0;
        for (const auto& s : slices) {
            for (std::size_t i = 0; i < s.block.rows(); ++i, ++row)
                out.map().row(row) = s.block.map().row(i);
        }
        return out;
    }
};

inline std::size_t distilled_rows_for(std::size_t slice_len, double ratio) {
    if (slice_len == 0) return 0;
    return static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(slice_len)));
}

// ---------------------------------------------------------------------------
// Aggregation

// Gathers the member-element rows of the given records and the segment
// offsets separating them.
inline void collect_members(const Corpus& c, const std::vector<std::uint32_t>& positions,
                            const Tensor& embeddings, Tensor& member_rows,
                            std::vector<std::size_t>& offsets) {
    std::size_t total = 0;
    for (std::uint32_t pos : positions) total += c.record(pos).elements.size();
    member_rows = Tensor(total, embeddings.cols());
    offsets.clear();
    offsets.reserve(positions.size() + 1);
    offsets.push_back(0);
    std::size_t row = 0;
    for (std::uint32_t pos : positions) {
        for (ElementId e : c.record(pos).elements) {
            if (e >= embeddings.rows()) throw DomainError("element id outside embedding table");
            member_rows.map().row(row++) = embeddings.map().row(e);
        }
        offsets.push_back(row);
    }
}

// S_o rows for a batch of records: row i = MeanPool({relu(W e + b)}) over the
// member elements of record i.
inline Ref aggregate_graph(Tape& t, const std::vector<Ref>& leaves, const EncoderModel& m,
                           Tensor member_rows, std::vector<std::size_t> offsets) {
    Ref x = t.constant(std::move(member_rows));
    Ref h = relu(t, add_rowvec(t, matmul(t, x, leaves[m.agg_w]), leaves[m.agg_b]));
    return segment_mean(t, h, std::move(offsets));
}

// Single-record embedding, forward only.
inline Tensor embed_set(const EncoderModel& m, const Corpus& c, std::uint32_t position) {
    Tape t;
    Tensor members;
    std::vector<std::size_t> offsets;
    collect_members(c, {position}, m.table.embeddings, members, offsets);
    auto leaves = m.params.bind(t);
    return aggregate_graph(t, leaves, m, std::move(members), std::move(offsets))->value;
}

// S_o block for a slice, forward only; row order follows the position list.
inline Tensor encode_slice(const EncoderModel& m, const Corpus& c,
                           const std::vector<std::uint32_t>& positions) {
    Tape t;
    Tensor members;
    std::vector<std::size_t> offsets;
    collect_members(c, positions, m.table.embeddings, members, offsets);
    auto leaves = m.params.bind(t);
    return aggregate_graph(t, leaves, m, std::move(members), std::move(offsets))->value;
}

// ---------------------------------------------------------------------------
// Distillation

// ceil(r * rows) distinct row indices drawn uniformly, in draw order.
inline std::vector<std::size_t> init_distilled_indices(std::size_t rows, double ratio, Rng& rng) {
    if (rows == 0) throw DomainError("init_distilled: empty block");
    const std::size_t m = std::min(rows, distilled_rows_for(rows, ratio));
    return rng.sample_without_replacement(rows, m);
}

inline Tensor init_distilled(const Tensor& s_o, double ratio, Rng& rng) {
    auto idx = init_distilled_indices(s_o.rows(), ratio, rng);
    Tensor out(idx.size(), s_o.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.map().row(i) = s_o.map().row(idx[i]);
    return out;
}

// n_distill rounds of cross-attention against S_o. The first round has its
// own parameters; rounds 2..n share one block, so their key/value projections
// of S_o are computed once.
inline Ref distill_graph(Tape& t, const std::vector<Ref>& leaves, const EncoderModel& m,
                         Ref s_o, Ref s_c0) {
    BlockRefs first = block_refs(m.distill_first, leaves);
    BlockRefs shared = block_refs(m.distill_shared, leaves);
    Ref x = apply_block(t, first, s_c0, project_kv(t, first, s_o), m.hyper.heads);
    if (m.hyper.n_distill > 1) {
        KvCache kv = project_kv(t, shared, s_o);
        for (std::size_t i = 1; i < m.hyper.n_distill; ++i)
            x = apply_block(t, shared, x, kv, m.hyper.heads);
    }
    return x;
}

inline Tensor distill(const EncoderModel& m, const Tensor& s_o, const Tensor& s_c0) {
    if (s_o.cols() != s_c0.cols()) throw DimensionError("distill: column widths differ");
    Tape t;
    auto leaves = m.params.bind(t);
    return distill_graph(t, leaves, m, t.constant(s_o), t.constant(s_c0))->value;
}

// ---------------------------------------------------------------------------
// Losses

// Median of pairwise squared distances between rows of x and rows of y,
// square-rooted; 1.0 when degenerate. Symmetric in its arguments.
inline double median_bandwidth(const Tensor& x, const Tensor& y) {
    if (x.rows() == 0 || y.rows() == 0) return 1.0;
    std::vector<double> d2;
    d2.reserve(x.rows() * y.rows());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < y.rows(); ++j) {
            const double d = (x.map().row(i) - y.map().row(j)).squaredNorm();
            d2.push_back(d);
        }
    const std::size_t mid = d2.size() / 2;
    std::nth_element(d2.begin(), d2.begin() + mid, d2.end());
    const double med = d2[mid];
    return med > 0.0 ? std::sqrt(med) : 1.0;
}

namespace detail {

// Gaussian kernel matrix exp(-|x_i - y_j|^2 / (2 sigma^2)) as a graph.
inline Ref kernel_matrix(Tape& t, Ref x, Ref y, double sigma) {
    Ref xs = row_sum(t, square(t, x));
    Ref ys = row_sum(t, square(t, y));
    Ref d2 = sub(t, cross_add(t, xs, ys), scale(t, matmul_nt(t, x, y), 2.0));
    return exp_op(t, scale(t, d2, -1.0 / (2.0 * sigma * sigma)));
}

}  // namespace detail

// Biased MMD^2 estimate between row samples x and y with a Gaussian kernel.
// Identical inputs produce exactly zero: all three kernel means then come
// from bitwise-identical matrices.
inline Ref mmd_loss_graph(Tape& t, Ref x, Ref y, double sigma) {
    if (x->value.cols() != y->value.cols())
        throw DimensionError("mmd_loss: column widths differ");
    if (!(sigma > 0.0)) throw DomainError("mmd_loss: bandwidth must be positive");
    Ref kxx = mean_all(t, detail::kernel_matrix(t, x, x, sigma));
    Ref kyy = mean_all(t, detail::kernel_matrix(t, y, y, sigma));
    Ref kxy = mean_all(t, detail::kernel_matrix(t, x, y, sigma));
    return add(t, add(t, kxx, kyy), scale(t, kxy, -2.0));
}

inline double mmd_loss(const Tensor& x, const Tensor& y, double sigma) {
    Tape t;
    return mmd_loss_graph(t, t.constant(x), t.constant(y), sigma)->value[0];
}

// Per-record contrast targets for the CE loss: one member element as the
// positive, n_neg distinct non-members as negatives.
struct CeSamples {
    std::vector<std::uint32_t> targets;
    std::vector<std::uint32_t> negatives;
    std::size_t n_neg = 0;
};

inline CeSamples sample_ce(const Corpus& c, const std::vector<std::uint32_t>& positions,
                           std::size_t n_elements, std::size_t n_neg, Rng& rng) {
    std::size_t max_len = 0;
    for (std::uint32_t pos : positions) max_len = std::max(max_len, c.record(pos).elements.size());
    if (n_elements <= max_len) throw DomainError("ce_loss: universe smaller than a record");
    const std::size_t effective = std::min(n_neg, n_elements - max_len);
    if (effective < n_neg) {
        static bool warned = false;
        if (!warned) {
            std::cerr << "warning: universe too small for " << n_neg
                      << " distinct negatives, using " << effective << "\n";
            warned = true;
        }
    }
    CeSamples s;
    s.n_neg = effective;
    s.targets.reserve(positions.size());
    s.negatives.reserve(positions.size() * effective);
    for (std::uint32_t pos : positions) {
        const auto& elems = c.record(pos).elements;
        s.targets.push_back(elems[rng.uniform_index(elems.size())]);
        std::vector<std::uint32_t> negs;
        while (negs.size() < effective) {
            const auto cand = static_cast<std::uint32_t>(rng.uniform_index(n_elements));
            if (std::binary_search(elems.begin(), elems.end(), cand)) continue;
            if (std::find(negs.begin(), negs.end(), cand) != negs.end()) continue;
            negs.push_back(cand);
        }
        s.negatives.insert(s.negatives.end(), negs.begin(), negs.end());
    }
    return s;
}

// ---------------------------------------------------------------------------
// Training

struct EncoderTrainConfig {
    std::size_t epochs = 20;
    double lambda = 0.001;
    std::size_t n_neg = 10;
    std::size_t mmd_sample = 256;
    double train_slice_fraction = 0.5;
    AdamConfig adam{};
    std::uint64_t seed = 1;
    bool verbose = false;
};

struct EncoderTrainResult {
    DistilledMatrix distilled;
    std::vector<double> epoch_loss;
    bool diverged = false;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t x = seed ^ (a * 0x9E3779B97F4A7C15ull) ^ (b * 0xC2B2AE3D27D4EB4Full);
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ull;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBull;
    x ^= x >> 31;
    return x;
}

}  // namespace detail

// Distills every slice with the current parameters (forward only). Slice i
// keeps a fixed sampling seed so the same block can be rebuilt in isolation.
inline DistilledMatrix distill_corpus(const EncoderModel& m, const Corpus& c,
                                      const SlicePlan& plan, std::uint64_t seed) {
    DistilledMatrix dm;
    dm.dim = m.hyper.dim;
    dm.slices.reserve(plan.slices.size());
    for (std::size_t i = 0; i < plan.slices.size(); ++i) {
        DistilledSlice ds;
        ds.positions = plan.slices[i];
        ds.init_seed = detail::mix_seed(seed, i + 1);
        const Tensor s_o = encode_slice(m, c, ds.positions);
        Rng init_rng(ds.init_seed);
        const Tensor s_c0 = init_distilled(s_o, m.hyper.ratio, init_rng);
        ds.block = distill(m, s_o, s_c0);
        dm.slices.push_back(std::move(ds));
    }
    return dm;
}

// Rebuilds one slice block in place from its stored positions and seed.
inline void redistill_slice(const EncoderModel& m, const Corpus& c, DistilledSlice& ds) {
    if (ds.positions.empty()) {
        ds.block = Tensor(0, m.hyper.dim);
        return;
    }
    const Tensor s_o = encode_slice(m, c, ds.positions);
    Rng init_rng(ds.init_seed);
    const Tensor s_c0 = init_distilled(s_o, m.hyper.ratio, init_rng);
    ds.block = distill(m, s_o, s_c0);
}

// One optimization step over one slice; returns the batch loss.
inline double encoder_step(EncoderModel& m, const Corpus& c,
                           const std::vector<std::uint32_t>& positions,
                           const EncoderTrainConfig& cfg, std::uint64_t slice_init_seed,
                           Rng& step_rng) {
    Tape t;
    auto leaves = m.params.bind(t);

    Tensor members;
    std::vector<std::size_t> offsets;
    collect_members(c, positions, m.table.embeddings, members, offsets);
    Ref s_o = aggregate_graph(t, leaves, m, std::move(members), std::move(offsets));

    CeSamples samples =
        sample_ce(c, positions, m.table.embeddings.rows(), cfg.n_neg, step_rng);
    Ref ce = ce_sampled_softmax(t, s_o, m.table.embeddings, std::move(samples.targets),
                                std::move(samples.negatives), samples.n_neg);

    Rng init_rng(slice_init_seed);
    auto init_idx = init_distilled_indices(positions.size(), m.hyper.ratio, init_rng);
    Ref s_c = distill_graph(t, leaves, m, s_o, gather_rows(t, s_o, std::move(init_idx)));

    Ref s_ob = s_o;
    if (positions.size() > cfg.mmd_sample) {
        std::vector<std::size_t> pick =
            step_rng.sample_without_replacement(positions.size(), cfg.mmd_sample);
        s_ob = gather_rows(t, s_o, std::move(pick));
    }
    const double sigma = median_bandwidth(s_ob->value, s_c->value);
    Ref mmd = mmd_loss_graph(t, s_ob, s_c, sigma);

    Ref loss = add(t, add(t, ce, mmd), scale(t, l2_penalty(t, leaves), cfg.lambda));
    const double loss_value = loss->value[0];
    if (!std::isfinite(loss_value)) throw DomainError("encoder loss is not finite");
    t.backward(loss);
    m.params.harvest(leaves);
    m.params.adam_step(cfg.adam);
    return loss_value;
}

// Joint aggregator + distiller training on the leading slices, then a full
// distillation pass over every slice. On divergence the last finite epoch's
// parameters are kept.
inline EncoderTrainResult train_encoder(EncoderModel& m, const Corpus& c, const SlicePlan& plan,
                                        const EncoderTrainConfig& cfg) {
    if (plan.slices.empty()) throw DomainError("train_encoder: corpus has no slices");
    const std::size_t n_train = std::max<std::size_t>(
        1, static_cast<std::size_t>(
               std::ceil(cfg.train_slice_fraction * static_cast<double>(plan.slices.size()))));

    EncoderTrainResult res;
    ParamSet last_finite = m.params;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double total = 0.0;
        bool failed = false;
        for (std::size_t si = 0; si < n_train; ++si) {
            Rng step_rng(detail::mix_seed(cfg.seed, epoch + 1, si + 1));
            const std::uint64_t init_seed = detail::mix_seed(cfg.seed, si + 1);
            try {
                total += encoder_step(m, c, plan.slices[si], cfg, init_seed, step_rng);
            } catch (const DomainError&) {
                failed = true;
                break;
            }
        }
        bool finite = !failed;
        for (std::size_t i = 0; finite && i < m.params.size(); ++i)
            finite = m.params[i].value.all_finite();
        if (!finite) {
            m.params = last_finite;
            res.diverged = true;
            break;
        }
        last_finite = m.params;
        res.epoch_loss.push_back(total / static_cast<double>(n_train));
        if (cfg.verbose)
            std::cerr << "encoder epoch " << epoch << " loss " << res.epoch_loss.back() << "\n";
    }
    res.distilled = distill_corpus(m, c, plan, cfg.seed);
    return res;
}

// Mean MMD between each listed slice's encoded rows and its distilled block,
// used to track distillation quality on held-out slices.
inline double mean_slice_mmd(const EncoderModel& m, const Corpus& c, const SlicePlan& plan,
                             std::size_t first_slice, std::uint64_t seed,
                             std::size_t sample_cap = 256) {
    if (first_slice >= plan.slices.size()) throw DomainError("no slices to evaluate");
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t si = first_slice; si < plan.slices.size(); ++si) {
        const auto& positions = plan.slices[si];
        Tensor s_o = encode_slice(m, c, positions);
        Rng init_rng(detail::mix_seed(seed, si + 1));
        Tensor s_c = distill(m, s_o, init_distilled(s_o, m.hyper.ratio, init_rng));
        Tensor s_ob = s_o;
        if (s_o.rows() > sample_cap) {
            Rng pick_rng(detail::mix_seed(seed, 0xE7ull, si + 1));
            std::vector<std::size_t> pick =
                pick_rng.sample_without_replacement(s_o.rows(), sample_cap);
            s_ob = Tensor(pick.size(), s_o.cols());
            for (std::size_t i = 0; i < pick.size(); ++i)
                s_ob.map().row(i) = s_o.map().row(pick[i]);
        }
        total += mmd_loss(s_ob, s_c, median_bandwidth(s_ob, s_c));
        ++n;
    }
    return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Persistence

inline void save_encoder(const std::string& path, const EncoderModel& m) {
    std::vector<NamedTensor> ts = params_to_tensors(m.params);
    ts.push_back({"element_table", m.table.embeddings});
    write_checkpoint(path, ts);
}

inline EncoderModel load_encoder(const std::string& path, const EncoderHyper& hyper,
                                 std::uint64_t table_seed) {
    auto ts = read_checkpoint(path);
    Tensor table_tensor;
    std::vector<NamedTensor> param_ts;
    for (auto& nt : ts) {
        if (nt.name == "element_table")
            table_tensor = std::move(nt.value);
        else
            param_ts.push_back(std::move(nt));
    }
    if (table_tensor.empty()) throw ParseError("encoder checkpoint missing element_table");
    ElementTable table;
    table.embeddings = std::move(table_tensor);
    table.seed = table_seed;
    Rng scratch(0);
    EncoderModel m(hyper, std::move(table), scratch);
    tensors_to_params(param_ts, m.params);
    return m;
}

inline void save_distilled(const std::string& path, const DistilledMatrix& dm) {
    std::vector<NamedTensor> ts;
    for (std::size_t i = 0; i < dm.slices.size(); ++i) {
        const auto& s = dm.slices[i];
        ts.push_back({"slice/" + std::to_string(i) + "/block", s.block});
        Tensor meta(1, s.positions.size() + 2);
        meta[0] = static_cast<double>(s.init_seed >> 32);
        meta[1] = static_cast<double>(s.init_seed & 0xFFFFFFFFull);
        for (std::size_t j = 0; j < s.positions.size(); ++j)
            meta[j + 2] = static_cast<double>(s.positions[j]);
        ts.push_back({"slice/" + std::to_string(i) + "/meta", std::move(meta)});
    }
    write_checkpoint(path, ts);
}

inline DistilledMatrix load_distilled(const std::string& path, std::size_t dim) {
    auto ts = read_checkpoint(path);
    DistilledMatrix dm;
    dm.dim = dim;
    dm.slices.resize(ts.size() / 2);
    for (auto& nt : ts) {
        if (nt.name.rfind("slice/", 0) != 0) throw ParseError("unexpected tensor " + nt.name);
        const std::size_t slash = nt.name.find('/', 6);
        const std::size_t idx = std::stoul(nt.name.substr(6, slash - 6));
        if (idx >= dm.slices.size()) throw ParseError("slice index out of range in " + nt.name);
        const std::string kind = nt.name.substr(slash + 1);
        if (kind == "block") {
            dm.slices[idx].block = std::move(nt.value);
        } else if (kind == "meta") {
            const Tensor& meta = nt.value;
            if (meta.size() < 2) throw ParseError("malformed slice meta");
            dm.slices[idx].init_seed = (static_cast<std::uint64_t>(meta[0]) << 32) |
                                       static_cast<std::uint64_t>(meta[1]);
            dm.slices[idx].positions.clear();
            for (std::size_t j = 2; j < meta.size(); ++j)
                dm.slices[idx].positions.push_back(static_cast<std::uint32_t>(meta[j]));
        } else {
            throw ParseError("unexpected tensor " + nt.name);
        }
    }
    return dm;
}

}  // namespace ace
