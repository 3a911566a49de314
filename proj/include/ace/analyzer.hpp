#pragma once

// Query analyzer: stacked query-element embeddings pass through cross
// attention against the distilled matrix, then self attention, then a
// frequency-augmented attention-pooling block and a linear head producing a
// log-cardinality. One model per query operator. Trained on weighted mean
// Q-error with a smooth surrogate for the max{1, r, 1/r} kink.

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "ace/attention.hpp"
#include "ace/checkpoint.hpp"
#include "ace/common.hpp"
#include "ace/corpus.hpp"
#include "ace/encoder.hpp"
#include "ace/queries.hpp"
#include "ace/tensor.hpp"

namespace ace {

struct AnalyzerHyper {
    std::size_t dim = 64;   // must match the encoder
    std::size_t heads = 8;
    std::size_t n_cross = 4;
    std::size_t n_self = 8;
    std::size_t ffn_mult = 2;
};

struct AnalyzerModel {
    Op op = Op::Overlap;
    AnalyzerHyper hyper;
    ParamSet params;
    std::vector<AttentionBlock> cross;
    std::vector<AttentionBlock> self_stack;
    // Pooling block: trainable seed query (width d+1), projections mapping
    // the frequency-augmented width back to d, then layer norms + FFN at d.
    std::size_t pool_q0 = 0;
    std::size_t pool_wq = 0, pool_wk = 0, pool_wv = 0, pool_wo = 0;
    std::size_t pool_ln1_g = 0, pool_ln1_b = 0, pool_ln2_g = 0, pool_ln2_b = 0;
    std::size_t pool_ffn_a = 0, pool_ffn_b = 0, pool_ffn_c = 0;
    std::size_t head_w = 0, head_b = 0;

    AnalyzerModel(Op operation, AnalyzerHyper h, Rng& rng) : op(operation), hyper(h) {
        if (h.dim % h.heads != 0) throw DomainError("dim must be divisible by heads");
        for (std::size_t i = 0; i < h.n_cross; ++i)
            cross.push_back(add_attention_block(params, "cross/" + std::to_string(i), h.dim,
                                                h.dim, h.dim, h.ffn_mult, rng));
        for (std::size_t i = 0; i < h.n_self; ++i)
            self_stack.push_back(add_attention_block(params, "self/" + std::to_string(i), h.dim,
                                                     h.dim, h.dim, h.ffn_mult, rng));
        const std::size_t da = h.dim + 1;
        const double sa = 1.0 / std::sqrt(static_cast<double>(da));
        const double sd = 1.0 / std::sqrt(static_cast<double>(h.dim));
        pool_q0 = params.add("pool/q0", Tensor::randn(1, da, rng, sa));
        pool_wq = params.add("pool/wq", Tensor::randn(da, h.dim, rng, sa));
        pool_wk = params.add("pool/wk", Tensor::randn(da, h.dim, rng, sa));
        pool_wv = params.add("pool/wv", Tensor::randn(da, h.dim, rng, sa));
        pool_wo = params.add("pool/wo", Tensor::randn(h.dim, h.dim, rng, sd));
        pool_ln1_g = params.add("pool/ln1_g", Tensor(1, h.dim, 1.0));
        pool_ln1_b = params.add("pool/ln1_b", Tensor(1, h.dim, 0.0));
        pool_ln2_g = params.add("pool/ln2_g", Tensor(1, h.dim, 1.0));
        pool_ln2_b = params.add("pool/ln2_b", Tensor(1, h.dim, 0.0));
        const std::size_t hidden = h.ffn_mult * h.dim;
        pool_ffn_a = params.add("pool/ffn_a", Tensor::randn(h.dim, hidden, rng, sd));
        pool_ffn_b = params.add("pool/ffn_b", Tensor::randn(h.dim, hidden, rng, sd));
        pool_ffn_c = params.add("pool/ffn_c",
                                Tensor::randn(hidden, h.dim, rng,
                                              1.0 / std::sqrt(static_cast<double>(hidden))));
        head_w = params.add("head/w", Tensor::randn(h.dim, 1, rng, sd));
        head_b = params.add("head/b", Tensor(1, 1, 0.0));
    }
};

// Query-element embedding rows, in literal order.
inline Tensor stack_query(const Tensor& element_table, const std::vector<ElementId>& elements) {
    if (elements.empty()) throw DomainError("stack_query: empty literal");
    Tensor q(elements.size(), element_table.cols());
    for (std::size_t i = 0; i < elements.size(); ++i) {
        if (elements[i] >= element_table.rows())
            throw UnknownElement("id " + std::to_string(elements[i]));
        q.map().row(i) = element_table.map().row(elements[i]);
    }
    return q;
}

// ln(1 + freq) per literal element, as a k x 1 column.
inline Tensor log_freq_column(const FrequencyTable& ft, const std::vector<ElementId>& elements) {
    Tensor col(elements.size(), 1);
    for (std::size_t i = 0; i < elements.size(); ++i) {
        const double f = elements[i] < ft.freq.size() ? ft.freq[elements[i]] : 0.0;
        col[i] = std::log1p(f);
    }
    return col;
}

// Key/value projections of the distilled matrix for every cross block,
// computed once and reused across the queries of a batch.
inline std::vector<KvCache> project_sc(Tape& t, const AnalyzerModel& m,
                                       const std::vector<Ref>& leaves, Ref sc) {
    std::vector<KvCache> kv;
    kv.reserve(m.cross.size());
    for (const auto& b : m.cross) kv.push_back(project_kv(t, block_refs(b, leaves), sc));
    return kv;
}

// Log-cardinality graph for one query: cross stack -> self stack -> append
// frequency column -> attention pooling -> linear head. Output is 1x1.
inline Ref predict_graph(Tape& t, const AnalyzerModel& m, const std::vector<Ref>& leaves,
                         const std::vector<KvCache>& sc_kv, Tensor query_rows,
                         Tensor freq_col) {
    const std::size_t k = query_rows.rows();
    Ref x = t.constant(std::move(query_rows));
    for (std::size_t i = 0; i < m.cross.size(); ++i)
        x = apply_block(t, block_refs(m.cross[i], leaves), x, sc_kv[i], m.hyper.heads);
    for (const auto& b : m.self_stack) {
        BlockRefs r = block_refs(b, leaves);
        x = apply_block(t, r, x, project_kv(t, r, x), m.hyper.heads);
    }

    Ref xf = append_cols(t, x, freq_col);
    Ref q = matmul(t, leaves[m.pool_q0], leaves[m.pool_wq]);
    Ref key = matmul(t, xf, leaves[m.pool_wk]);
    Ref val = matmul(t, xf, leaves[m.pool_wv]);
    Ref att_out =
        matmul(t, multi_head_core(t, q, key, val, m.hyper.heads), leaves[m.pool_wo]);
    Ref avg = segment_mean(t, x, {0, k});
    Ref mixed = layer_norm(t, add(t, avg, att_out), leaves[m.pool_ln1_g], leaves[m.pool_ln1_b]);
    Ref ffn = ffn_geglu(t, mixed, leaves[m.pool_ffn_a], leaves[m.pool_ffn_b],
                        leaves[m.pool_ffn_c]);
    Ref pooled =
        layer_norm(t, add(t, mixed, ffn), leaves[m.pool_ln2_g], leaves[m.pool_ln2_b]);
    return add(t, matmul(t, pooled, leaves[m.head_w]), leaves[m.head_b]);
}

// Cardinality estimate for one query. Reads only the distilled matrix, the
// element table, and the frequency table; never the corpus records.
inline double predict(const AnalyzerModel& m, const Tensor& sc, const Tensor& element_table,
                      const FrequencyTable& ft, const SetQuery& q) {
    if (q.op != m.op) throw DomainError("predict: query operator does not match model");
    if (sc.rows() == 0) throw DomainError("predict: empty distilled matrix, encode first");
    if (sc.cols() != m.hyper.dim) throw DimensionError("predict: distilled width mismatch");
    Tape t;
    auto leaves = m.params.bind(t);
    Ref sc_ref = t.constant(sc);
    auto sc_kv = project_sc(t, m, leaves, sc_ref);
    Ref z = predict_graph(t, m, leaves, sc_kv, stack_query(element_table, q.elements),
                          log_freq_column(ft, q.elements));
    const double n = std::max(ft.n_records, 1.0);
    return std::min(std::max(std::exp(z->value[0]), 1.0), n);
}

// ---------------------------------------------------------------------------
// Weighted mean Q-error

// w_i = ln c_i / sum_j ln c_j; uniform when every cardinality is 1.
inline std::vector<double> wmq_weights(const std::vector<double>& trues) {
    if (trues.empty()) throw DomainError("wmq: empty batch");
    std::vector<double> w(trues.size());
    double total = 0.0;
    for (std::size_t i = 0; i < trues.size(); ++i) {
        if (trues[i] < 1.0) throw DomainError("wmq: cardinality below 1");
        w[i] = std::log(trues[i]);
        total += w[i];
    }
    if (total <= 0.0) {
        std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(w.size()));
    } else {
        for (double& x : w) x /= total;
    }
    return w;
}

// Weighted mean Q-error of a batch of estimates against true cardinalities.
inline double wmq_loss(const std::vector<double>& estimates, const std::vector<double>& trues) {
    if (estimates.size() != trues.size()) throw DimensionError("wmq: size mismatch");
    const std::vector<double> w = wmq_weights(trues);
    double total = 0.0;
    for (std::size_t i = 0; i < trues.size(); ++i) {
        if (estimates[i] < 1.0) throw DomainError("wmq: estimate below 1");
        total += w[i] * std::max({1.0, estimates[i] / trues[i], trues[i] / estimates[i]});
    }
    return total;
}

// Smooth training surrogate: exp of a softplus-smoothed |z - ln c| per query,
//   s(u) = (softplus(b u) + softplus(-b u)) / b = |u| + 2 softplus(-b|u|) / b,
// an upper bound on |u| that is exact in the tails and 2 ln2 / b at the kink,
// so the term matches max{c'/c, c/c'} = exp|z - ln c| away from c' = c. The
// hard max-with-1 applies only at evaluation time.
inline constexpr double kWmqSmoothing = 10.0;

inline Ref wmq_surrogate_term(Tape& t, Ref z, double true_card, double weight,
                              double beta = kWmqSmoothing) {
    Ref u = sub(t, z, t.constant(Tensor(1, 1, std::log(true_card))));
    Ref s = add(t, softplus(t, scale(t, u, beta)), softplus(t, scale(t, u, -beta)));
    return scale(t, exp_op(t, scale(t, s, 1.0 / beta)), weight);
}

// ---------------------------------------------------------------------------
// Training

struct AnalyzerTrainConfig {
    std::size_t epochs = 60;
    std::size_t batch_queries = 100;  // B_q
    double lambda = 0.001;
    double val_fraction = 1.0 / 7.0;  // 1400-query workload -> 200 validation
    std::size_t patience = 10;
    bool init_head_bias = true;
    AdamConfig adam{};
    std::uint64_t seed = 1;
    bool verbose = false;
};

struct AnalyzerTrainResult {
    std::vector<double> train_loss;  // surrogate, per epoch
    std::vector<double> val_wmq;     // exact metric, per epoch
    double best_val = std::numeric_limits<double>::infinity();
    bool diverged = false;
};

namespace detail {

inline double batch_step(AnalyzerModel& m, const Tensor& sc, const Tensor& element_table,
                         const FrequencyTable& ft, const std::vector<const LabeledQuery*>& batch,
                         const AnalyzerTrainConfig& cfg) {
    std::vector<double> trues;
    trues.reserve(batch.size());
    for (const auto* q : batch) trues.push_back(q->cardinality);
    const std::vector<double> w = wmq_weights(trues);

    Tape t;
    auto leaves = m.params.bind(t);
    Ref sc_ref = t.constant(sc);
    auto sc_kv = project_sc(t, m, leaves, sc_ref);
    Ref acc = nullptr;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Ref z = predict_graph(t, m, leaves, sc_kv,
                              stack_query(element_table, batch[i]->query.elements),
                              log_freq_column(ft, batch[i]->query.elements));
        Ref term = wmq_surrogate_term(t, z, trues[i], w[i]);
        acc = acc ? add(t, acc, term) : term;
    }
    Ref loss = add(t, acc, scale(t, l2_penalty(t, leaves), cfg.lambda));
    const double loss_value = loss->value[0];
    if (!std::isfinite(loss_value)) throw DomainError("analyzer loss is not finite");
    t.backward(loss);
    m.params.harvest(leaves);
    m.params.adam_step(cfg.adam);
    return loss_value;
}

}  // namespace detail

inline double eval_wmq(const AnalyzerModel& m, const Tensor& sc, const Tensor& element_table,
                       const FrequencyTable& ft, const std::vector<const LabeledQuery*>& queries) {
    std::vector<double> est, tru;
    est.reserve(queries.size());
    tru.reserve(queries.size());
    for (const auto* q : queries) {
        est.push_back(predict(m, sc, element_table, ft, q->query));
        tru.push_back(q->cardinality);
    }
    return wmq_loss(est, tru);
}

// Fits an analyzer in place on a single-operator workload against a fixed
// distilled matrix. Queries are split train/validation; early stopping keeps
// the parameters with the best validation metric. Also used for fine-tuning
// after corpus updates.
inline AnalyzerTrainResult fit_analyzer(AnalyzerModel& m, const Workload& workload,
                                        const Tensor& sc, const Tensor& element_table,
                                        const FrequencyTable& ft,
                                        const AnalyzerTrainConfig& cfg) {
    if (workload.queries.empty()) throw DomainError("train_analyzer: empty workload");
    for (const auto& q : workload.queries) {
        if (q.query.op != m.op) throw DomainError("train_analyzer: mixed-operator workload");
        if (q.cardinality < 1.0) throw DomainError("train_analyzer: cardinality below 1");
    }

    Rng rng(cfg.seed);
    std::vector<const LabeledQuery*> order;
    order.reserve(workload.queries.size());
    for (const auto& q : workload.queries) order.push_back(&q);
    rng.shuffle(order);

    std::size_t n_val = static_cast<std::size_t>(
        cfg.val_fraction * static_cast<double>(order.size()));
    if (cfg.val_fraction > 0.0 && order.size() > 1 && n_val == 0) n_val = 1;
    if (n_val >= order.size()) n_val = order.size() - 1;
    std::vector<const LabeledQuery*> val(order.begin(), order.begin() + n_val);
    std::vector<const LabeledQuery*> train(order.begin() + n_val, order.end());

    if (cfg.init_head_bias && m.params.steps() == 0) {
        double mean_log = 0.0;
        for (const auto* q : train) mean_log += std::log(q->cardinality);
        m.params[m.head_b].value[0] = mean_log / static_cast<double>(train.size());
    }

    AnalyzerTrainResult res;
    ParamSet best = m.params;
    std::size_t since_best = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(train);
        double total = 0.0;
        std::size_t n_batches = 0;
        bool failed = false;
        for (std::size_t start = 0; start < train.size(); start += cfg.batch_queries) {
            const std::size_t stop = std::min(train.size(), start + cfg.batch_queries);
            std::vector<const LabeledQuery*> batch(train.begin() + start, train.begin() + stop);
            try {
                total += detail::batch_step(m, sc, element_table, ft, batch, cfg);
            } catch (const DomainError&) {
                failed = true;
                break;
            }
            ++n_batches;
        }
        if (failed) {
            res.diverged = true;
            break;
        }
        res.train_loss.push_back(total / static_cast<double>(n_batches));
        const double v = val.empty() ? res.train_loss.back()
                                     : eval_wmq(m, sc, element_table, ft, val);
        res.val_wmq.push_back(v);
        if (cfg.verbose)
            std::cerr << "analyzer epoch " << epoch << " train " << res.train_loss.back()
                      << " val " << v << "\n";
        if (v < res.best_val) {
            res.best_val = v;
            best = m.params;
            since_best = 0;
        } else if (++since_best > cfg.patience) {
            break;
        }
    }
    m.params = best;
    return res;
}

// Builds and trains a fresh analyzer for the workload's operator. The element
// table comes from the encoder, frequencies from the current corpus.
inline AnalyzerModel train_analyzer(const Workload& workload, const DistilledMatrix& sc,
                                    const EncoderModel& encoder, const Corpus& corpus,
                                    const AnalyzerHyper& hyper, const AnalyzerTrainConfig& cfg,
                                    AnalyzerTrainResult* out_result = nullptr) {
    if (workload.queries.empty()) throw DomainError("train_analyzer: empty workload");
    if (hyper.dim != encoder.hyper.dim)
        throw DimensionError("train_analyzer: analyzer and encoder dims differ");
    Rng init_rng(cfg.seed);
    AnalyzerModel m(workload.queries.front().query.op, hyper, init_rng);
    AnalyzerTrainResult res =
        fit_analyzer(m, workload, sc.stacked(), encoder.table.embeddings,
                     FrequencyTable::from_corpus(corpus), cfg);
    if (out_result) *out_result = std::move(res);
    return m;
}

// ---------------------------------------------------------------------------
// Persistence

inline void save_analyzer(const std::string& path, const AnalyzerModel& m) {
    write_checkpoint(path, params_to_tensors(m.params));
}

inline AnalyzerModel load_analyzer(const std::string& path, Op op, const AnalyzerHyper& hyper) {
    Rng scratch(0);
    AnalyzerModel m(op, hyper, scratch);
    tensors_to_params(read_checkpoint(path), m.params);
    return m;
}

}  // namespace ace
