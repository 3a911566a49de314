// ace: command-line workbench for set-valued cardinality estimation.
//
// Subcommands cover the whole pipeline: ingest/synth a corpus, generate
// labeled workloads, train the encoder (distilled matrix) and per-operator
// analyzers, estimate single queries, benchmark against baselines, and apply
// insert/delete updates. Option precedence: flags > --config file (flat TOML
// or JSON) > built-in defaults. Exit codes: 0 success, 1 runtime error,
// 2 usage error.

#include <CLI11.hpp>

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ace/analyzer.hpp"
#include "ace/baselines.hpp"
#include "ace/corpus.hpp"
#include "ace/dynamic.hpp"
#include "ace/encoder.hpp"
#include "ace/harness.hpp"
#include "ace/queries.hpp"

namespace fs = std::filesystem;
using namespace ace;

namespace {

// ---------------------------------------------------------------------------
// Config files: a flat TOML table or a flat JSON object, keys matching the
// long option names (dashes and underscores interchangeable).

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string norm_key(std::string k) {
    for (char& ch : k)
        if (ch == '_') ch = '-';
    return k;
}

std::map<std::string, std::string> parse_flat_toml(std::istream& is, const std::string& path) {
    std::map<std::string, std::string> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        bool in_quotes = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') in_quotes = !in_quotes;
            if (line[i] == '#' && !in_quotes) {
                line.resize(i);
                break;
            }
        }
        const std::string t = trim(line);
        if (t.empty()) continue;
        if (t.front() == '[') continue;  // section headers carry no keys here
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected key = value");
        const std::string key = norm_key(trim(t.substr(0, eq)));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected key = value");
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
            value = value.substr(1, value.size() - 2);
        out[key] = value;
    }
    return out;
}

std::map<std::string, std::string> load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path);
    std::stringstream buf;
    buf << is.rdbuf();
    const std::string text = buf.str();
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + ": " + e.what());
        }
        if (!j.is_object()) throw ParseError(path + ": config must be a flat object");
        std::map<std::string, std::string> out;
        for (const auto& [k, v] : j.items()) {
            if (v.is_string())
                out[norm_key(k)] = v.get<std::string>();
            else
                out[norm_key(k)] = v.dump();
        }
        return out;
    }
    std::istringstream tom(text);
    return parse_flat_toml(tom, path);
}

// Tracks which keys were consumed so typos in the config file get a warning.
struct ConfigMap {
    std::map<std::string, std::string> values;
    std::set<std::string> used;
    std::string path;

    bool has(const std::string& key) { return values.count(key) > 0; }

    void get(const std::string& key, std::string& var) {
        if (!has(key)) return;
        var = values[key];
        used.insert(key);
    }
    void get(const std::string& key, double& var) {
        if (!has(key)) return;
        try {
            var = std::stod(values[key]);
        } catch (...) {
            throw ParseError(path + ": value of '" + key + "' is not a number");
        }
        used.insert(key);
    }
    void get(const std::string& key, std::size_t& var) {
        if (!has(key)) return;
        try {
            var = std::stoull(values[key]);
        } catch (...) {
            throw ParseError(path + ": value of '" + key + "' is not an integer");
        }
        used.insert(key);
    }
    void get(const std::string& key, bool& var) {
        if (!has(key)) return;
        const std::string v = values[key];
        if (v == "true" || v == "1")
            var = true;
        else if (v == "false" || v == "0")
            var = false;
        else
            throw ParseError(path + ": value of '" + key + "' is not a boolean");
        used.insert(key);
    }

    void warn_unused() const {
        for (const auto& [k, v] : values)
            if (!used.count(k))
                std::fprintf(stderr, "warning: config key '%s' is not recognized\n", k.c_str());
    }
};

// ---------------------------------------------------------------------------
// Shared helpers

Corpus load_corpus(const std::string& path) { return ingest_jsonl(path).corpus; }

void require_model(const std::string& path, const std::string& hint) {
    if (!fs::exists(path))
        throw IoError("no trained model at '" + path + "': " + hint);
}

EncoderHyper encoder_hyper_from_meta(const nlohmann::json& j) {
    EncoderHyper h;
    h.dim = j.at("dim").get<std::size_t>();
    h.heads = j.at("heads").get<std::size_t>();
    h.n_distill = j.at("n_distill").get<std::size_t>();
    h.ffn_mult = j.at("ffn_mult").get<std::size_t>();
    h.batch_records = j.at("batch_records").get<std::size_t>();
    h.ratio = j.at("ratio").get<double>();
    return h;
}

struct EncoderBundle {
    EncoderHyper hyper;
    nlohmann::json meta;
    EncoderModel model;
    DistilledMatrix sc;
};

EncoderBundle load_encoder_bundle(const std::string& path) {
    require_model(path, "run `ace train-encoder` first");
    require_model(path + ".json", "the checkpoint sidecar is missing; retrain the encoder");
    require_model(path + ".sc", "the distilled matrix is missing; retrain the encoder");
    nlohmann::json meta = read_json_file(path + ".json");
    const EncoderHyper hyper = encoder_hyper_from_meta(meta);
    EncoderModel model = load_encoder(path, hyper, meta.value("table_seed", std::uint64_t{0}));
    DistilledMatrix sc = load_distilled(path + ".sc", hyper.dim);
    return {hyper, std::move(meta), std::move(model), std::move(sc)};
}

struct AnalyzerBundle {
    AnalyzerHyper hyper;
    nlohmann::json meta;
    Op op = Op::Overlap;
    AnalyzerModel model;
};

AnalyzerBundle load_analyzer_bundle(const std::string& path) {
    require_model(path, "run `ace train-analyzer` first");
    require_model(path + ".json", "the checkpoint sidecar is missing; retrain the analyzer");
    nlohmann::json meta = read_json_file(path + ".json");
    AnalyzerHyper h;
    h.dim = meta.at("dim").get<std::size_t>();
    h.heads = meta.at("heads").get<std::size_t>();
    h.n_cross = meta.at("n_cross").get<std::size_t>();
    h.n_self = meta.at("n_self").get<std::size_t>();
    h.ffn_mult = meta.at("ffn_mult").get<std::size_t>();
    const Op op = op_from_string(meta.at("op").get<std::string>());
    AnalyzerModel model = load_analyzer(path, op, h);
    return {h, std::move(meta), op, std::move(model)};
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string field;
    while (std::getline(is, field, ',')) {
        field = trim(field);
        if (!field.empty()) out.push_back(field);
    }
    return out;
}

std::vector<ElementId> resolve_elements(const Corpus& c, const std::string& csv) {
    const auto names = split_csv(csv);
    if (names.empty()) throw DomainError("no elements given");
    std::vector<ElementId> ids;
    ids.reserve(names.size());
    for (const auto& name : names) {
        const auto id = c.universe().try_id_of(name);
        if (!id) throw UnknownElement(name);
        ids.push_back(*id);
    }
    return ids;
}

ClassRatios parse_ratios(const std::string& s) {
    unsigned long r = 0, h = 0, l = 0;
    char extra = 0;
    if (std::sscanf(s.c_str(), "%lu:%lu:%lu%c", &r, &h, &l, &extra) != 3)
        throw DomainError("ratios must look like 3:2:2");
    if (r + h + l == 0) throw DomainError("ratios must not all be zero");
    return ClassRatios{r, h, l};
}

double seconds_since(const std::chrono::steady_clock::time_point& start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void print_json_line(const nlohmann::json& j) { std::printf("%s\n", j.dump().c_str()); }

std::size_t param_bytes(const ParamSet& params) {
    std::size_t n = 0;
    for (const auto& nt : params_to_tensors(params)) n += nt.value.size();
    return n * sizeof(double);
}

// ---------------------------------------------------------------------------
// Option bags (defaults are the documented baseline configuration)

struct CommonOpts {
    std::uint64_t seed = 1;
    std::string config;
};

struct SynthOpts {
    std::size_t n = 50000;
    std::size_t m = 2000;
    double zipf = 1.1;
    std::size_t pairs = 50;
    double pair_prob = 1.0;
    double avg_size = 1.8;
    std::string out = "corpus.jsonl";
};

struct IngestOpts {
    std::string in;
    std::string out = "corpus.jsonl";
};

struct GenWorkloadOpts {
    std::string corpus = "corpus.jsonl";
    std::string op = "overlap";
    std::size_t n = 1400;
    std::string ratios = "3:2:2";
    std::string out = "workload.jsonl";
};

struct TrainEncoderOpts {
    std::string corpus = "corpus.jsonl";
    std::string out = "encoder.ckpt";
    std::size_t d = 64;
    std::size_t heads = 8;
    std::size_t n_distill = 4;
    std::size_t ffn_mult = 2;
    std::size_t batch_records = 10000;
    double ratio = 0.001;
    std::size_t epochs = 20;
    double lr = 0.001;
    double lambda = 0.001;
    std::size_t n_neg = 10;
    std::size_t mmd_sample = 256;
    double train_frac = 0.5;
    bool verbose = false;
};

struct TrainAnalyzerOpts {
    std::string corpus = "corpus.jsonl";
    std::string workload = "workload.jsonl";
    std::string encoder = "encoder.ckpt";
    std::string out = "analyzer.ckpt";
    std::size_t heads = 8;
    std::size_t n_cross = 4;
    std::size_t n_self = 8;
    std::size_t ffn_mult = 2;
    std::size_t epochs = 60;
    std::size_t batch_queries = 100;
    std::size_t patience = 10;
    double lr = 0.001;
    double lambda = 0.001;
    double val_frac = 1.0 / 7.0;
    bool verbose = false;
};

struct EstimateOpts {
    std::string corpus = "corpus.jsonl";
    std::string encoder = "encoder.ckpt";
    std::string analyzer = "analyzer.ckpt";
    std::string op;  // defaults to the analyzer's operator
    std::string elements;
    bool truth = false;
};

struct BenchOpts {
    std::string corpus = "corpus.jsonl";
    std::string workload = "workload.jsonl";
    std::string encoder = "encoder.ckpt";
    std::string analyzer = "analyzer.ckpt";
    std::string estimators = "ace,independence,sampling";
    std::string out = "report";
    double rho = 0.01;
    bool no_latency = false;
};

struct UpdateOpts {
    std::string corpus = "corpus.jsonl";
    std::string updates = "updates.jsonl";
    std::string encoder = "encoder.ckpt";
    std::string analyzer;  // optional: fine-tune after applying updates
    std::string workload;  // base workload to relabel for fine-tuning
    std::string out;       // defaults to rewriting --corpus
    std::size_t fine_tune_epochs = 10;
    double lr = 0.001;
};

// ---------------------------------------------------------------------------
// Subcommand bodies

void run_ingest(const IngestOpts& o) {
    IngestResult res = ingest_jsonl(o.in);
    write_corpus_jsonl(o.out, res.corpus);
    print_json_line({{"records", res.records},
                     {"distinct_elements", res.distinct_elements},
                     {"out", o.out}});
}

void run_synth(const SynthOpts& o, const CommonOpts& common) {
    SynthSpec spec;
    spec.n_records = o.n;
    spec.n_elements = o.m;
    spec.zipf_exponent = o.zipf;
    spec.n_pairs = o.pairs;
    spec.pair_co_prob = o.pair_prob;
    spec.avg_set_size = o.avg_size;
    Rng rng(common.seed);
    Corpus c = synth_corpus(spec, rng);
    write_corpus_jsonl(o.out, c);
    print_json_line({{"records", c.size()},
                     {"distinct_elements", c.universe().size()},
                     {"out", o.out}});
}

void run_gen_workload(const GenWorkloadOpts& o, const CommonOpts& common) {
    const Op op = op_from_string(o.op);
    const ClassRatios ratios = parse_ratios(o.ratios);
    Corpus c = load_corpus(o.corpus);
    Rng rng(common.seed);
    Workload w = gen_workload(c, op, o.n, ratios, rng);
    write_workload_jsonl(o.out, c, w);
    std::size_t regular = 0, high = 0, low = 0;
    for (const auto& lq : w.queries) {
        if (lq.cls == FreqClass::Regular) ++regular;
        if (lq.cls == FreqClass::High) ++high;
        if (lq.cls == FreqClass::Low) ++low;
    }
    print_json_line({{"queries", w.queries.size()},
                     {"regular", regular},
                     {"high", high},
                     {"low", low},
                     {"out", o.out}});
}

void run_train_encoder(const TrainEncoderOpts& o, const CommonOpts& common) {
    Corpus c = load_corpus(o.corpus);
    EncoderHyper hyper;
    hyper.dim = o.d;
    hyper.heads = o.heads;
    hyper.n_distill = o.n_distill;
    hyper.ffn_mult = o.ffn_mult;
    hyper.batch_records = o.batch_records;
    hyper.ratio = o.ratio;

    const auto start = std::chrono::steady_clock::now();
    ElementTable table = ElementTable::create(c.universe().size(), hyper.dim, common.seed);
    Rng rng(common.seed);
    EncoderModel model(hyper, std::move(table), rng);
    SlicePlan plan = slice(c, hyper.batch_records);

    EncoderTrainConfig cfg;
    cfg.epochs = o.epochs;
    cfg.lambda = o.lambda;
    cfg.n_neg = o.n_neg;
    cfg.mmd_sample = o.mmd_sample;
    cfg.train_slice_fraction = o.train_frac;
    cfg.adam.lr = o.lr;
    cfg.seed = common.seed;
    cfg.verbose = o.verbose;
    EncoderTrainResult res = train_encoder(model, c, plan, cfg);
    const double train_seconds = seconds_since(start);

    save_encoder(o.out, model);
    save_distilled(o.out + ".sc", res.distilled);
    nlohmann::json meta{{"dim", hyper.dim},
                        {"heads", hyper.heads},
                        {"n_distill", hyper.n_distill},
                        {"ffn_mult", hyper.ffn_mult},
                        {"batch_records", hyper.batch_records},
                        {"ratio", hyper.ratio},
                        {"table_seed", common.seed},
                        {"n_records", c.size()},
                        {"n_elements", c.universe().size()},
                        {"train_seconds", train_seconds},
                        {"diverged", res.diverged}};
    write_json_file(o.out + ".json", meta);

    if (res.diverged)
        std::fprintf(stderr, "warning: training diverged; saved the last finite state\n");
    print_json_line({{"out", o.out},
                     {"slices", res.distilled.slices.size()},
                     {"sc_rows", res.distilled.total_rows()},
                     {"final_loss", res.epoch_loss.empty() ? 0.0 : res.epoch_loss.back()},
                     {"train_seconds", train_seconds},
                     {"diverged", res.diverged}});
}

void run_train_analyzer(const TrainAnalyzerOpts& o, const CommonOpts& common) {
    Corpus c = load_corpus(o.corpus);
    EncoderBundle enc = load_encoder_bundle(o.encoder);
    Workload w = read_workload_jsonl(o.workload, c);

    AnalyzerHyper hyper;
    hyper.dim = enc.hyper.dim;
    hyper.heads = o.heads;
    hyper.n_cross = o.n_cross;
    hyper.n_self = o.n_self;
    hyper.ffn_mult = o.ffn_mult;

    AnalyzerTrainConfig cfg;
    cfg.epochs = o.epochs;
    cfg.batch_queries = o.batch_queries;
    cfg.lambda = o.lambda;
    cfg.val_fraction = o.val_frac;
    cfg.patience = o.patience;
    cfg.adam.lr = o.lr;
    cfg.seed = common.seed;
    cfg.verbose = o.verbose;

    const auto start = std::chrono::steady_clock::now();
    AnalyzerTrainResult res;
    AnalyzerModel model = train_analyzer(w, enc.sc, enc.model, c, hyper, cfg, &res);
    const double train_seconds = seconds_since(start);

    save_analyzer(o.out, model);
    nlohmann::json meta{{"op", to_string(model.op)},
                        {"dim", hyper.dim},
                        {"heads", hyper.heads},
                        {"n_cross", hyper.n_cross},
                        {"n_self", hyper.n_self},
                        {"ffn_mult", hyper.ffn_mult},
                        {"n_records", c.size()},
                        {"train_seconds", train_seconds},
                        {"best_val_wmq", res.best_val},
                        {"diverged", res.diverged}};
    write_json_file(o.out + ".json", meta);

    if (res.diverged)
        std::fprintf(stderr, "warning: training diverged; saved the last finite state\n");
    print_json_line({{"out", o.out},
                     {"op", to_string(model.op)},
                     {"best_val_wmq", res.best_val},
                     {"train_seconds", train_seconds},
                     {"diverged", res.diverged}});
}

void run_estimate(const EstimateOpts& o) {
    Corpus c = load_corpus(o.corpus);
    EncoderBundle enc = load_encoder_bundle(o.encoder);
    AnalyzerBundle an = load_analyzer_bundle(o.analyzer);
    const Op op = o.op.empty() ? an.op : op_from_string(o.op);
    const SetQuery q = SetQuery::make(op, resolve_elements(c, o.elements));
    const FrequencyTable ft = FrequencyTable::from_corpus(c);
    const double est = predict(an.model, enc.sc.stacked(), enc.model.table.embeddings, ft, q);
    std::printf("%.6g\n", est);
    if (o.truth) std::printf("%zu\n", evaluate_exact(c, q));
}

void run_bench(const BenchOpts& o, const CommonOpts& common) {
    Corpus c = load_corpus(o.corpus);
    Workload w = read_workload_jsonl(o.workload, c);
    const FrequencyTable ft = FrequencyTable::from_corpus(c);

    // Keeps loaded models alive for the duration of the closures below.
    auto enc = std::make_shared<std::unique_ptr<EncoderBundle>>();
    auto an = std::make_shared<std::unique_ptr<AnalyzerBundle>>();
    auto sc_stacked = std::make_shared<Tensor>();

    std::vector<EstimatorEntry> entries;
    for (const auto& name : split_csv(o.estimators)) {
        if (name == "ace") {
            *enc = std::make_unique<EncoderBundle>(load_encoder_bundle(o.encoder));
            *an = std::make_unique<AnalyzerBundle>(load_analyzer_bundle(o.analyzer));
            *sc_stacked = (*enc)->sc.stacked();
            const std::size_t bytes =
                sc_stacked->size() * sizeof(double) +
                (*enc)->model.table.embeddings.size() * sizeof(double) +
                param_bytes((*an)->model.params);
            const double build = (*enc)->meta.value("train_seconds", 0.0) +
                                 (*an)->meta.value("train_seconds", 0.0);
            entries.push_back({"ace",
                               [enc, an, sc_stacked, &ft](const SetQuery& q) {
                                   return predict((*an)->model, *sc_stacked,
                                                  (*enc)->model.table.embeddings, ft, q);
                               },
                               bytes, build});
        } else if (name == "independence") {
            const auto start = std::chrono::steady_clock::now();
            auto est = std::make_shared<IndependenceEstimator>(ft);
            const double build = seconds_since(start);
            entries.push_back({"independence",
                               [est](const SetQuery& q) { return est->estimate(q); },
                               ft.freq.size() * sizeof(double), build});
        } else if (name == "sampling") {
            const auto start = std::chrono::steady_clock::now();
            auto sketch = std::make_shared<SampleSketch>(c, o.rho, common.seed);
            const double build = seconds_since(start);
            entries.push_back({"sampling",
                               [sketch](const SetQuery& q) { return sketch->estimate(q); },
                               sketch->bytes(), build});
        } else {
            throw DomainError("unknown estimator '" + name +
                              "' (expected ace, independence, or sampling)");
        }
    }
    if (entries.empty()) throw DomainError("no estimators selected");
    if (o.no_latency)
        for (auto& e : entries) e.build_seconds = 0.0;

    BenchReport report = bench(entries, w, c, !o.no_latency);
    write_text_file(o.out + ".json", report_to_json(report).dump(2) + "\n");
    write_text_file(o.out + ".csv", report_to_csv(report));

    std::printf("%-14s %10s %10s %10s %10s %12s\n", "estimator", "mean_q", "p50", "p95", "p99",
                "latency_ms");
    for (const auto& er : report.estimators) {
        const auto& overall = er.classes.front();
        std::printf("%-14s %10.3f %10.3f %10.3f %10.3f %12.4f\n", er.name.c_str(),
                    overall.mean_q, overall.p50, overall.p95, overall.p99,
                    overall.avg_latency_ms);
    }
    std::printf("wrote %s.json and %s.csv\n", o.out.c_str(), o.out.c_str());
}

void run_update(const UpdateOpts& o, const CommonOpts& common) {
    Corpus c = load_corpus(o.corpus);
    EncoderBundle enc = load_encoder_bundle(o.encoder);

    std::vector<std::string> rejected_lines;
    UpdateBatch batch = read_updates_jsonl(o.updates, c.universe(), &rejected_lines);
    Rng rng(common.seed);
    UpdateReport report = apply_updates(c, enc.model, enc.sc, batch, rng);
    report.rejected.insert(report.rejected.begin(), rejected_lines.begin(),
                           rejected_lines.end());

    const std::string corpus_out = o.out.empty() ? o.corpus : o.out;
    write_corpus_jsonl(corpus_out, c);
    save_distilled(o.encoder + ".sc", enc.sc);

    nlohmann::json summary{{"inserted", report.inserted},
                           {"deleted", report.deleted},
                           {"new_slices", report.new_slices},
                           {"redistilled_slices", report.redistilled_slices},
                           {"rejected", report.rejected},
                           {"records", c.size()},
                           {"corpus_out", corpus_out}};

    if (!o.analyzer.empty()) {
        if (o.workload.empty())
            throw DomainError("fine-tuning needs --workload with the base training queries");
        AnalyzerBundle an = load_analyzer_bundle(o.analyzer);
        Workload base = read_workload_jsonl(o.workload, c);
        FineTuneConfig cfg;
        cfg.epochs = o.fine_tune_epochs;
        cfg.adam.lr = o.lr;
        cfg.seed = common.seed;
        AnalyzerTrainResult res = fine_tune(an.model, base, c, enc.sc, enc.model, cfg);
        save_analyzer(o.analyzer, an.model);
        an.meta["n_records"] = c.size();
        write_json_file(o.analyzer + ".json", an.meta);
        summary["fine_tuned"] = o.analyzer;
        summary["fine_tune_val_wmq"] = res.best_val;
    }
    print_json_line(summary);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"set-valued cardinality estimation workbench"};
    app.require_subcommand(1);

    CommonOpts common;
    IngestOpts ingest_o;
    SynthOpts synth_o;
    GenWorkloadOpts genw_o;
    TrainEncoderOpts tenc_o;
    TrainAnalyzerOpts tana_o;
    EstimateOpts est_o;
    BenchOpts bench_o;
    UpdateOpts upd_o;

    try {
        // The config file seeds option values before parsing, so explicit
        // flags still win.
        for (int i = 1; i < argc; ++i) {
            const std::string a = argv[i];
            if (a == "--config" && i + 1 < argc)
                common.config = argv[i + 1];
            else if (a.rfind("--config=", 0) == 0)
                common.config = a.substr(9);
        }
        ConfigMap cfg;
        if (!common.config.empty()) {
            cfg.values = load_config(common.config);
            cfg.path = common.config;
        }
        cfg.get("seed", common.seed);
        cfg.get("in", ingest_o.in);
        cfg.get("n", synth_o.n);
        cfg.get("m", synth_o.m);
        cfg.get("zipf", synth_o.zipf);
        cfg.get("pairs", synth_o.pairs);
        cfg.get("pair-prob", synth_o.pair_prob);
        cfg.get("avg-size", synth_o.avg_size);
        cfg.get("op", genw_o.op);
        cfg.get("queries", genw_o.n);
        cfg.get("ratios", genw_o.ratios);
        cfg.get("d", tenc_o.d);
        cfg.get("heads", tenc_o.heads);
        cfg.get("n-distill", tenc_o.n_distill);
        cfg.get("ffn-mult", tenc_o.ffn_mult);
        cfg.get("batch-records", tenc_o.batch_records);
        cfg.get("ratio", tenc_o.ratio);
        cfg.get("encoder-epochs", tenc_o.epochs);
        cfg.get("lr", tenc_o.lr);
        cfg.get("lambda", tenc_o.lambda);
        cfg.get("n-neg", tenc_o.n_neg);
        cfg.get("mmd-sample", tenc_o.mmd_sample);
        cfg.get("train-frac", tenc_o.train_frac);
        cfg.get("heads", tana_o.heads);
        cfg.get("n-cross", tana_o.n_cross);
        cfg.get("n-self", tana_o.n_self);
        cfg.get("ffn-mult", tana_o.ffn_mult);
        cfg.get("analyzer-epochs", tana_o.epochs);
        cfg.get("batch-queries", tana_o.batch_queries);
        cfg.get("patience", tana_o.patience);
        cfg.get("lr", tana_o.lr);
        cfg.get("lambda", tana_o.lambda);
        cfg.get("val-frac", tana_o.val_frac);
        cfg.get("estimators", bench_o.estimators);
        cfg.get("rho", bench_o.rho);
        cfg.get("fine-tune-epochs", upd_o.fine_tune_epochs);
        cfg.get("lr", upd_o.lr);
        cfg.warn_unused();

        auto add_common = [&](CLI::App* sub) {
            sub->add_option("--seed", common.seed, "random seed");
            sub->add_option("--config", common.config,
                            "config file (flat TOML or JSON); flags override it");
        };

        CLI::App* s_ingest = app.add_subcommand("ingest", "normalize a JSONL dataset");
        s_ingest->add_option("--in", ingest_o.in, "input JSONL: {\"id\":..,\"elements\":[..]}")
            ->required();
        s_ingest->add_option("--out", ingest_o.out, "normalized corpus path");
        add_common(s_ingest);
        s_ingest->callback([&] { run_ingest(ingest_o); });

        CLI::App* s_synth = app.add_subcommand("synth", "generate a synthetic corpus");
        s_synth->add_option("--n", synth_o.n, "number of records");
        s_synth->add_option("--m", synth_o.m, "universe size");
        s_synth->add_option("--zipf", synth_o.zipf, "zipf exponent of element frequencies");
        s_synth->add_option("--pairs", synth_o.pairs, "planted co-occurrence pairs");
        s_synth->add_option("--pair-prob", synth_o.pair_prob, "pair co-occurrence probability");
        s_synth->add_option("--avg-size", synth_o.avg_size, "average set size");
        s_synth->add_option("--out", synth_o.out, "corpus output path");
        add_common(s_synth);
        s_synth->callback([&] { run_synth(synth_o, common); });

        CLI::App* s_genw = app.add_subcommand("gen-workload", "generate a labeled workload");
        s_genw->add_option("--corpus", genw_o.corpus, "corpus JSONL");
        s_genw->add_option("--op", genw_o.op, "superset | subset | overlap");
        s_genw->add_option("--n", genw_o.n, "number of queries");
        s_genw->add_option("--ratios", genw_o.ratios, "regular:high:low class mix");
        s_genw->add_option("--out", genw_o.out, "workload output path");
        add_common(s_genw);
        s_genw->callback([&] { run_gen_workload(genw_o, common); });

        CLI::App* s_tenc = app.add_subcommand("train-encoder",
                                              "train the encoder and distill the corpus");
        s_tenc->add_option("--corpus", tenc_o.corpus, "corpus JSONL");
        s_tenc->add_option("--out", tenc_o.out, "checkpoint path (sidecars: .json, .sc)");
        s_tenc->add_option("--d", tenc_o.d, "embedding width");
        s_tenc->add_option("--heads", tenc_o.heads, "attention heads");
        s_tenc->add_option("--n-distill", tenc_o.n_distill, "distiller iterations");
        s_tenc->add_option("--ffn-mult", tenc_o.ffn_mult, "feed-forward width multiplier");
        s_tenc->add_option("--batch-records", tenc_o.batch_records, "records per slice");
        s_tenc->add_option("--ratio", tenc_o.ratio, "distilled rows per slice record");
        s_tenc->add_option("--epochs", tenc_o.epochs, "training epochs");
        s_tenc->add_option("--lr", tenc_o.lr, "adam learning rate");
        s_tenc->add_option("--lambda", tenc_o.lambda, "L2 regularization weight");
        s_tenc->add_option("--n-neg", tenc_o.n_neg, "negative samples per record");
        s_tenc->add_option("--mmd-sample", tenc_o.mmd_sample, "rows sampled for the MMD term");
        s_tenc->add_option("--train-frac", tenc_o.train_frac, "fraction of slices trained on");
        s_tenc->add_flag("--verbose", tenc_o.verbose, "per-epoch losses on stderr");
        add_common(s_tenc);
        s_tenc->callback([&] { run_train_encoder(tenc_o, common); });

        CLI::App* s_tana = app.add_subcommand("train-analyzer",
                                              "train a per-operator estimator head");
        s_tana->add_option("--corpus", tana_o.corpus, "corpus JSONL");
        s_tana->add_option("--workload", tana_o.workload, "labeled training workload");
        s_tana->add_option("--encoder", tana_o.encoder, "trained encoder checkpoint");
        s_tana->add_option("--out", tana_o.out, "checkpoint path (sidecar: .json)");
        s_tana->add_option("--heads", tana_o.heads, "attention heads");
        s_tana->add_option("--n-cross", tana_o.n_cross, "cross-attention blocks");
        s_tana->add_option("--n-self", tana_o.n_self, "self-attention blocks");
        s_tana->add_option("--ffn-mult", tana_o.ffn_mult, "feed-forward width multiplier");
        s_tana->add_option("--epochs", tana_o.epochs, "training epochs");
        s_tana->add_option("--batch-queries", tana_o.batch_queries, "queries per batch");
        s_tana->add_option("--patience", tana_o.patience, "early-stopping patience");
        s_tana->add_option("--lr", tana_o.lr, "adam learning rate");
        s_tana->add_option("--lambda", tana_o.lambda, "L2 regularization weight");
        s_tana->add_option("--val-frac", tana_o.val_frac, "validation fraction");
        s_tana->add_flag("--verbose", tana_o.verbose, "per-epoch losses on stderr");
        add_common(s_tana);
        s_tana->callback([&] { run_train_analyzer(tana_o, common); });

        CLI::App* s_est = app.add_subcommand("estimate", "estimate one query's cardinality");
        s_est->add_option("--corpus", est_o.corpus, "corpus JSONL");
        s_est->add_option("--encoder", est_o.encoder, "trained encoder checkpoint");
        s_est->add_option("--analyzer", est_o.analyzer, "trained analyzer checkpoint");
        s_est->add_option("--op", est_o.op, "superset | subset | overlap (default: analyzer's)");
        s_est->add_option("--elements", est_o.elements, "comma-separated element names")
            ->required();
        s_est->add_flag("--truth", est_o.truth, "also print the exact count");
        add_common(s_est);
        s_est->callback([&] { run_estimate(est_o); });

        CLI::App* s_bench = app.add_subcommand("bench", "benchmark estimators on a workload");
        s_bench->add_option("--corpus", bench_o.corpus, "corpus JSONL");
        s_bench->add_option("--workload", bench_o.workload, "labeled workload");
        s_bench->add_option("--encoder", bench_o.encoder, "trained encoder checkpoint");
        s_bench->add_option("--analyzer", bench_o.analyzer, "trained analyzer checkpoint");
        s_bench->add_option("--estimators", bench_o.estimators,
                            "comma-separated: ace, independence, sampling");
        s_bench->add_option("--rho", bench_o.rho, "sampling baseline rate");
        s_bench->add_option("--out", bench_o.out, "report path prefix (.json, .csv)");
        s_bench->add_flag("--no-latency", bench_o.no_latency,
                          "skip timing so repeated runs are byte-identical");
        add_common(s_bench);
        s_bench->callback([&] { run_bench(bench_o, common); });

        CLI::App* s_upd = app.add_subcommand("update", "apply inserts/deletes, refresh models");
        s_upd->add_option("--corpus", upd_o.corpus, "corpus JSONL");
        s_upd->add_option("--updates", upd_o.updates,
                          "JSONL updates: {\"op\":\"insert\"|\"delete\",...}");
        s_upd->add_option("--encoder", upd_o.encoder, "trained encoder checkpoint");
        s_upd->add_option("--analyzer", upd_o.analyzer, "analyzer to fine-tune (optional)");
        s_upd->add_option("--workload", upd_o.workload, "base workload for fine-tuning");
        s_upd->add_option("--out", upd_o.out, "updated corpus path (default: --corpus)");
        s_upd->add_option("--fine-tune-epochs", upd_o.fine_tune_epochs, "fine-tuning epochs");
        s_upd->add_option("--lr", upd_o.lr, "fine-tuning learning rate");
        add_common(s_upd);
        s_upd->callback([&] { run_update(upd_o, common); });

        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
