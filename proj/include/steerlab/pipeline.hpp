#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "steerlab/corpus.hpp"
#include "steerlab/error.hpp"
#include "steerlab/eval.hpp"
#include "steerlab/generate.hpp"
#include "steerlab/judge.hpp"
#include "steerlab/manifest.hpp"
#include "steerlab/steering.hpp"
#include "steerlab/train.hpp"
#include "steerlab/weights_io.hpp"

namespace steerlab::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

struct JudgeSettings {
    bool mock = true;  ///< serve a loopback mock judge built from the corpus wordlist
    judge::JudgeConfig client;
    double match_threshold = 0.8;
};

struct PipelineConfig {
    std::uint64_t seed = 7;
    std::string spec = "default";  ///< corpus spec path or "default"
    tinylm::ModelConfig model;
    tinylm::TrainConfig train;
    tinylm::GenerationConfig gen;
    steering::SweepConfig sweep;
    std::string layer;             ///< extract: hook to use instead of sweeping
    std::size_t standard_size = 1000;
    double gold_fraction = 0.2;    ///< inclusion probability for gold labels in the DSL stage
    std::size_t delta_prompts = 60;
    std::size_t delta_top_k = 20;
    int delta_max_new_tokens = 64;
    int resamples = eval::default_resamples;
    JudgeSettings judge;
    int threads = 1;

    PipelineConfig() {
        train.steps = 1500;
        gen.temperature = 0.75;
        gen.max_new_tokens = 256;
        gen.batch_size = 3;
    }

    json to_json() const {
        return {{"seed", seed},
                {"spec", spec},
                {"model", model.to_json()},
                {"train", train.to_json()},
                {"generation", gen.to_json()},
                {"sweep", sweep.to_json()},
                {"layer", layer},
                {"standard_size", standard_size},
                {"gold_fraction", gold_fraction},
                {"delta_prompts", delta_prompts},
                {"delta_top_k", delta_top_k},
                {"delta_max_new_tokens", delta_max_new_tokens},
                {"resamples", resamples},
                {"judge",
                 {{"mock", judge.mock}, {"match_threshold", judge.match_threshold}, {"client", judge.client.to_json()}}}};
    }

    static PipelineConfig from_json(const json& j, PipelineConfig base) {
        try {
            base.seed = j.value("seed", base.seed);
            base.spec = j.value("spec", base.spec);
            if (j.contains("model")) {
                base.model = tinylm::ModelConfig::from_json(j.at("model"), base.model);
            }
            if (j.contains("train")) {
                base.train = tinylm::TrainConfig::from_json(j.at("train"), base.train);
            }
            if (j.contains("generation")) {
                base.gen = tinylm::GenerationConfig::from_json(j.at("generation"), base.gen);
            }
            if (j.contains("sweep")) {
                base.sweep = steering::SweepConfig::from_json(j.at("sweep"), base.sweep);
            }
            base.layer = j.value("layer", base.layer);
            base.standard_size = j.value("standard_size", base.standard_size);
            base.gold_fraction = j.value("gold_fraction", base.gold_fraction);
            base.delta_prompts = j.value("delta_prompts", base.delta_prompts);
            base.delta_top_k = j.value("delta_top_k", base.delta_top_k);
            base.delta_max_new_tokens = j.value("delta_max_new_tokens", base.delta_max_new_tokens);
            base.resamples = j.value("resamples", base.resamples);
            if (j.contains("judge")) {
                const auto& jj = j.at("judge");
                base.judge.mock = jj.value("mock", base.judge.mock);
                base.judge.match_threshold = jj.value("match_threshold", base.judge.match_threshold);
                if (jj.contains("client")) {
                    base.judge.client = judge::JudgeConfig::from_json(jj.at("client"), base.judge.client);
                }
            }
        } catch (const json::exception& e) {
            fail(ErrorCode::SpecError, std::string("pipeline config: ") + e.what());
        }
        require(base.gold_fraction > 0.0 && base.gold_fraction <= 1.0, ErrorCode::SpecError,
                "gold_fraction must be in (0, 1]");
        require(base.standard_size >= 1, ErrorCode::SpecError, "standard_size must be positive");
        return base;
    }

    static PipelineConfig load(const std::string& path) { return load(path, PipelineConfig{}); }

    static PipelineConfig load(const std::string& path, PipelineConfig base) {
        json j;
        try {
            j = json::parse(read_file(path));
        } catch (const json::parse_error& e) {
            fail(ErrorCode::ParseError, path + ": " + e.what());
        }
        return from_json(j, std::move(base));
    }
};

// ---------------------------------------------------------------------------
// Run directory

namespace paths {
inline const char* config = "config.json";
inline const char* spec = "corpus/spec.json";
inline const char* train = "corpus/train.jsonl";
inline const char* instruct = "corpus/instruct.jsonl";
inline const char* eval = "corpus/eval.jsonl";
inline const char* heldout = "corpus/heldout.jsonl";
inline const char* transfer = "corpus/transfer.jsonl";
inline const char* bias = "corpus/bias.jsonl";
inline const char* benign = "corpus/benign.jsonl";
inline const char* wordlist = "corpus/wordlist.txt";
inline const char* annotations = "corpus/annotations.json";
inline const char* vocab = "model/vocab.json";
inline const char* weights = "model/weights.tlm";
inline const char* curve = "model/train_curve.csv";
inline const char* sweep = "direction/sweep.csv";
inline const char* sweep_generations = "direction/sweep_generations.jsonl";
inline const char* direction = "direction/direction.json";
inline const char* perplexity = "eval/perplexity.csv";
inline const char* rates = "eval/rates.csv";
inline const char* match = "eval/match.csv";
inline const char* dsl = "eval/dsl.csv";
inline const char* effects = "eval/effects.csv";
inline const char* delta_csv = "eval/token_delta.csv";
inline const char* delta_svg = "eval/token_delta.svg";
inline const char* judge_cache = "judge_cache";
} // namespace paths

inline const std::vector<std::string> datasets = {"eval", "transfer"};
inline const std::vector<std::string> conditions = {"baseline", "steered"};

inline std::string gen_path(const std::string& condition, const std::string& dataset) {
    return "gen/" + condition + "_" + dataset + ".jsonl";
}

inline std::string bigram_path(const std::string& condition, const std::string& dataset) {
    return "eval/bigram_" + condition + "_" + dataset + ".csv";
}

inline std::string judge_path(const std::string& condition, const std::string& dataset) {
    return "eval/judge_" + condition + "_" + dataset + ".csv";
}

inline std::string gold_path(const std::string& condition, const std::string& dataset) {
    return "eval/gold_" + condition + "_" + dataset + ".jsonl";
}

using Logger = std::function<void(const std::string&)>;

inline void log_stderr(const std::string& msg) { std::cerr << "[steerlab] " << msg << '\n'; }

/// A run directory plus its manifest; stages read their inputs through it.
class Run {
public:
    Run(fs::path dir, PipelineConfig config, Logger log = log_stderr)
        : dir_(std::move(dir)), config_(std::move(config)), log_(std::move(log)), manifest_(RunManifest::open(dir_)) {
        fs::create_directories(dir_);
    }

    const fs::path& dir() const { return dir_; }
    const PipelineConfig& config() const { return config_; }
    RunManifest& manifest() { return manifest_; }
    void log(const std::string& msg) const { log_(msg); }

    std::string path(const std::string& rel) const { return (dir_ / rel).string(); }

    void write(const std::string& rel, std::string_view contents) const {
        fs::create_directories((dir_ / rel).parent_path());
        write_file(path(rel), contents);
    }

    void record(const std::string& stage, const std::vector<std::string>& outputs, json stage_config = json::object()) {
        const auto now = steering::utc_timestamp();
        manifest_.set_seed("seed", config_.seed);
        manifest_.record(stage, outputs, std::move(stage_config), now);
        manifest_.save(now);
    }

    void need(const std::string& stage) const { manifest_.require_stage(stage); }

    std::vector<PromptSample> dataset(const std::string& rel) const { return corpus::load_jsonl_dataset(path(rel)); }

    Vocab vocab() const {
        try {
            return Vocab::from_json(json::parse(read_file(path(paths::vocab))));
        } catch (const json::parse_error& e) {
            fail(ErrorCode::FormatError, std::string(paths::vocab) + ": " + e.what());
        }
    }

    tinylm::Weights<float> weights() const { return tinylm::load_weights(path(paths::weights)); }

    eval::AnnotationList annotations() const { return eval::AnnotationList::load(path(paths::annotations)); }

    std::set<std::string> wordlist() const { return corpus::load_wordlist(path(paths::wordlist)); }

private:
    fs::path dir_;
    PipelineConfig config_;
    Logger log_;
    RunManifest manifest_;
};

// ---------------------------------------------------------------------------
// Stages

inline void gen_corpus(Run& run) {
    const auto& cfg = run.config();
    const auto spec = corpus::load_spec(cfg.spec);
    const auto c = corpus::gen_synthetic_corpus(spec, cfg.seed);
    run.write(paths::config, cfg.to_json().dump(2) + "\n");
    run.write(paths::spec, spec.to_json().dump(2) + "\n");
    run.write(paths::train, corpus::dataset_to_jsonl(c.train));
    run.write(paths::instruct, corpus::dataset_to_jsonl(c.instruct));
    run.write(paths::eval, corpus::dataset_to_jsonl(c.eval));
    run.write(paths::heldout, corpus::dataset_to_jsonl(c.heldout));
    run.write(paths::transfer, corpus::dataset_to_jsonl(c.transfer));
    run.write(paths::bias, corpus::dataset_to_jsonl(c.bias));
    run.write(paths::benign, corpus::dataset_to_jsonl(c.benign_eval));
    run.write(paths::wordlist, corpus::wordlist_to_text(c.wordlist));
    run.write(paths::annotations, c.annotations.to_json().dump(2) + "\n");
    run.record("gen-corpus",
               {paths::config, paths::spec, paths::train, paths::instruct, paths::eval, paths::heldout, paths::transfer,
                paths::bias, paths::benign, paths::wordlist, paths::annotations},
               {{"spec", cfg.spec}, {"seed", cfg.seed}});
    run.log("corpus: " + std::to_string(c.train.size()) + " descriptions, " + std::to_string(c.instruct.size()) +
            " instructions, " + std::to_string(c.eval.size()) + " eval prompts");
}

inline void train_model(Run& run, const std::function<void(int, double)>& progress = {}) {
    run.need("gen-corpus");
    const auto& cfg = run.config();
    const auto spec = corpus::load_spec(run.path(paths::spec));
    auto train = run.dataset(paths::train);
    const auto instruct = run.dataset(paths::instruct);
    train.insert(train.end(), instruct.begin(), instruct.end());

    std::vector<std::string> texts;
    for (const auto& s : train) {
        texts.push_back(s.prompt);
        texts.push_back(s.generation.value_or(""));
    }
    for (const auto* rel : {paths::eval, paths::heldout, paths::transfer, paths::bias, paths::benign}) {
        for (const auto& s : run.dataset(rel)) {
            texts.push_back(s.prompt);
        }
    }
    const auto vocab = build_tokenizer(texts, spec.markers());
    std::vector<tinylm::Sequence> seqs;
    seqs.reserve(train.size());
    for (const auto& s : train) {
        seqs.push_back(training_sequence(vocab, s));
    }
    auto model = cfg.model;
    model.vocab_size = static_cast<int>(vocab.size());
    run.log("training " + std::to_string(cfg.train.steps) + " steps on " + std::to_string(seqs.size()) + " sequences");
    const auto result = tinylm::train(model, cfg.train, seqs, cfg.seed, progress);
    run.log("loss " + fmt_double(result.initial_loss, 4) + " -> " + fmt_double(result.final_loss, 4));
    run.write(paths::vocab, vocab.to_json().dump(2) + "\n");
    tinylm::save_weights(run.path(paths::weights), result.weights);
    run.write(paths::curve, result.curve_csv());
    run.record("train", {paths::vocab, paths::weights, paths::curve},
               {{"model", result.weights.config.to_json()},
                {"train", cfg.train.to_json()},
                {"initial_loss", result.initial_loss},
                {"final_loss", result.final_loss}});
}

inline void write_generations(Run& run, const std::string& rel, const std::vector<tinylm::GenerationRecord>& recs) {
    std::string out;
    for (const auto& r : recs) {
        out += r.to_json().dump() + "\n";
    }
    run.write(rel, out);
}

/// Baseline generations for the eval and transfer prompt sets.
inline void generate_baseline(Run& run) {
    run.need("train");
    const auto& cfg = run.config();
    const auto w = run.weights();
    const auto vocab = run.vocab();
    std::vector<std::string> outs;
    for (const auto& ds : datasets) {
        const auto prompts = run.dataset(ds == "eval" ? paths::eval : paths::transfer);
        auto gen = cfg.gen;
        gen.seed = derive_seed(cfg.seed, ds == "eval" ? 0x6531 : 0x7431);
        const auto recs = tinylm::generate_all(w, vocab, prompts, gen, nullptr, cfg.threads);
        write_generations(run, gen_path("baseline", ds), recs);
        outs.push_back(gen_path("baseline", ds));
        run.log("baseline " + ds + ": " + std::to_string(recs.size()) + " generations");
    }
    run.record("generate", outs, {{"generation", cfg.gen.to_json()}});
}

inline steering::ContrastiveDataset contrastive(const Run& run) {
    const auto& cfg = run.config();
    steering::ContrastiveDataset data;
    auto standard = corpus::filter_benign(run.dataset(paths::instruct), run.wordlist());
    require(!standard.empty(), ErrorCode::EmptyDataset, "no benign instruction samples");
    if (standard.size() > cfg.standard_size) {
        standard.resize(cfg.standard_size);
    }
    data.standard = std::move(standard);
    data.bias = run.dataset(paths::bias);
    data.source = "synthetic";
    return data;
}

inline json dataset_hashes(const steering::ContrastiveDataset& d) {
    return {{"standard", sha256_hex(corpus::dataset_to_jsonl(d.standard))},
            {"bias", sha256_hex(corpus::dataset_to_jsonl(d.bias))}};
}

inline void save_direction(Run& run, SteeringDirection d, const tinylm::Weights<float>& w,
                           const steering::ContrastiveDataset& data) {
    d.metadata["model_hash"] = tinylm::weights_hash(w);
    d.metadata["dataset_hashes"] = dataset_hashes(data);
    d.metadata["created_at"] = steering::utc_timestamp();
    fs::create_directories(run.dir() / "direction");
    steering::save_direction(run.path(paths::direction), d);
}

/// Direction at an explicit hook (config `layer`, default the last PostMlp).
inline void extract(Run& run) {
    run.need("train");
    const auto& cfg = run.config();
    const auto w = run.weights();
    const auto vocab = run.vocab();
    const auto data = contrastive(run);
    data.validate();
    const auto layer = cfg.layer.empty() ? HookPoint{HookPoint::Kind::PostMlp, w.config.n_layers - 1}
                                         : HookPoint::parse(cfg.layer);
    const auto bias = steering::collect_activations(w, vocab, data.bias, cfg.sweep.policy, cfg.threads);
    const auto standard = steering::collect_activations(w, vocab, data.standard, cfg.sweep.policy, cfg.threads);
    const auto d = steering::estimate_direction(bias, standard, layer, cfg.sweep.alpha);
    save_direction(run, d, w, data);
    run.record("extract", {paths::direction}, {{"layer", layer.name()}, {"position_policy", to_string(cfg.sweep.policy)}});
    run.log("direction extracted at " + layer.name());
}

/// Layer sweep; the selected candidate becomes the run's direction.
inline steering::SweepResult sweep(Run& run) {
    run.need("train");
    const auto& cfg = run.config();
    const auto w = run.weights();
    const auto vocab = run.vocab();
    const auto data = contrastive(run);
    auto sc = cfg.sweep;
    sc.gen = cfg.gen;
    sc.gen.seed = derive_seed(cfg.seed, 0x5357);
    sc.threads = cfg.threads;
    const auto result = steering::sweep_layers(w, vocab, data, run.dataset(paths::heldout), run.dataset(paths::benign),
                                               run.annotations(), sc);
    run.write(paths::sweep, result.csv());
    std::string gens;
    for (const auto& c : result.ranked) {
        for (const auto& g : c.generations) {
            gens += json{{"layer", c.layer.name()}, {"generation", g}}.dump() + "\n";
        }
    }
    run.write(paths::sweep_generations, gens);
    save_direction(run, *result.best().direction, w, data);
    run.record("sweep", {paths::sweep, paths::sweep_generations, paths::direction},
               {{"sweep", sc.to_json()}, {"selected", result.best().layer.name()}});
    for (const auto& c : result.ranked) {
        run.log("sweep " + c.layer.name() + ": rate " + fmt_double(c.attr_rate, 4) + " (baseline " +
                fmt_double(result.baseline_rate, 4) + "), perplexity ratio " + fmt_double(c.perplexity_ratio, 4) +
                (c.selected ? "  [selected]" : c.disqualified ? "  [disqualified]" : ""));
    }
    return result;
}

inline Intervention load_intervention(const Run& run, const tinylm::Weights<float>& w) {
    if (!fs::exists(run.path(paths::direction))) {
        fail(ErrorCode::DependencyError, "no direction in " + run.dir().string() + "; run extract or sweep first");
    }
    return steering::make_intervention(steering::load_direction(run.path(paths::direction)), w.config);
}

/// Steered generations with the run's direction, plus baseline/steered benign perplexity.
inline void steer_generate(Run& run) {
    run.need("train");
    const auto& cfg = run.config();
    const auto w = run.weights();
    const auto vocab = run.vocab();
    const auto iv = load_intervention(run, w);
    std::vector<std::string> outs;
    for (const auto& ds : datasets) {
        const auto prompts = run.dataset(ds == "eval" ? paths::eval : paths::transfer);
        auto gen = cfg.gen;
        gen.seed = derive_seed(cfg.seed, ds == "eval" ? 0x6531 : 0x7431);
        const auto recs = tinylm::generate_all(w, vocab, prompts, gen, &iv, cfg.threads);
        write_generations(run, gen_path("steered", ds), recs);
        outs.push_back(gen_path("steered", ds));
        run.log("steered " + ds + ": " + std::to_string(recs.size()) + " generations");
    }
    const auto benign = run.dataset(paths::benign);
    const double p0 = tinylm::perplexity(w, vocab, benign, nullptr, cfg.threads);
    const double p1 = tinylm::perplexity(w, vocab, benign, &iv, cfg.threads);
    std::ostringstream os;
    os << "condition,perplexity,ratio\n"
       << "baseline," << fmt_double(p0) << ",1\n"
       << "steered," << fmt_double(p1) << ',' << fmt_double(p1 / p0) << '\n';
    run.write(paths::perplexity, os.str());
    outs.push_back(paths::perplexity);
    run.record("steer-gen", outs, {{"intervention", iv.id()}});
    run.log("benign perplexity " + fmt_double(p0, 4) + " -> " + fmt_double(p1, 4));
}

struct Texts {
    std::vector<std::string> ids;
    std::vector<std::string> texts;
    std::vector<std::string> references;
    std::vector<std::string> labels;
};

inline Texts load_texts(const Run& run, const std::string& rel) {
    Texts t;
    for (const auto& s : run.dataset(rel)) {
        t.ids.push_back(s.id);
        t.texts.push_back(s.generation.value_or(""));
        t.references.push_back(s.reference.value_or(""));
        t.labels.push_back(s.label.value_or(""));
    }
    return t;
}

inline void require_generations(const Run& run) {
    run.need("generate");
    run.need("steer-gen");
}

inline void eval_bigram(Run& run) {
    require_generations(run);
    const auto& cfg = run.config();
    const auto ann = run.annotations();
    std::vector<std::string> outs;
    std::vector<double> counts;
    std::vector<std::string> keys;
    for (const auto& cond : conditions) {
        for (const auto& ds : datasets) {
            const auto t = load_texts(run, gen_path(cond, ds));
            const auto rep = eval::count_corpus(t.ids, t.texts, ann, eval::CountMode::Lenient);
            run.write(bigram_path(cond, ds), rep.csv());
            outs.push_back(bigram_path(cond, ds));
            const auto c = rep.counts();
            for (std::size_t i = 0; i < c.size(); ++i) {
                counts.push_back(c[i]);
                keys.push_back(cond + "/" + ds + "/" + t.labels[i]);
            }
            run.log("bigram " + cond + " " + ds + ": " + fmt_double(rep.rate(), 4) + " per generation");
        }
    }
    run.write(paths::rates, eval::rates_csv(eval::aggregate_rates(counts, keys, derive_seed(cfg.seed, 0x5241),
                                                                  cfg.resamples)));
    outs.push_back(paths::rates);
    run.record("eval-bigram", outs, {{"mode", "lenient"}});
}

/// Judge client for the run; in mock mode `server` receives the loopback server that backs it.
inline judge::JudgeClient make_judge(const Run& run, std::unique_ptr<judge::MockJudgeServer>& server) {
    const auto& js = run.config().judge;
    auto cc = js.client;
    if (js.mock) {
        judge::MockRuleset rules;
        rules.targets = run.wordlist();
        rules.match_threshold = js.match_threshold;
        server = std::make_unique<judge::MockJudgeServer>(rules);
        cc.url = server->url();
        cc.model = "mock";
        cc.backoff_base_s = 0.0;
    } else {
        cc = judge::JudgeConfig::from_env(cc);
    }
    if (cc.cache_dir.empty()) {
        cc.cache_dir = run.path(paths::judge_cache);
    }
    return judge::JudgeClient(cc, [&run](const std::string& m) { run.log("judge: " + m); });
}

inline std::string judge_csv(const Texts& t, const judge::CorpusResult<judge::JudgeAnnotation>& r) {
    std::ostringstream os;
    os << "id,count,spans\n";
    for (std::size_t i = 0; i < t.ids.size(); ++i) {
        os << t.ids[i] << ',';
        if (r.items[i]) {
            os << r.items[i]->count << ',' << text::join(r.items[i]->spans, ";");
        } else {
            os << ',';
        }
        os << '\n';
    }
    return os.str();
}

inline void eval_judge(Run& run) {
    require_generations(run);
    std::unique_ptr<judge::MockJudgeServer> server;
    auto client = make_judge(run, server);
    std::vector<std::string> outs;
    std::ostringstream match;
    match << "condition,n,matches,rate,failures\n";
    for (const auto& cond : conditions) {
        for (const auto& ds : datasets) {
            const auto t = load_texts(run, gen_path(cond, ds));
            std::vector<std::string> texts = t.texts;
            for (auto& s : texts) {
                if (text::trim(s).empty()) {
                    s = ".";  // the judge rejects empty text; an empty generation has no mentions
                }
            }
            const auto r = judge::annotate_corpus(client, texts, judge::Attribute::Body);
            run.write(judge_path(cond, ds), judge_csv(t, r));
            outs.push_back(judge_path(cond, ds));
            if (ds == "eval") {
                const auto m = judge::match_corpus(client, t.references, texts);
                std::size_t yes = 0;
                for (const auto& v : m.items) {
                    yes += v && v->matches ? 1 : 0;
                }
                const auto n = m.succeeded();
                match << cond << ',' << n << ',' << yes << ','
                      << fmt_double(n == 0 ? 0.0 : static_cast<double>(yes) / static_cast<double>(n)) << ','
                      << m.failures.size() << '\n';
            }
            run.log("judge " + cond + " " + ds + ": " + std::to_string(r.succeeded()) + " annotated, " +
                    std::to_string(r.failures.size()) + " failed");
        }
    }
    run.write(paths::match, match.str());
    outs.push_back(paths::match);
    run.record("eval-judge", outs, {{"judge", run.config().judge.mock ? "mock" : client.config().model}});
}

/// Reads `id,count,spans` CSV rows; items with an empty count are skipped.
inline std::map<std::string, double> read_count_csv(const std::string& path) {
    std::map<std::string, double> out;
    std::istringstream in(read_file(path));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        const auto cols = text::split(line, ',');
        if (cols.size() >= 2 && !cols[1].empty()) {
            out[cols[0]] = std::stod(cols[1]);
        }
    }
    return out;
}

/// Gold labels (exact wordlist counts) on an inclusion-probability sample, combined with judge
/// predictions by the DSL estimator.
inline void eval_dsl(Run& run) {
    require_generations(run);
    run.need("eval-judge");
    const auto& cfg = run.config();
    const auto wordlist = run.wordlist();
    std::vector<std::string> outs;
    std::ostringstream os;
    os << "condition,dataset,point,stderr,ci_lo,ci_hi,n_total,n_gold\n";
    std::uint64_t stream = 0;
    for (const auto& cond : conditions) {
        for (const auto& ds : datasets) {
            const auto t = load_texts(run, gen_path(cond, ds));
            const auto pred = read_count_csv(run.path(judge_path(cond, ds)));
            std::vector<std::string> ids;
            std::vector<double> predicted;
            for (const auto& id : t.ids) {
                if (const auto it = pred.find(id); it != pred.end()) {
                    ids.push_back(id);
                    predicted.push_back(it->second);
                }
            }
            std::mt19937_64 rng(derive_seed(cfg.seed, 0x4C00 + stream++));
            std::map<std::string, eval::GoldLabel> gold;
            std::string gold_lines;
            for (std::size_t i = 0; i < t.ids.size(); ++i) {
                if (uniform01(rng) < cfg.gold_fraction && pred.count(t.ids[i]) != 0) {
                    const auto c = static_cast<double>(eval::count_words(t.texts[i], wordlist));
                    gold[t.ids[i]] = {c, cfg.gold_fraction};
                    gold_lines += json{{"id", t.ids[i]}, {"count", c}, {"pi", cfg.gold_fraction}}.dump() + "\n";
                }
            }
            run.write(gold_path(cond, ds), gold_lines);
            outs.push_back(gold_path(cond, ds));
            const auto e = eval::dsl_estimate(ids, predicted, gold);
            os << cond << ',' << ds << ',' << fmt_double(e.point) << ',' << fmt_double(e.stderr_) << ','
               << fmt_double(e.ci.lo) << ',' << fmt_double(e.ci.hi) << ',' << e.n_total << ',' << e.n_gold << '\n';
        }
    }
    run.write(paths::dsl, os.str());
    outs.push_back(paths::dsl);
    run.record("eval-dsl", outs, {{"gold_fraction", cfg.gold_fraction}});
}

inline std::map<std::pair<std::string, std::string>, eval::DslEstimate> read_dsl_csv(const std::string& path) {
    std::map<std::pair<std::string, std::string>, eval::DslEstimate> out;
    std::istringstream in(read_file(path));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        const auto c = text::split(line, ',');
        require(c.size() == 8, ErrorCode::FormatError, path + ": malformed row");
        eval::DslEstimate e;
        e.point = std::stod(c[2]);
        e.stderr_ = std::stod(c[3]);
        e.ci = {std::stod(c[4]), std::stod(c[5])};
        e.n_total = std::stoul(c[6]);
        e.n_gold = std::stoul(c[7]);
        out[{c[0], c[1]}] = e;
    }
    return out;
}

/// Paired count vectors over ids present in both conditions.
inline std::pair<std::vector<double>, std::vector<double>> paired(const std::map<std::string, double>& a,
                                                                  const std::map<std::string, double>& b) {
    std::pair<std::vector<double>, std::vector<double>> out;
    for (const auto& [id, v] : a) {
        if (const auto it = b.find(id); it != b.end()) {
            out.first.push_back(v);
            out.second.push_back(it->second);
        }
    }
    return out;
}

inline std::vector<eval::EffectEstimate> effects(Run& run) {
    run.need("eval-bigram");
    run.need("eval-judge");
    run.need("eval-dsl");
    const auto& cfg = run.config();
    std::vector<eval::EffectEstimate> rows;
    const auto dsl = read_dsl_csv(run.path(paths::dsl));
    std::uint64_t stream = 0;
    for (const auto& ds : datasets) {
        const auto [bb, bs] = paired(read_count_csv(run.path(bigram_path("baseline", ds))),
                                     read_count_csv(run.path(bigram_path("steered", ds))));
        rows.push_back(eval::percent_decrease(bb, bs, eval::Method::Bigram, derive_seed(cfg.seed, 0xEF00 + stream++),
                                              ds, cfg.resamples));
        const auto [jb, js] = paired(read_count_csv(run.path(judge_path("baseline", ds))),
                                     read_count_csv(run.path(judge_path("steered", ds))));
        rows.push_back(eval::percent_decrease(jb, js, eval::Method::Judge, derive_seed(cfg.seed, 0xEF00 + stream++),
                                              ds, cfg.resamples));
        rows.push_back(eval::percent_decrease(dsl.at({"baseline", ds}), dsl.at({"steered", ds}), ds));
    }
    run.write(paths::effects, eval::effects_csv(rows));
    run.record("effect", {paths::effects});
    for (const auto& r : rows) {
        run.log("effect " + to_string(r.method) + " " + r.dataset + ": " + fmt_double(r.point, 4) + "% [" +
                fmt_double(r.ci.lo, 4) + ", " + fmt_double(r.ci.hi, 4) + "]");
    }
    return rows;
}

/// Eval prompts used for the token-probability table: keywords prompts when the corpus spec has them,
/// spread evenly over groups.
inline std::vector<PromptSample> delta_prompts(const Run& run) {
    auto prompts = run.dataset(paths::eval);
    // The keywords prompt asks for characteristics directly, so attribute tokens carry mass
    // at many steps; other specs fall back to all eval prompts.
    const auto spec = corpus::load_spec(run.path(paths::spec));
    for (const auto& t : spec.templates) {
        if (t.name == "keywords" && t.role == corpus::Template::Role::Eval) {
            std::vector<PromptSample> kw;
            for (const auto& p : prompts) {
                if (p.prompt == corpus::detail::fill_prompt(spec, t)) {
                    kw.push_back(p);
                }
            }
            if (!kw.empty()) {
                prompts = std::move(kw);
            }
        }
    }
    std::vector<PromptSample> subset;
    const std::size_t n = std::min(run.config().delta_prompts, prompts.size());
    for (std::size_t k = 0; k < n; ++k) {
        subset.push_back(prompts[k * prompts.size() / n]);
    }
    return subset;
}

inline eval::DeltaTable token_delta(Run& run) {
    run.need("train");
    const auto& cfg = run.config();
    const auto w = run.weights();
    const auto vocab = run.vocab();
    const auto iv = load_intervention(run, w);
    const auto subset = delta_prompts(run);
    const auto n = subset.size();
    const auto t = eval::token_prob_delta(w, vocab, iv, subset, cfg.delta_top_k, cfg.delta_max_new_tokens, cfg.threads);
    run.write(paths::delta_csv, t.csv());
    run.write(paths::delta_svg, eval::delta_svg(t));
    run.record("token-delta", {paths::delta_csv, paths::delta_svg}, {{"prompts", n}, {"top_k", cfg.delta_top_k}});
    return t;
}

/// Every stage in order, sweeping for the direction.
inline void run_all(Run& run, const std::function<void(int, double)>& progress = {}) {
    gen_corpus(run);
    train_model(run, progress);
    generate_baseline(run);
    sweep(run);
    steer_generate(run);
    eval_bigram(run);
    eval_judge(run);
    eval_dsl(run);
    effects(run);
    token_delta(run);
}

} // namespace steerlab::pipeline
