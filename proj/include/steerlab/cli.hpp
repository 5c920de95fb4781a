#pragma once

#include <csignal>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "steerlab/pipeline.hpp"

namespace steerlab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int exit_ok = 0;
inline constexpr int exit_usage = 2;
inline constexpr int exit_dependency = 3;
inline constexpr int exit_runtime = 4;

inline int exit_code_for(ErrorCode c) {
    switch (c) {
    case ErrorCode::UsageError: return exit_usage;
    case ErrorCode::DependencyError: return exit_dependency;
    default: return exit_runtime;
    }
}

inline void print_error(std::ostream& err, const std::string& code, const std::string& message) {
    err << json{{"error", code}, {"message", message}}.dump() << '\n';
}

inline std::vector<double> parse_vector(const std::string& s) {
    std::vector<double> out;
    for (const auto& part : text::split(s, ',')) {
        const auto t = text::trim(part);
        try {
            std::size_t used = 0;
            out.push_back(std::stod(t, &used));
            require(used == t.size(), ErrorCode::UsageError, "bad number '" + t + "'");
        } catch (const std::logic_error&) {
            fail(ErrorCode::UsageError, "bad number '" + t + "' in --vec");
        }
    }
    return out;
}

/// {id, count[, pi]} per line.
inline std::vector<json> read_jsonl(const std::string& path) {
    std::vector<json> out;
    std::istringstream in(read_file(path));
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (text::trim(line).empty()) {
            continue;
        }
        try {
            out.push_back(json::parse(line));
        } catch (const json::parse_error&) {
            throw LineError(ErrorCode::ParseError, n, path + ": malformed JSON");
        }
    }
    return out;
}

struct Options {
    std::string out = "runs/default";
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::optional<std::string> spec;
    std::optional<int> steps;
    std::optional<std::string> layer;
    std::optional<std::string> policy;
    bool all_hooks = false;
    bool live_judge = false;

    // standalone file modes
    std::string dir;
    std::string weights;
    std::string vocab;
    std::string dataset;
    std::string output;
    std::string generations;
    std::string annotations;
    std::string mode = "lenient";
    std::string pred;
    std::string gold;
    std::string vec;
    std::string ruleset;
    int port = 0;
};

/// Defaults, then <out>/config.json if present, then --config, then flags.
inline pipeline::PipelineConfig resolve_config(const Options& o) {
    pipeline::PipelineConfig cfg;
    const auto saved = fs::path(o.out) / pipeline::paths::config;
    if (fs::exists(saved)) {
        cfg = pipeline::PipelineConfig::load(saved.string(), cfg);
    }
    if (!o.config.empty()) {
        cfg = pipeline::PipelineConfig::load(o.config, cfg);
    }
    if (o.seed) {
        cfg.seed = *o.seed;
    }
    if (o.threads) {
        require(*o.threads >= 1, ErrorCode::UsageError, "--threads must be at least 1");
        cfg.threads = *o.threads;
    }
    if (o.spec) {
        cfg.spec = *o.spec;
    }
    if (o.steps) {
        cfg.train.steps = *o.steps;
    }
    if (o.layer) {
        cfg.layer = *o.layer;
    }
    if (o.policy) {
        cfg.sweep.policy = parse_position_policy(*o.policy);
    }
    if (o.all_hooks) {
        cfg.sweep.all_hooks = true;
    }
    if (o.live_judge) {
        cfg.judge.mock = false;
    }
    return cfg;
}

inline void cmd_generate_file(const Options& o, std::ostream& out) {
    const fs::path run_dir(o.out);
    const auto weights_path = o.weights.empty() ? (run_dir / pipeline::paths::weights).string() : o.weights;
    const auto vocab_path = o.vocab.empty() ? (run_dir / pipeline::paths::vocab).string() : o.vocab;
    if (!fs::exists(weights_path) || !fs::exists(vocab_path)) {
        fail(ErrorCode::DependencyError, "model weights or vocab missing; run train first");
    }
    const auto cfg = resolve_config(o);
    const auto w = tinylm::load_weights(weights_path);
    const auto vocab = Vocab::from_json(json::parse(read_file(vocab_path)));
    const auto prompts = corpus::load_jsonl_dataset(o.dataset);
    std::optional<Intervention> iv;
    if (!o.dir.empty()) {
        iv = steering::make_intervention(steering::load_direction(o.dir), w.config);
    }
    auto gen = cfg.gen;
    gen.seed = cfg.seed;
    const auto recs = tinylm::generate_all(w, vocab, prompts, gen, iv ? &*iv : nullptr, cfg.threads);
    std::string lines;
    for (const auto& r : recs) {
        lines += r.to_json().dump() + "\n";
    }
    if (o.output.empty()) {
        out << lines;
    } else {
        write_file(o.output, lines);
    }
}

inline void cmd_eval_bigram_file(const Options& o, std::ostream& out) {
    const auto ann = eval::AnnotationList::load(o.annotations);
    const auto samples = corpus::load_jsonl_dataset(o.generations);
    std::vector<std::string> ids;
    std::vector<std::string> texts;
    for (const auto& s : samples) {
        ids.push_back(s.id.empty() ? std::to_string(s.line) : s.id);
        texts.push_back(s.generation.value_or(""));
    }
    const auto rep = eval::count_corpus(ids, texts, ann, eval::parse_count_mode(o.mode));
    if (o.output.empty()) {
        out << rep.csv();
    } else {
        write_file(o.output, rep.csv());
    }
}

inline void cmd_eval_dsl_file(const Options& o, std::ostream& out) {
    std::vector<std::string> ids;
    std::vector<double> predicted;
    for (const auto& j : read_jsonl(o.pred)) {
        try {
            ids.push_back(j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump());
            predicted.push_back(j.at("count").get<double>());
        } catch (const json::exception& e) {
            fail(ErrorCode::SchemaError, o.pred + ": " + e.what());
        }
    }
    std::map<std::string, eval::GoldLabel> gold;
    for (const auto& j : read_jsonl(o.gold)) {
        try {
            const auto id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
            gold[id] = {j.at("count").get<double>(), j.value("pi", 1.0)};
        } catch (const json::exception& e) {
            fail(ErrorCode::SchemaError, o.gold + ": " + e.what());
        }
    }
    out << eval::dsl_estimate(ids, predicted, gold).to_json().dump() << '\n';
}

inline void cmd_ablate_vec(const Options& o, std::ostream& out) {
    const auto d = steering::load_direction(o.dir);
    const auto r = parse_vector(o.vec);
    std::vector<float> rf(r.begin(), r.end());
    const auto res = ablate(rf, d);
    std::vector<std::string> parts;
    for (const float v : res) {
        parts.push_back(fmt_double(v));
    }
    out << text::join(parts, ",") << '\n';
}

inline volatile std::sig_atomic_t stop_requested = 0;

inline void cmd_mock_judge(const Options& o, std::ostream& out) {
    const auto rules = judge::MockRuleset::from_json(json::parse(read_file(o.ruleset)));
    judge::MockJudgeServer server(rules, "127.0.0.1", o.port);
    out << server.url() << std::endl;
    std::signal(SIGINT, [](int) { stop_requested = 1; });
    std::signal(SIGTERM, [](int) { stop_requested = 1; });
    while (stop_requested == 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
}

inline int cmd_verify(const Options& o, std::ostream& out) {
    const auto m = RunManifest::open(o.out);
    const auto bad = m.verify();
    for (const auto& b : bad) {
        out << "modified: " << b << '\n';
    }
    if (!bad.empty()) {
        fail(ErrorCode::FormatError, std::to_string(bad.size()) + " output file(s) do not match the manifest");
    }
    out << "ok\n";
    return exit_ok;
}

/// Entry point; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"steerlab: residual-stream direction ablation on a synthetic testbed"};
    app.set_version_flag("--version", std::string(tool_version));
    app.require_subcommand(1, 1);
    Options o;

    auto common = [&](CLI::App* c) {
        c->add_option("--out", o.out, "Run directory")->capture_default_str();
        c->add_option("--config", o.config, "Pipeline config JSON overlay");
        c->add_option("--seed", o.seed, "Master seed");
        c->add_option("--threads", o.threads, "Worker threads");
        c->add_option("--spec", o.spec, "Corpus spec JSON or 'default'");
    };

    std::map<std::string, std::function<int(pipeline::Run&)>> stages;
    auto stage = [&](const std::string& name, const std::string& help, std::function<int(pipeline::Run&)> fn) {
        auto* c = app.add_subcommand(name, help);
        common(c);
        stages[name] = std::move(fn);
        return c;
    };

    stage("gen-corpus", "Write the synthetic corpus", [](pipeline::Run& r) {
        pipeline::gen_corpus(r);
        return 0;
    });
    stage("train", "Train the model on the corpus", [&](pipeline::Run& r) {
        pipeline::train_model(r, [&](int step, double loss) {
            if (step % 100 == 0) {
                r.log("step " + std::to_string(step) + " loss " + fmt_double(loss, 4));
            }
        });
        return 0;
    })->add_option("--steps", o.steps, "Training steps");

    auto* gen = app.add_subcommand("generate", "Baseline generations (or a single dataset with --dataset)");
    common(gen);
    gen->add_option("--dataset", o.dataset, "Prompt JSONL; enables file mode");
    gen->add_option("--weights", o.weights, "Weights file (file mode)");
    gen->add_option("--vocab", o.vocab, "Vocab file (file mode)");
    gen->add_option("--dir", o.dir, "Direction file to ablate (file mode)");
    gen->add_option("--output", o.output, "Output JSONL (file mode, default stdout)");

    auto* ex = stage("extract", "Extract a direction at one hook", [](pipeline::Run& r) {
        pipeline::extract(r);
        return 0;
    });
    ex->add_option("--layer", o.layer, "Hook name, e.g. mlp.3");
    ex->add_option("--policy", o.policy, "last-prompt-token or mean-over-prompt");

    auto* sw = stage("sweep", "Layer sweep; selects the run's direction", [](pipeline::Run& r) {
        pipeline::sweep(r);
        return 0;
    });
    sw->add_flag("--all-hooks", o.all_hooks, "Include embed and attention hooks");
    sw->add_option("--policy", o.policy, "last-prompt-token or mean-over-prompt");

    stage("steer-gen", "Generations with the run's direction ablated", [](pipeline::Run& r) {
        pipeline::steer_generate(r);
        return 0;
    });

    auto* eb = app.add_subcommand("eval-bigram", "Attribute-bigram counts (run dir or --generations file)");
    common(eb);
    eb->add_option("--generations", o.generations, "Generation JSONL; enables file mode");
    eb->add_option("--annotations", o.annotations, "Annotation JSON (file mode)");
    eb->add_option("--mode", o.mode, "strict or lenient")->capture_default_str();
    eb->add_option("--output", o.output, "Output CSV (file mode, default stdout)");

    stage("eval-judge", "LLM-judge counts and match verdicts", [](pipeline::Run& r) {
        pipeline::eval_judge(r);
        return 0;
    })->add_flag("--live", o.live_judge, "Use JUDGE_API_URL instead of the mock judge");

    auto* ed = app.add_subcommand("eval-dsl", "DSL estimate (run dir or --pred/--gold files)");
    common(ed);
    ed->add_option("--pred", o.pred, "Predictions JSONL {id, count}; enables file mode");
    ed->add_option("--gold", o.gold, "Gold JSONL {id, count, pi}");

    stage("effect", "Percent-change table for all evaluators", [](pipeline::Run& r) {
        pipeline::effects(r);
        return 0;
    });
    stage("token-delta", "Next-token probability deltas", [](pipeline::Run& r) {
        pipeline::token_delta(r);
        return 0;
    });
    auto* pl = stage("pipeline", "Run every stage", [&](pipeline::Run& r) {
        pipeline::run_all(r, [&](int step, double loss) {
            if (step % 100 == 0) {
                r.log("step " + std::to_string(step) + " loss " + fmt_double(loss, 4));
            }
        });
        return 0;
    });
    pl->add_option("--steps", o.steps, "Training steps");
    pl->add_flag("--live", o.live_judge, "Use JUDGE_API_URL instead of the mock judge");

    auto* av = app.add_subcommand("ablate-vec", "Ablate a direction from one vector");
    av->add_option("--dir", o.dir, "Direction file")->required();
    av->add_option("--vec", o.vec, "Comma-separated vector")->required();

    auto* mj = app.add_subcommand("mock-judge", "Serve the mock judge on loopback until interrupted");
    mj->add_option("--ruleset", o.ruleset, "Ruleset JSON")->required();
    mj->add_option("--port", o.port, "Port (0 picks one)");

    auto* vf = app.add_subcommand("verify", "Check run outputs against the manifest");
    vf->add_option("--out", o.out, "Run directory")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return exit_ok;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return exit_ok;
    } catch (const CLI::CallForVersion& e) {
        out << tool_version << '\n';
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        print_error(err, "UsageError", e.what());
        return exit_usage;
    }

    try {
        auto* sub = app.get_subcommands().front();
        const auto name = sub->get_name();
        if (name == "ablate-vec") {
            cmd_ablate_vec(o, out);
            return exit_ok;
        }
        if (name == "mock-judge") {
            cmd_mock_judge(o, out);
            return exit_ok;
        }
        if (name == "verify") {
            return cmd_verify(o, out);
        }
        if (name == "generate" && !o.dataset.empty()) {
            cmd_generate_file(o, out);
            return exit_ok;
        }
        if (name == "eval-bigram" && !o.generations.empty()) {
            require(!o.annotations.empty(), ErrorCode::UsageError, "--annotations is required with --generations");
            cmd_eval_bigram_file(o, out);
            return exit_ok;
        }
        if (name == "eval-dsl" && !o.pred.empty()) {
            require(!o.gold.empty(), ErrorCode::UsageError, "--gold is required with --pred");
            cmd_eval_dsl_file(o, out);
            return exit_ok;
        }
        if (name != "gen-corpus" && name != "pipeline" && !fs::exists(fs::path(o.out) / RunManifest::file_name)) {
            fail(ErrorCode::DependencyError, "no run in " + o.out + "; run gen-corpus or pipeline first");
        }
        const auto cfg = resolve_config(o);
        RunLock lock(o.out);
        pipeline::Run run(o.out, cfg, [&err](const std::string& m) { err << "[steerlab] " << m << '\n'; });
        if (name == "generate") {
            pipeline::generate_baseline(run);
            return exit_ok;
        }
        if (name == "eval-bigram") {
            pipeline::eval_bigram(run);
            return exit_ok;
        }
        if (name == "eval-dsl") {
            pipeline::eval_dsl(run);
            return exit_ok;
        }
        return stages.at(name)(run);
    } catch (const Error& e) {
        print_error(err, std::string(to_string(e.code())), e.what());
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        print_error(err, "RuntimeError", e.what());
        return exit_runtime;
    }
}

} // namespace steerlab::cli
