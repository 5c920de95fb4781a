// Acceptance suite: one PASS/FAIL line per criterion.
//
//   steerlab_acceptance --work DIR [--threads N]
//
// Criteria 6-10 run the full pipeline twice (DIR/run_a, DIR/run_b) with the same seed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "steerlab/eval.hpp"
#include "steerlab/pipeline.hpp"
#include "steerlab/steering.hpp"
#include "steerlab/train.hpp"

namespace fs = std::filesystem;
using namespace steerlab;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;

    void check(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail += (detail.empty() ? "" : "; ") + what;
        }
    }
    void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v, int p = 4) { return fmt_double(v, p); }

double norm(const std::vector<float>& v) {
    double s = 0.0;
    for (float x : v) {
        s += static_cast<double>(x) * x;
    }
    return std::sqrt(s);
}

double dot(const std::vector<float>& a, const std::vector<float>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += static_cast<double>(a[i]) * b[i];
    }
    return s;
}

// Vectors whose scale spans four orders of magnitude.
std::vector<float> random_residual(std::mt19937_64& rng, std::size_t d) {
    std::normal_distribution<double> n01;
    std::uniform_real_distribution<double> logscale(-2.0, 2.0);
    const double s = std::pow(10.0, logscale(rng));
    std::vector<float> v(d);
    for (auto& x : v) {
        x = static_cast<float>(s * n01(rng));
    }
    return v;
}

SteeringDirection random_direction(std::mt19937_64& rng, std::size_t d, double alpha) {
    SteeringDirection dir;
    std::vector<float> u;
    do {
        u = random_residual(rng, d);
    } while (norm(u) < 1e-3);
    const double n = norm(u);
    for (auto& x : u) {
        x = static_cast<float>(x / n);
    }
    dir.u = u;
    dir.alpha = alpha;
    return dir;
}

// ---------------------------------------------------------------------------

Outcome projection_suite() {
    Outcome o;
    const auto t0 = Clock::now();
    std::mt19937_64 rng(101);
    std::uniform_real_distribution<double> unif(-3.0, 3.0);
    std::uniform_real_distribution<double> alpha02(0.0, 2.0);
    constexpr int trials = 1000;
    for (std::size_t d : {std::size_t{4}, std::size_t{64}}) {
        int idem = 0, orth = 0, contr = 0, lin = 0;
        for (int t = 0; t < trials; ++t) {
            const auto dir = random_direction(rng, d, 1.0);
            const auto r = random_residual(rng, d);
            const double nr = norm(r);
            const auto once = ablate(r, dir);
            const auto twice = ablate(once, dir);
            double diff = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                diff = std::max(diff, std::abs(static_cast<double>(twice[i]) - once[i]));
            }
            idem += diff <= 1e-5 * nr ? 1 : 0;
            orth += std::abs(dot(dir.u, once)) <= 1e-5 * nr ? 1 : 0;
        }
        for (int t = 0; t < trials; ++t) {
            const auto dir = random_direction(rng, d, alpha02(rng));
            const auto r = random_residual(rng, d);
            contr += norm(ablate(r, dir)) <= norm(r) * (1.0 + 1e-6) ? 1 : 0;
        }
        for (int t = 0; t < trials; ++t) {
            const auto dir = random_direction(rng, d, alpha02(rng));
            const auto r1 = random_residual(rng, d);
            const auto r2 = random_residual(rng, d);
            const double a = unif(rng), b = unif(rng);
            std::vector<float> mix(d);
            for (std::size_t i = 0; i < d; ++i) {
                mix[i] = static_cast<float>(a * r1[i] + b * r2[i]);
            }
            const auto lhs = ablate(mix, dir);
            const auto p1 = ablate(r1, dir);
            const auto p2 = ablate(r2, dir);
            const double scale = std::abs(a) * norm(r1) + std::abs(b) * norm(r2);
            double err = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                err = std::max(err, std::abs(lhs[i] - (a * p1[i] + b * p2[i])));
            }
            lin += err <= 1e-5 * scale ? 1 : 0;
        }
        const auto tag = "d=" + std::to_string(d);
        o.check(idem == trials, tag + " idempotence " + std::to_string(idem) + "/1000");
        o.check(orth == trials, tag + " orthogonality " + std::to_string(orth) + "/1000");
        o.check(contr == trials, tag + " contraction " + std::to_string(contr) + "/1000");
        o.check(lin == trials, tag + " linearity " + std::to_string(lin) + "/1000");
    }
    const double s = seconds_since(t0);
    o.check(s < 5.0, "took " + num(s) + " s");
    o.note("8000 trials in " + num(s, 3) + " s");
    return o;
}

Outcome mean_difference_oracle() {
    Outcome o;
    std::vector<PromptSample> bias, standard;
    const std::vector<std::string> words = {"what", "is", "the", "shape", "of", "where", "person", "sits", "?"};
    for (int i = 0; i < 5; ++i) {
        PromptSample b;
        b.id = "b" + std::to_string(i);
        b.prompt = "what is the shape of the person " + words[static_cast<std::size_t>(i)] + " ?";
        b.markers = {"<grp_" + std::to_string(i % 2) + ">"};
        bias.push_back(b);
        PromptSample s;
        s.id = "s" + std::to_string(i);
        s.prompt = "where the person sits " + words[static_cast<std::size_t>(i + 3)] + " ?";
        s.markers = {"<scn_" + std::to_string(i % 3) + ">"};
        standard.push_back(s);
    }
    std::vector<std::string> texts, markers;
    for (const auto& v : {bias, standard}) {
        for (const auto& s : v) {
            texts.push_back(s.prompt);
            markers.insert(markers.end(), s.markers.begin(), s.markers.end());
        }
    }
    std::sort(markers.begin(), markers.end());
    markers.erase(std::unique(markers.begin(), markers.end()), markers.end());
    const auto vocab = build_tokenizer(texts, markers);
    tinylm::ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.max_seq = 32;
    c.vocab_size = static_cast<int>(vocab.size());
    c.seed = 5;
    const auto w = tinylm::Weights<float>::init(c, 0.3);

    for (auto policy : {PositionPolicy::LastPromptToken, PositionPolicy::MeanOverPrompt}) {
        // Oracle: average the stored residual rows directly.
        auto brute_mean = [&](const std::vector<PromptSample>& set) {
            std::vector<std::vector<double>> acc(c.hook_count(), std::vector<double>(16, 0.0));
            for (const auto& s : set) {
                const auto tr = steering::trace_prompt(w, vocab, s);
                const std::size_t first = policy == PositionPolicy::LastPromptToken ? tr.seq_len - 1 : tr.prefix_len;
                for (std::size_t h = 0; h < acc.size(); ++h) {
                    std::vector<double> row(16, 0.0);
                    for (std::size_t p = first; p < tr.seq_len; ++p) {
                        for (std::size_t j = 0; j < 16; ++j) {
                            row[j] += tr.residuals[h](static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(j));
                        }
                    }
                    for (std::size_t j = 0; j < 16; ++j) {
                        acc[h][j] += row[j] / static_cast<double>(tr.seq_len - first) / static_cast<double>(set.size());
                    }
                }
            }
            return acc;
        };
        const auto mb = brute_mean(bias);
        const auto ms = brute_mean(standard);
        const auto sb = steering::collect_activations(w, vocab, bias, policy);
        const auto ss = steering::collect_activations(w, vocab, standard, policy);
        double worst = 0.0;
        bool negates = true;
        for (std::size_t h = 0; h < c.hook_count(); ++h) {
            const auto hook = HookPoint::from_index(h);
            const auto d = steering::estimate_direction(sb, ss, hook);
            const auto swapped = steering::estimate_direction(ss, sb, hook);
            double n = 0.0;
            for (std::size_t j = 0; j < 16; ++j) {
                n += (mb[h][j] - ms[h][j]) * (mb[h][j] - ms[h][j]);
            }
            n = std::sqrt(n);
            for (std::size_t j = 0; j < 16; ++j) {
                worst = std::max(worst, std::abs(d.u[j] - (mb[h][j] - ms[h][j]) / n));
                negates = negates && swapped.u[j] == -d.u[j];
            }
        }
        const std::string tag = to_string(policy);
        o.check(worst <= 1e-6, tag + " max deviation " + num(worst, 3));
        o.check(negates, tag + " swapped sets do not negate u exactly");
        o.note(tag + " max deviation " + num(worst, 3));
    }
    return o;
}

Outcome gradient_check() {
    Outcome o;
    const auto t0 = Clock::now();
    tinylm::ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.vocab_size = 12;
    c.max_seq = 16;
    c.seed = 17;
    auto w = tinylm::Weights<double>::init(c, 0.3);
    const std::vector<tinylm::Sequence> batch = {{1, 4, 5, 6, 7, 2}, {1, 8, 9, 10, 11, 5, 2}, {1, 6, 4, 2}};
    const auto analytic = tinylm::loss_and_grads(w, batch);
    std::vector<std::vector<double>> grads;
    analytic.grads.for_each_block([&](const std::string&, std::span<const double> s) {
        grads.emplace_back(s.begin(), s.end());
    });
    const double eps = 1e-3;
    double worst = 0.0;
    std::string worst_block;
    std::size_t b = 0;
    w.for_each_block([&](const std::string& name, std::span<double> s) {
        double num_sq = 0.0, den_a = 0.0, den_f = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            const double orig = s[i];
            s[i] = orig + eps;
            const double up = tinylm::loss_and_grads(w, batch, false).loss;
            s[i] = orig - eps;
            const double down = tinylm::loss_and_grads(w, batch, false).loss;
            s[i] = orig;
            const double fd = (up - down) / (2 * eps);
            const double g = grads[b][i];
            num_sq += (g - fd) * (g - fd);
            den_a += g * g;
            den_f += fd * fd;
        }
        const double rel = std::sqrt(num_sq) / std::max({std::sqrt(den_a), std::sqrt(den_f), 1e-12});
        if (rel > worst) {
            worst = rel;
            worst_block = name;
        }
        ++b;
    });
    const double s = seconds_since(t0);
    o.check(worst <= 1e-3, "worst block " + worst_block + " relative error " + num(worst, 3));
    o.check(s < 60.0, "took " + num(s) + " s");
    o.note(std::to_string(b) + " blocks, worst " + worst_block + " " + num(worst, 3) + ", " + num(s, 3) + " s");
    return o;
}

Outcome dsl_monte_carlo() {
    Outcome o;
    const auto t0 = Clock::now();
    constexpr int reps = 1000;
    constexpr std::size_t n = 1000;
    constexpr double pi = 0.2;
    constexpr double lambda = 1.5;  // Y ~ Poisson(1.5); prediction = Y + 1 on 30% of items
    std::mt19937_64 rng(2024);
    std::poisson_distribution<int> pois(lambda);
    std::bernoulli_distribution biased(0.3), sampled(pi);
    std::vector<std::string> ids(n);
    for (std::size_t i = 0; i < n; ++i) {
        ids[i] = std::to_string(i);
    }
    std::vector<double> points;
    int covered = 0;
    for (int r = 0; r < reps; ++r) {
        std::vector<double> pred(n);
        std::map<std::string, eval::GoldLabel> gold;
        for (std::size_t i = 0; i < n; ++i) {
            const double y = pois(rng);
            pred[i] = y + (biased(rng) ? 1.0 : 0.0);
            if (sampled(rng)) {
                gold[ids[i]] = {y, pi};
            }
        }
        const auto e = eval::dsl_estimate(ids, pred, gold);
        points.push_back(e.point);
        covered += e.ci.lo <= lambda && lambda <= e.ci.hi ? 1 : 0;
    }
    const double mean = eval::mean_of(points);
    double ss = 0.0;
    for (double p : points) {
        ss += (p - mean) * (p - mean);
    }
    const double mc_se = std::sqrt(ss / (reps - 1)) / std::sqrt(static_cast<double>(reps));
    const double coverage = covered / static_cast<double>(reps);
    o.check(std::abs(mean - lambda) <= 2 * mc_se,
            "mean " + num(mean) + " vs truth " + num(lambda) + " (2 se = " + num(2 * mc_se) + ")");
    o.check(coverage >= 0.93 && coverage <= 0.97, "coverage " + num(coverage));

    // Collapse cases: full gold recovers the gold mean; a perfect predictor recovers the prediction mean.
    std::vector<double> y(n), pred(n);
    std::map<std::string, eval::GoldLabel> all, some;
    double ysum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = pois(rng);
        pred[i] = y[i] + 3.0;
        ysum += y[i];
        all[ids[i]] = {y[i], 1.0};
        if (sampled(rng)) {
            some[ids[i]] = {y[i], pi};
        }
    }
    const auto full = eval::dsl_estimate(ids, pred, all);
    o.check(std::abs(full.point - ysum / n) <= 1e-12, "pi=1 point " + num(full.point, 10));
    const auto perfect = eval::dsl_estimate(ids, y, some);
    o.check(std::abs(perfect.point - ysum / n) <= 1e-12, "perfect predictor point " + num(perfect.point, 10));
    const double s = seconds_since(t0);
    o.check(s < 60.0, "took " + num(s) + " s");
    o.note("mean " + num(mean) + ", coverage " + num(coverage, 3) + ", " + num(s, 3) + " s");
    return o;
}

Outcome bigram_fixture() {
    Outcome o;
    eval::AnnotationList ann;
    ann.targets = {"stout", "fit", "slender"};
    ann.include = {"stout man", "fit person", "slender woman"};
    ann.exclude = {"stout kettle", "fit the", "slender chance"};
    struct Case {
        std::string text;
        std::size_t lenient;
        std::size_t strict;
    };
    // Counts worked out by hand.
    const std::vector<Case> cases = {
        {"a stout man held a stout kettle .", 1, 1},
        {"does this fit the description ? a fit person ran .", 1, 1},
        {"a slender chance that a slender woman and a slender dog met", 2, 1},
        {"Stout, fit person.", 2, 1},
        {"nothing to see here", 0, 0},
        {"he is fit", 0, 0},
        {"", 0, 0},
        {"STOUT KETTLE , Stout Man !", 1, 1},
    };
    std::vector<std::string> ids, texts;
    std::size_t want_l = 0, want_s = 0;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const auto& c = cases[i];
        const auto l = eval::count_bigrams(c.text, ann, eval::CountMode::Lenient).count;
        const auto s = eval::count_bigrams(c.text, ann, eval::CountMode::Strict).count;
        o.check(l == c.lenient, "case " + std::to_string(i) + " lenient " + std::to_string(l));
        o.check(s == c.strict, "case " + std::to_string(i) + " strict " + std::to_string(s));
        ids.push_back("f" + std::to_string(i));
        texts.push_back(c.text);
        want_l += c.lenient;
        want_s += c.strict;
    }
    const auto lenient = eval::count_corpus(ids, texts, ann, eval::CountMode::Lenient);
    const auto strict = eval::count_corpus(ids, texts, ann, eval::CountMode::Strict);
    o.check(lenient.total() == want_l && strict.total() == want_s,
            "corpus totals " + std::to_string(lenient.total()) + "/" + std::to_string(strict.total()));
    o.check(lenient.frequency.count("stout kettle") == 0, "excluded bigram counted");
    o.check(lenient.items[0].spans() == "1-2", "spans of case 0: " + lenient.items[0].spans());

    std::mt19937_64 rng(55);
    const std::vector<std::string> pool = {"stout", "fit", "slender", "man", "person", "woman", "kettle",
                                           "the", "chance", "dog", ",", ".", "a"};
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1), len(0, 30);
    int ok = 0;
    for (int t = 0; t < 1000; ++t) {
        std::string s;
        for (std::size_t k = len(rng); k > 0; --k) {
            s += pool[pick(rng)] + " ";
        }
        ok += eval::count_bigrams(s, ann, eval::CountMode::Strict).count <=
                      eval::count_bigrams(s, ann, eval::CountMode::Lenient).count
                  ? 1
                  : 0;
    }
    o.check(ok == 1000, "strict exceeded lenient on " + std::to_string(1000 - ok) + " texts");
    o.note(std::to_string(cases.size()) + " fixture texts, 1000 random texts");
    return o;
}

// ---------------------------------------------------------------------------
// Pipeline criteria

using Table = std::vector<std::map<std::string, std::string>>;

Table read_csv(const fs::path& p) {
    std::istringstream in(read_file(p.string()));
    std::string line;
    std::getline(in, line);
    const auto header = text::split(line, ',');
    Table rows;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const auto cells = text::split(line, ',');
        std::map<std::string, std::string> row;
        for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) {
            row[header[i]] = cells[i];
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

const std::map<std::string, std::string>* find_row(const Table& t, const std::string& key, const std::string& value,
                                                   const std::string& key2 = {}, const std::string& value2 = {}) {
    for (const auto& r : t) {
        if (r.at(key) == value && (key2.empty() || r.at(key2) == value2)) {
            return &r;
        }
    }
    return nullptr;
}

double cell(const std::map<std::string, std::string>* r, const std::string& col) {
    if (r == nullptr) {
        fail(ErrorCode::KeyError, "missing row for column " + col);
    }
    return std::stod(r->at(col));
}

pipeline::PipelineConfig acceptance_config(int threads) {
    pipeline::PipelineConfig cfg;
    cfg.threads = threads;
    return cfg;
}

double run_pipeline(const fs::path& dir, int threads) {
    fs::remove_all(dir);
    const auto t0 = Clock::now();
    pipeline::Run run(dir, acceptance_config(threads), [](const std::string& m) { std::cerr << "[run] " << m << '\n'; });
    pipeline::run_all(run, [](int step, double loss) {
        if (step % 250 == 0) {
            std::cerr << "[run] step " << step << " loss " << fmt_double(loss, 4) << '\n';
        }
    });
    return seconds_since(t0);
}

std::string effect_text(const std::map<std::string, std::string>* r) {
    return num(cell(r, "point"), 4) + "% [" + num(cell(r, "ci_lo"), 4) + ", " + num(cell(r, "ci_hi"), 4) + "]";
}

Outcome pipeline_reduction(const fs::path& run, double seconds) {
    Outcome o;
    const auto eff = read_csv(run / pipeline::paths::effects);
    const auto* big = find_row(eff, "method", "bigram", "dataset", "eval");
    const auto* jud = find_row(eff, "method", "judge", "dataset", "eval");
    const auto* dsl = find_row(eff, "method", "dsl", "dataset", "eval");
    o.check(cell(big, "point") <= -50.0, "bigram reduction " + num(cell(big, "point")) + "%");
    o.check(cell(big, "ci_hi") < 0.0, "bigram CI includes 0");
    o.check(cell(jud, "point") < 0.0 && cell(jud, "ci_hi") < 0.0, "judge effect " + effect_text(jud));
    o.check(cell(dsl, "point") < 0.0 && cell(dsl, "ci_hi") < 0.0, "dsl effect " + effect_text(dsl));
    o.check(seconds < 600.0, "pipeline took " + num(seconds) + " s");
    o.note("bigram " + effect_text(big) + ", judge " + effect_text(jud) + ", dsl " + effect_text(dsl) + ", " +
           num(seconds, 4) + " s");
    return o;
}

Outcome capability_guard(const fs::path& run) {
    Outcome o;
    const auto ppl = read_csv(run / pipeline::paths::perplexity);
    const double ratio = cell(find_row(ppl, "condition", "steered"), "ratio");
    const auto match = read_csv(run / pipeline::paths::match);
    const double base = cell(find_row(match, "condition", "baseline"), "rate");
    const double steered = cell(find_row(match, "condition", "steered"), "rate");
    const double drop = (base - steered) * 100.0;
    o.check(ratio <= 1.10, "perplexity ratio " + num(ratio));
    o.check(drop <= 5.0, "match rate " + num(base * 100) + "% -> " + num(steered * 100) + "% (" + num(drop, 3) +
                             " points)");
    if (o.pass) {
        o.note("perplexity ratio " + num(ratio) + ", match " + num(base * 100) + "% -> " + num(steered * 100) + "%");
    } else if (ratio <= 1.10) {
        o.note("perplexity ratio " + num(ratio) + " within bound");
    }
    return o;
}

Outcome token_shift(const fs::path& dir, int threads) {
    Outcome o;
    pipeline::Run run(dir, acceptance_config(threads), [](const std::string&) {});
    const auto& cfg = run.config();
    const auto w = run.weights();
    const auto vocab = run.vocab();
    const auto prompts = pipeline::delta_prompts(run);
    auto dir_ = steering::load_direction(run.path(pipeline::paths::direction));
    const auto iv = steering::make_intervention(dir_, w.config);
    const auto t = eval::token_prob_delta(w, vocab, iv, prompts, cfg.delta_top_k, cfg.delta_max_new_tokens, threads);
    std::size_t negative = 0;
    const auto words = run.wordlist();
    for (const auto& word : words) {
        const auto* r = t.find(word);
        if (r == nullptr) {
            o.check(false, "'" + word + "' not in vocabulary");
            continue;
        }
        if (r->delta < 0.0) {
            ++negative;
        } else {
            o.check(false, "'" + word + "' delta " + num(r->delta, 3));
        }
    }
    o.check(std::abs(t.delta_sum) <= 1e-4, "delta sum " + num(t.delta_sum, 3));
    o.check(t.max_step_mass_error <= 1e-4, "step mass error " + num(t.max_step_mass_error, 3));

    dir_.alpha = 0.0;
    const auto iv0 = steering::make_intervention(dir_, w.config);
    const auto t0 = eval::token_prob_delta(w, vocab, iv0, prompts, cfg.delta_top_k, cfg.delta_max_new_tokens, threads);
    double worst = 0.0;
    for (const auto& r : t0.all) {
        worst = std::max(worst, std::abs(r.delta));
    }
    o.check(worst == 0.0, "alpha=0 max |delta| " + num(worst, 3));
    o.note(std::to_string(negative) + "/" + std::to_string(words.size()) + " attribute tokens decrease over " +
           std::to_string(prompts.size()) + " prompts");
    return o;
}

Outcome transfer(const fs::path& run) {
    Outcome o;
    const auto eff = read_csv(run / pipeline::paths::effects);
    const auto* big = find_row(eff, "method", "bigram", "dataset", "transfer");
    o.check(cell(big, "point") <= -40.0, "transfer reduction " + num(cell(big, "point")) + "%");
    o.note("bigram transfer " + effect_text(big));
    return o;
}

Outcome reproducibility(const fs::path& a, const fs::path& b) {
    Outcome o;
    std::size_t compared = 0;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (!e.is_regular_file() || e.path().extension() != ".csv") {
            continue;
        }
        const auto rel = fs::relative(e.path(), a);
        const auto other = b / rel;
        if (!fs::exists(other)) {
            o.check(false, rel.string() + " missing in second run");
            continue;
        }
        ++compared;
        o.check(read_file(e.path().string()) == read_file(other.string()), rel.string() + " differs");
    }
    o.check(compared > 0, "no CSV files found");
    o.note(std::to_string(compared) + " CSV files compared");
    return o;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"steerlab acceptance suite"};
    std::string work = "acceptance_runs";
    int threads = 1;
    bool skip_pipeline = false;
    app.add_option("--work", work, "Directory for pipeline runs");
    app.add_option("--threads", threads, "Worker threads for the pipeline")->check(CLI::PositiveNumber);
    app.add_flag("--skip-pipeline", skip_pipeline, "Only run criteria 1-5");
    CLI11_PARSE(app, argc, argv);

    int failures = 0;
    auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("exception: ") + e.what();
        }
        failures += o.pass ? 0 : 1;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << ". " << name << " (" << num(seconds_since(t0), 3)
                  << " s): " << o.detail << std::endl;
    };

    report(1, "projection properties", projection_suite);
    report(2, "mean-difference oracle", mean_difference_oracle);
    report(3, "gradient check", gradient_check);
    report(4, "DSL Monte Carlo", dsl_monte_carlo);
    report(5, "bigram fixture", bigram_fixture);

    if (!skip_pipeline) {
        const fs::path run_a = fs::path(work) / "run_a";
        const fs::path run_b = fs::path(work) / "run_b";
        double secs_a = -1.0, secs_b = -1.0;
        std::string run_error;
        try {
            secs_a = run_pipeline(run_a, threads);
            secs_b = run_pipeline(run_b, threads);
        } catch (const std::exception& e) {
            run_error = e.what();
        }
        auto guarded = [&](std::function<Outcome()> fn) {
            return [fn, &run_error]() {
                if (!run_error.empty()) {
                    Outcome o;
                    o.pass = false;
                    o.detail = "pipeline failed: " + run_error;
                    return o;
                }
                return fn();
            };
        };
        report(6, "end-to-end reduction", guarded([&] { return pipeline_reduction(run_a, secs_a); }));
        report(7, "capability guard", guarded([&] { return capability_guard(run_a); }));
        report(8, "token probability shift", guarded([&] { return token_shift(run_a, threads); }));
        report(9, "transfer", guarded([&] { return transfer(run_a); }));
        report(10, "reproducibility", guarded([&] {
                   auto o = reproducibility(run_a, run_b);
                   o.note("second run " + num(secs_b, 4) + " s");
                   return o;
               }));
    }
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures == 0 ? 0 : 1;
}
