#include <algorithm>
#include <cmath>
#include <numeric>

#include "common.hpp"
#include "steerlab/eval.hpp"

namespace steerlab::test {
namespace {

using eval::AnnotationList;
using eval::CountMode;

AnnotationList stout(std::set<std::string> include, std::set<std::string> exclude) {
    AnnotationList a;
    a.targets = {"stout"};
    a.include = std::move(include);
    a.exclude = std::move(exclude);
    return a;
}

TEST(Bigram, LenientFixture) {
    const auto r = eval::count_bigrams("a stout man and a stout kettle", stout({}, {"stout kettle"}), CountMode::Lenient);
    EXPECT_EQ(r.count, 1u);
    EXPECT_EQ(r.raw_count(), 2u);
    EXPECT_EQ(r.spans(), "1-2");
    EXPECT_EQ(r.matches[0].bigram, "stout man");
}

TEST(Bigram, StrictFixture) {
    const auto r = eval::count_bigrams("a stout man and a stout kettle", stout({"stout man"}, {}), CountMode::Strict);
    EXPECT_EQ(r.count, 1u);
    EXPECT_EQ(r.spans(), "1-2");
}

TEST(Bigram, EmptyAndEdgeTexts) {
    const auto a = stout({"stout man"}, {});
    EXPECT_EQ(eval::count_bigrams("", a, CountMode::Lenient).count, 0u);
    EXPECT_EQ(eval::count_bigrams("stout", a, CountMode::Lenient).count, 0u);
    // Punctuation is skipped when forming bigrams; case is folded.
    EXPECT_EQ(eval::count_bigrams("A STOUT, man.", a, CountMode::Strict).count, 1u);
    EXPECT_EQ(eval::count_bigrams("stout stout man", a, CountMode::Lenient).count, 2u);
}

TEST(Bigram, CorpusReportCsvAndFrequency) {
    const auto a = stout({"stout man"}, {"stout kettle"});
    const auto r = eval::count_corpus({"x", "y,z"}, {"a stout man", "a stout kettle and a stout man"}, a,
                                      CountMode::Lenient);
    EXPECT_EQ(r.total(), 2u);
    EXPECT_DOUBLE_EQ(r.rate(), 1.0);
    EXPECT_EQ(r.frequency.at("stout man"), 2u);
    EXPECT_EQ(r.csv(), "id,count,spans\nx,1,1-2\n\"y,z\",1,5-6\n");
    EXPECT_STEERLAB_ERROR(eval::count_corpus({"x"}, {}, a, CountMode::Lenient), ErrorCode::ShapeError);
}

std::string random_text(std::mt19937_64& rng, const std::vector<std::string>& pool, std::size_t n) {
    std::vector<std::string> ws;
    for (std::size_t i = 0; i < n; ++i) {
        ws.push_back(pool[static_cast<std::size_t>(uniform_index(rng, pool.size()))]);
    }
    return text::join(ws, " ");
}

TEST(Bigram, StrictNeverExceedsLenient) {
    std::mt19937_64 rng(77);
    const std::vector<std::string> pool = {"stout", "tall", "man", "kettle", "a", "tall", ".", "dog", "Stout"};
    for (int trial = 0; trial < 500; ++trial) {
        AnnotationList a;
        a.targets = {"stout", "tall"};
        for (const auto* head : {"stout", "tall"}) {
            for (const auto* tail : {"man", "kettle", "dog", "a", "tall", "stout"}) {
                const auto b = std::string(head) + " " + tail;
                const auto roll = uniform_index(rng, 3);
                if (roll == 0) {
                    a.include.insert(b);
                } else if (roll == 1) {
                    a.exclude.insert(b);
                }
            }
        }
        const auto t = random_text(rng, pool, uniform_index(rng, 30));
        const auto strict = eval::count_bigrams(t, a, CountMode::Strict);
        const auto lenient = eval::count_bigrams(t, a, CountMode::Lenient);
        EXPECT_LE(strict.count, lenient.count) << t;
        EXPECT_LE(lenient.count, lenient.raw_count());
    }
}

TEST(Annotations, ValidationAndLoading) {
    EXPECT_STEERLAB_ERROR(stout({"stout man"}, {"stout man"}).validate(), ErrorCode::SchemaError);
    EXPECT_STEERLAB_ERROR(stout({"big man"}, {}).validate(), ErrorCode::SchemaError);
    EXPECT_STEERLAB_ERROR(stout({"stout"}, {}).validate(), ErrorCode::SchemaError);
    const auto a = AnnotationList::from_json({{"targets", {"Stout"}}, {"include", {"STOUT  man"}}});
    EXPECT_EQ(a.include, std::set<std::string>{"stout man"});
    EXPECT_EQ(a.targets, std::set<std::string>{"stout"});
    EXPECT_STEERLAB_ERROR(AnnotationList::from_json({{"include", {"x y"}}}), ErrorCode::SchemaError);
    const auto f = AnnotationList::load(data_file("annotations.json"));
    EXPECT_EQ(f.exclude, std::set<std::string>{"stout kettle"});
}

TEST(Rates, DegenerateAndConstantData) {
    const auto zero = eval::aggregate_rates({0, 0, 0, 0}, {"g", "g", "g", "g"}, 1);
    ASSERT_EQ(zero.size(), 1u);
    EXPECT_EQ(zero[0].rate, 0.0);
    EXPECT_EQ(zero[0].rate_ci.lo, 0.0);
    EXPECT_EQ(zero[0].rate_ci.hi, 0.0);
    EXPECT_EQ(zero[0].mean_ci.hi, 0.0);
    const auto ones = eval::aggregate_rates({1, 1, 1}, {"a", "a", "a"}, 1);
    EXPECT_DOUBLE_EQ(ones[0].mean, 1.0);
    EXPECT_DOUBLE_EQ(ones[0].rate, 1.0);
    EXPECT_STEERLAB_ERROR(eval::aggregate_rates({}, {}, 1), ErrorCode::EmptyInput);
    EXPECT_STEERLAB_ERROR(eval::aggregate_rates({1}, {}, 1), ErrorCode::ShapeError);
}

TEST(Rates, GroupedAndSeeded) {
    const std::vector<double> counts = {0, 2, 1, 0, 3, 0};
    const std::vector<std::string> keys = {"b", "a", "b", "a", "a", "b"};
    const auto r = eval::aggregate_rates(counts, keys, 9);
    ASSERT_EQ(r.size(), 2u);
    EXPECT_EQ(r[0].key, "a");
    EXPECT_DOUBLE_EQ(r[0].mean, 5.0 / 3.0);
    EXPECT_DOUBLE_EQ(r[0].rate, 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(r[1].mean, 1.0 / 3.0);
    EXPECT_EQ(eval::rates_csv(r), eval::rates_csv(eval::aggregate_rates(counts, keys, 9)));
    for (const auto& row : r) {
        EXPECT_LE(row.mean_ci.lo, row.mean);
        EXPECT_GE(row.mean_ci.hi, row.mean);
    }
}

TEST(Rates, BootstrapCoverageOfPoissonMean) {
    std::mt19937_64 rng(2024);
    std::poisson_distribution<int> pois(2.0);
    int covered = 0;
    for (int rep = 0; rep < 200; ++rep) {
        std::vector<double> xs(500);
        for (auto& x : xs) {
            x = pois(rng);
        }
        covered += eval::bootstrap_mean_ci(xs, derive_seed(5, static_cast<std::uint64_t>(rep))).contains(2.0) ? 1 : 0;
    }
    EXPECT_GE(covered, 186);  // 93% of 200
}

TEST(Dsl, FullSupervisionGivesGoldMean) {
    const std::vector<std::string> ids = {"a", "b", "c", "d"};
    const std::vector<double> pred = {5, 5, 5, 5};
    const std::map<std::string, eval::GoldLabel> gold = {{"a", {1, 1}}, {"b", {2, 1}}, {"c", {0, 1}}, {"d", {3, 1}}};
    const auto e = eval::dsl_estimate(ids, pred, gold);
    EXPECT_DOUBLE_EQ(e.point, 1.5);
    EXPECT_EQ(e.n_gold, 4u);
    EXPECT_TRUE(e.ci.contains(e.point));
}

TEST(Dsl, ZeroResidualAndNoGoldGivePredictionMean) {
    const std::vector<std::string> ids = {"a", "b", "c", "d", "e"};
    const std::vector<double> pred = {1, 0, 2, 4, 1};
    const auto none = eval::dsl_estimate(ids, pred, {});
    EXPECT_DOUBLE_EQ(none.point, 8.0 / 5.0);
    EXPECT_EQ(none.n_gold, 0u);
    const auto same = eval::dsl_estimate(ids, pred, {{"b", {0, 0.3}}, {"d", {4, 0.7}}});
    EXPECT_DOUBLE_EQ(same.point, 8.0 / 5.0);
}

TEST(Dsl, PseudoOutcomeWorkedExample) {
    // m = [1 + (3-1)/0.5, 2] = [5, 2]: mean 3.5, sd 2.1213, se 1.5.
    const auto e = eval::dsl_estimate({"a", "b"}, {1, 2}, {{"a", {3, 0.5}}});
    EXPECT_DOUBLE_EQ(e.point, 3.5);
    EXPECT_NEAR(e.stderr_, 1.5, 1e-12);
    EXPECT_NEAR(e.ci.lo, 3.5 - 1.959963984540054 * 1.5, 1e-12);
}

TEST(Dsl, Errors) {
    EXPECT_STEERLAB_ERROR(eval::dsl_estimate({"a"}, {1}, {{"a", {1, 0.0}}}), ErrorCode::InvalidDesign);
    EXPECT_STEERLAB_ERROR(eval::dsl_estimate({"a"}, {1}, {{"a", {1, 1.5}}}), ErrorCode::InvalidDesign);
    EXPECT_STEERLAB_ERROR(eval::dsl_estimate({"a"}, {1}, {{"zz", {1, 1}}}), ErrorCode::KeyError);
    EXPECT_STEERLAB_ERROR(eval::dsl_estimate({}, {}, {}), ErrorCode::EmptyInput);
    EXPECT_STEERLAB_ERROR(eval::dsl_estimate({"a", "a"}, {1, 1}, {}), ErrorCode::SchemaError);
    EXPECT_STEERLAB_ERROR(eval::dsl_estimate({"a"}, {1, 2}, {}), ErrorCode::ShapeError);
}

TEST(Dsl, PermutationInvariant) {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + uniform_index(rng, 60);
        std::vector<std::string> ids;
        std::vector<double> pred;
        std::map<std::string, eval::GoldLabel> gold;
        for (std::size_t i = 0; i < n; ++i) {
            ids.push_back("i" + std::to_string(i));
            pred.push_back(static_cast<double>(uniform_index(rng, 4)) + 0.1 * uniform01(rng));
            if (uniform01(rng) < 0.3) {
                gold[ids.back()] = {static_cast<double>(uniform_index(rng, 4)), 0.05 + 0.95 * uniform01(rng)};
            }
        }
        const auto a = eval::dsl_estimate(ids, pred, gold);
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        shuffle(rng, perm);
        std::vector<std::string> ids2;
        std::vector<double> pred2;
        for (const auto p : perm) {
            ids2.push_back(ids[p]);
            pred2.push_back(pred[p]);
        }
        const auto b = eval::dsl_estimate(ids2, pred2, gold);
        EXPECT_EQ(a.point, b.point);
        EXPECT_EQ(a.stderr_, b.stderr_);
        EXPECT_GE(a.stderr_, 0.0);
        EXPECT_LE(a.n_gold, a.n_total);
    }
}

TEST(Effect, IdenticalConditionsGiveZero) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<double> a(1 + uniform_index(rng, 40));
        for (auto& x : a) {
            x = static_cast<double>(uniform_index(rng, 4));
        }
        a[0] = 1.0;
        const auto e = eval::percent_decrease(a, a, eval::Method::Bigram, 3);
        EXPECT_EQ(e.point, 0.0);
        EXPECT_TRUE(e.ci.contains(0.0));
    }
}

TEST(Effect, ConstantHalving) {
    const std::vector<double> base(20, 2.0);
    const std::vector<double> steered(20, 1.0);
    const auto e = eval::percent_decrease(base, steered, eval::Method::Judge, 1, "eval");
    EXPECT_DOUBLE_EQ(e.point, -50.0);
    EXPECT_DOUBLE_EQ(e.ci.lo, -50.0);
    EXPECT_DOUBLE_EQ(e.ci.hi, -50.0);
    const auto unpaired = eval::percent_decrease(base, std::vector<double>(7, 1.0), eval::Method::Bigram, 1);
    EXPECT_DOUBLE_EQ(unpaired.point, -50.0);
    EXPECT_EQ(eval::effects_csv({e}), "method,dataset,point,ci_lo,ci_hi\njudge,eval,-50,-50,-50\n");
}

TEST(Effect, SeededAndOrdered) {
    const std::vector<double> base = {0, 1, 2, 0, 1, 3, 0, 1};
    const std::vector<double> steered = {0, 0, 1, 0, 0, 1, 0, 1};
    const auto a = eval::percent_decrease(base, steered, eval::Method::Bigram, 42);
    const auto b = eval::percent_decrease(base, steered, eval::Method::Bigram, 42);
    EXPECT_EQ(a.ci.lo, b.ci.lo);
    EXPECT_EQ(a.ci.hi, b.ci.hi);
    EXPECT_LE(a.ci.lo, a.point);
    EXPECT_LE(a.point, a.ci.hi);
}

TEST(Effect, UndefinedAndEmpty) {
    EXPECT_STEERLAB_ERROR(eval::percent_decrease({0, 0}, {1, 1}, eval::Method::Bigram, 1), ErrorCode::UndefinedEffect);
    EXPECT_STEERLAB_ERROR(eval::percent_decrease({}, {1}, eval::Method::Bigram, 1), ErrorCode::EmptyInput);
    eval::DslEstimate zero;
    EXPECT_STEERLAB_ERROR(eval::percent_decrease(zero, zero), ErrorCode::UndefinedEffect);
}

TEST(Effect, DeltaMethodForDsl) {
    eval::DslEstimate base;
    base.point = 2.0;
    base.stderr_ = 0.2;
    eval::DslEstimate steered;
    steered.point = 1.0;
    steered.stderr_ = 0.1;
    const auto e = eval::percent_decrease(base, steered, "eval");
    EXPECT_DOUBLE_EQ(e.point, -50.0);
    // var(r) = 0.01/4 + 0.25 * 0.04/4 = 0.005
    const double half = 1.959963984540054 * std::sqrt(0.005) * 100.0;
    EXPECT_NEAR(e.ci.lo, -50.0 - half, 1e-9);
    EXPECT_NEAR(e.ci.hi, -50.0 + half, 1e-9);
    EXPECT_EQ(e.method, eval::Method::Dsl);
}

TEST(Quantile, LinearInterpolation) {
    const std::vector<double> s = {0, 10, 20, 30};
    EXPECT_DOUBLE_EQ(eval::quantile_sorted(s, 0.0), 0.0);
    EXPECT_DOUBLE_EQ(eval::quantile_sorted(s, 1.0), 30.0);
    EXPECT_DOUBLE_EQ(eval::quantile_sorted(s, 0.5), 15.0);
}

struct DeltaFixture {
    Vocab vocab = build_tokenizer({"a b c d e ,"}, {"<g>"});
    tinylm::Weights<float> w = random_weights(small_config(static_cast<int>(vocab.size())), 0.5);
    std::vector<PromptSample> prompts;

    DeltaFixture() {
        for (const auto* p : {"a b", "c", "d e"}) {
            PromptSample s;
            s.id = p;
            s.prompt = p;
            s.markers = {"<g>"};
            prompts.push_back(s);
        }
    }

    Intervention intervention(double alpha) const {
        std::mt19937_64 rng(12);
        SteeringDirection d;
        d.u = random_unit(rng, static_cast<std::size_t>(w.config.d_model));
        d.alpha = alpha;
        std::vector<HookPoint> hooks;
        for (std::size_t i = 0; i < w.config.hook_count(); ++i) {
            hooks.push_back(HookPoint::from_index(i));
        }
        return Intervention(d, hooks, {});
    }
};

TEST(TokenDelta, ZeroAlphaGivesZeroDeltas) {
    DeltaFixture f;
    const auto t = eval::token_prob_delta(f.w, f.vocab, f.intervention(0.0), f.prompts, 5, 10);
    for (const auto& r : t.all) {
        EXPECT_EQ(r.delta, 0.0) << r.token;
    }
    EXPECT_EQ(t.base_steps, t.steered_steps);
}

TEST(TokenDelta, SortedConservedAndQuoted) {
    DeltaFixture f;
    const auto t = eval::token_prob_delta(f.w, f.vocab, f.intervention(1.0), f.prompts, 4, 10, 2);
    ASSERT_EQ(t.rows.size(), 4u);
    for (std::size_t i = 1; i < t.rows.size(); ++i) {
        EXPECT_GE(std::abs(t.rows[i - 1].delta), std::abs(t.rows[i].delta));
    }
    EXPECT_LE(std::abs(t.delta_sum), 1e-4);
    EXPECT_LE(t.max_step_mass_error, 1e-4);
    EXPECT_EQ(t.all.size(), f.vocab.size());
    ASSERT_NE(t.find(","), nullptr);
    EXPECT_EQ(t.find("nope"), nullptr);
    const auto big = eval::token_prob_delta(f.w, f.vocab, f.intervention(1.0), f.prompts, 100, 10);
    EXPECT_NE(big.csv().find("\",\","), std::string::npos);
    const auto svg = eval::delta_svg(t, "a < b");
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find("a &lt; b"), std::string::npos);
    EXPECT_STEERLAB_ERROR(eval::token_prob_delta(f.w, f.vocab, f.intervention(1.0), {}, 4), ErrorCode::EmptyInput);
}

} // namespace
} // namespace steerlab::test
