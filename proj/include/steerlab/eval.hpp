#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "steerlab/annotation.hpp"
#include "steerlab/error.hpp"
#include "steerlab/generate.hpp"
#include "steerlab/intervention.hpp"
#include "steerlab/text.hpp"
#include "steerlab/util.hpp"

namespace steerlab::eval {

// ---------------------------------------------------------------------------
// Bigram counting

/// Quotes a CSV field when it holds a comma, quote or line break.
inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (const char c : s) {
        out += c;
        if (c == '"') {
            out += '"';
        }
    }
    return out + "\"";
}

enum class CountMode { Strict, Lenient };

inline CountMode parse_count_mode(const std::string& s) {
    if (s == "strict") {
        return CountMode::Strict;
    }
    if (s == "lenient") {
        return CountMode::Lenient;
    }
    fail(ErrorCode::ParseError, "count mode must be strict or lenient, got '" + s + "'");
}

struct BigramMatch {
    std::string bigram;
    std::size_t first = 0;  ///< word index of the target word
    std::size_t second = 0;
    bool counted = false;
};

struct TextReport {
    std::vector<BigramMatch> matches;  ///< every bigram headed by a target word
    std::size_t count = 0;             ///< matches that survive the annotation rule

    std::size_t raw_count() const { return matches.size(); }

    /// "first-second" word-index pairs of counted matches, ';'-separated.
    std::string spans() const {
        std::string out;
        for (const auto& m : matches) {
            if (!m.counted) {
                continue;
            }
            if (!out.empty()) {
                out += ';';
            }
            out += std::to_string(m.first) + "-" + std::to_string(m.second);
        }
        return out;
    }
};

/// Bigrams are formed over consecutive word tokens (punctuation is skipped). Strict counts only
/// include-listed bigrams; lenient counts every target-headed bigram not on the exclude list.
inline TextReport count_bigrams(std::string_view text_in, const AnnotationList& annotations, CountMode mode) {
    TextReport r;
    const auto ws = text::words(text_in);
    for (std::size_t i = 0; i + 1 < ws.size(); ++i) {
        if (annotations.targets.count(ws[i]) == 0) {
            continue;
        }
        BigramMatch m{ws[i] + " " + ws[i + 1], i, i + 1, false};
        m.counted = mode == CountMode::Strict ? annotations.include.count(m.bigram) != 0
                                              : annotations.exclude.count(m.bigram) == 0;
        r.count += m.counted ? 1 : 0;
        r.matches.push_back(std::move(m));
    }
    return r;
}

/// Whole-word occurrences of wordlist tokens; the reference count the synthetic gold labels use.
inline std::size_t count_words(std::string_view text_in, const std::set<std::string>& wordlist) {
    std::size_t n = 0;
    for (const auto& w : text::words(text_in)) {
        n += wordlist.count(w);
    }
    return n;
}

struct CorpusBigramReport {
    std::vector<std::string> ids;
    std::vector<TextReport> items;
    std::map<std::string, std::size_t> frequency;  ///< counted bigram -> occurrences

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& r : items) {
            n += r.count;
        }
        return n;
    }

    double rate() const { return items.empty() ? 0.0 : static_cast<double>(total()) / static_cast<double>(items.size()); }

    std::vector<double> counts() const {
        std::vector<double> out;
        for (const auto& r : items) {
            out.push_back(static_cast<double>(r.count));
        }
        return out;
    }

    /// CSV `id,count,spans`.
    std::string csv() const {
        std::ostringstream os;
        os << "id,count,spans\n";
        for (std::size_t i = 0; i < items.size(); ++i) {
            os << csv_field(ids[i]) << ',' << items[i].count << ',' << items[i].spans() << '\n';
        }
        return os.str();
    }
};

inline CorpusBigramReport count_corpus(const std::vector<std::string>& ids, const std::vector<std::string>& texts,
                                       const AnnotationList& annotations, CountMode mode) {
    require(ids.size() == texts.size(), ErrorCode::ShapeError, "ids and texts differ in length");
    CorpusBigramReport rep;
    rep.ids = ids;
    for (const auto& t : texts) {
        auto r = count_bigrams(t, annotations, mode);
        for (const auto& m : r.matches) {
            if (m.counted) {
                ++rep.frequency[m.bigram];
            }
        }
        rep.items.push_back(std::move(r));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Bootstrap helpers

inline constexpr int default_resamples = 2000;
inline constexpr double z95 = 1.959963984540054;

inline double mean_of(const std::vector<double>& xs) {
    double s = 0.0;
    for (const double x : xs) {
        s += x;
    }
    return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

/// Linear-interpolated quantile of sorted data.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) {
        return 0.0;
    }
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

struct Interval {
    double lo = 0.0;
    double hi = 0.0;

    bool contains(double v) const { return lo <= v && v <= hi; }
};

/// Percentile bootstrap for a statistic of resampled data; pure function of (data, seed).
template <typename Stat>
Interval bootstrap_interval(std::size_t n, Stat&& stat, std::uint64_t seed, int resamples = default_resamples) {
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> idx(n);
    std::vector<double> stats;
    stats.reserve(static_cast<std::size_t>(resamples));
    for (int b = 0; b < resamples; ++b) {
        for (auto& i : idx) {
            i = static_cast<std::size_t>(uniform_index(rng, n));
        }
        const std::optional<double> s = stat(idx);
        if (s) {
            stats.push_back(*s);
        }
    }
    std::sort(stats.begin(), stats.end());
    return {quantile_sorted(stats, 0.025), quantile_sorted(stats, 0.975)};
}

inline Interval bootstrap_mean_ci(const std::vector<double>& xs, std::uint64_t seed,
                                  int resamples = default_resamples) {
    return bootstrap_interval(
        xs.size(),
        [&](const std::vector<std::size_t>& idx) -> std::optional<double> {
            double s = 0.0;
            for (const auto i : idx) {
                s += xs[i];
            }
            return s / static_cast<double>(idx.size());
        },
        seed, resamples);
}

// ---------------------------------------------------------------------------
// Rates per group

struct RateRow {
    std::string key;
    std::size_t n = 0;
    double mean = 0.0;  ///< mean mentions per generation
    Interval mean_ci;
    double rate = 0.0;  ///< fraction of generations with at least one mention
    Interval rate_ci;
};

inline std::vector<RateRow> aggregate_rates(const std::vector<double>& counts, const std::vector<std::string>& keys,
                                            std::uint64_t seed, int resamples = default_resamples) {
    if (counts.empty()) {
        fail(ErrorCode::EmptyInput, "aggregate_rates needs at least one report");
    }
    require(counts.size() == keys.size(), ErrorCode::ShapeError, "one group key per report required");
    std::map<std::string, std::vector<double>> groups;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        groups[keys[i]].push_back(counts[i]);
    }
    std::vector<RateRow> out;
    std::uint64_t stream = 0;
    for (const auto& [key, xs] : groups) {
        RateRow row;
        row.key = key;
        row.n = xs.size();
        row.mean = mean_of(xs);
        row.mean_ci = bootstrap_mean_ci(xs, derive_seed(seed, stream++), resamples);
        std::vector<double> hit;
        for (const double x : xs) {
            hit.push_back(x > 0.0 ? 1.0 : 0.0);
        }
        row.rate = mean_of(hit);
        row.rate_ci = bootstrap_mean_ci(hit, derive_seed(seed, stream++), resamples);
        out.push_back(row);
    }
    return out;
}

inline std::string rates_csv(const std::vector<RateRow>& rows) {
    std::ostringstream os;
    os << "group,n,mean,mean_lo,mean_hi,rate,rate_lo,rate_hi\n";
    for (const auto& r : rows) {
        os << r.key << ',' << r.n << ',' << fmt_double(r.mean) << ',' << fmt_double(r.mean_ci.lo) << ','
           << fmt_double(r.mean_ci.hi) << ',' << fmt_double(r.rate) << ',' << fmt_double(r.rate_ci.lo) << ','
           << fmt_double(r.rate_ci.hi) << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Design-based supervised learning (DSL) mean estimate

struct GoldLabel {
    double count = 0.0;
    double pi = 1.0;  ///< known probability that this item was sent for gold labelling
};

struct DslEstimate {
    double point = 0.0;
    double stderr_ = 0.0;
    Interval ci;
    std::size_t n_total = 0;
    std::size_t n_gold = 0;

    nlohmann::json to_json() const {
        return {{"point", point}, {"stderr", stderr_}, {"ci_lo", ci.lo}, {"ci_hi", ci.hi},
                {"n_total", n_total}, {"n_gold", n_gold}};
    }
};

/// Doubly robust mean: m_i = yhat_i + (R_i / pi_i)(y_i - yhat_i), point = mean(m),
/// se = sd(m)/sqrt(N), CI = point +- 1.96 se.
inline DslEstimate dsl_estimate(const std::vector<std::string>& ids, const std::vector<double>& predicted,
                                const std::map<std::string, GoldLabel>& gold) {
    require(ids.size() == predicted.size(), ErrorCode::ShapeError, "one prediction per item required");
    if (ids.empty()) {
        fail(ErrorCode::EmptyInput, "dsl_estimate needs at least one item");
    }
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        require(index.emplace(ids[i], i).second, ErrorCode::SchemaError, "duplicate item id '" + ids[i] + "'");
    }
    std::vector<double> m(predicted);
    for (const auto& [id, g] : gold) {
        const auto it = index.find(id);
        if (it == index.end()) {
            fail(ErrorCode::KeyError, "gold label for unknown item '" + id + "'");
        }
        if (!(g.pi > 0.0 && g.pi <= 1.0)) {
            fail(ErrorCode::InvalidDesign, "gold item '" + id + "' has inclusion probability " + fmt_double(g.pi));
        }
        m[it->second] += (g.count - predicted[it->second]) / g.pi;
    }
    DslEstimate e;
    e.n_total = ids.size();
    e.n_gold = gold.size();
    const auto n = static_cast<double>(m.size());
    // Summation in a fixed (sorted-id) order keeps the estimate permutation invariant bit for bit.
    double sum = 0.0;
    for (const auto& [id, i] : index) {
        sum += m[i];
    }
    e.point = sum / n;
    double ss = 0.0;
    for (const auto& [id, i] : index) {
        ss += (m[i] - e.point) * (m[i] - e.point);
    }
    e.stderr_ = m.size() > 1 ? std::sqrt(ss / (n - 1.0)) / std::sqrt(n) : 0.0;
    e.ci = {e.point - z95 * e.stderr_, e.point + z95 * e.stderr_};
    return e;
}

// ---------------------------------------------------------------------------
// Effect sizes

enum class Method { Bigram, Judge, Dsl };

inline std::string to_string(Method m) {
    switch (m) {
    case Method::Bigram: return "bigram";
    case Method::Judge: return "judge";
    case Method::Dsl: return "dsl";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    if (s == "bigram") {
        return Method::Bigram;
    }
    if (s == "judge") {
        return Method::Judge;
    }
    if (s == "dsl") {
        return Method::Dsl;
    }
    fail(ErrorCode::ParseError, "unknown effect method '" + s + "'");
}

/// Percent change from baseline to steered; negative means fewer mentions.
struct EffectEstimate {
    Method method = Method::Bigram;
    std::string dataset;
    double point = 0.0;
    Interval ci;

    bool excludes_zero() const { return !ci.contains(0.0); }
};

/// Count-based effect with a bootstrap CI. Equal-length inputs are treated as paired
/// (item i of both conditions shares a prompt) and resampled jointly.
inline EffectEstimate percent_decrease(const std::vector<double>& base, const std::vector<double>& steered,
                                       Method method, std::uint64_t seed, std::string dataset = {},
                                       int resamples = default_resamples) {
    if (base.empty() || steered.empty()) {
        fail(ErrorCode::EmptyInput, "percent_decrease needs nonempty conditions");
    }
    const double mb = mean_of(base);
    if (!(mb > 0.0)) {
        fail(ErrorCode::UndefinedEffect, "baseline mean is zero");
    }
    EffectEstimate e;
    e.method = method;
    e.dataset = std::move(dataset);
    e.point = (mean_of(steered) - mb) / mb * 100.0;
    if (base.size() == steered.size()) {
        e.ci = bootstrap_interval(
            base.size(),
            [&](const std::vector<std::size_t>& idx) -> std::optional<double> {
                double sb = 0.0;
                double ss = 0.0;
                for (const auto i : idx) {
                    sb += base[i];
                    ss += steered[i];
                }
                if (sb <= 0.0) {
                    return std::nullopt;
                }
                return (ss - sb) / sb * 100.0;
            },
            seed, resamples);
    } else {
        std::mt19937_64 rng(seed);
        std::vector<double> stats;
        for (int b = 0; b < resamples; ++b) {
            double sb = 0.0;
            double ss = 0.0;
            for (std::size_t k = 0; k < base.size(); ++k) {
                sb += base[static_cast<std::size_t>(uniform_index(rng, base.size()))];
            }
            for (std::size_t k = 0; k < steered.size(); ++k) {
                ss += steered[static_cast<std::size_t>(uniform_index(rng, steered.size()))];
            }
            if (sb > 0.0) {
                const double mbb = sb / static_cast<double>(base.size());
                stats.push_back((ss / static_cast<double>(steered.size()) - mbb) / mbb * 100.0);
            }
        }
        std::sort(stats.begin(), stats.end());
        e.ci = {quantile_sorted(stats, 0.025), quantile_sorted(stats, 0.975)};
    }
    return e;
}

/// DSL effect with a delta-method CI from two independent DSL estimates.
inline EffectEstimate percent_decrease(const DslEstimate& base, const DslEstimate& steered, std::string dataset = {}) {
    if (!(base.point > 0.0)) {
        fail(ErrorCode::UndefinedEffect, "baseline DSL estimate is not positive");
    }
    EffectEstimate e;
    e.method = Method::Dsl;
    e.dataset = std::move(dataset);
    const double ratio = steered.point / base.point;
    e.point = (ratio - 1.0) * 100.0;
    const double var = (steered.stderr_ * steered.stderr_) / (base.point * base.point) +
                       (ratio * ratio) * (base.stderr_ * base.stderr_) / (base.point * base.point);
    const double half = z95 * std::sqrt(var) * 100.0;
    e.ci = {e.point - half, e.point + half};
    return e;
}

inline std::string effects_csv(const std::vector<EffectEstimate>& rows) {
    std::ostringstream os;
    os << "method,dataset,point,ci_lo,ci_hi\n";
    for (const auto& r : rows) {
        os << to_string(r.method) << ',' << r.dataset << ',' << fmt_double(r.point) << ',' << fmt_double(r.ci.lo)
           << ',' << fmt_double(r.ci.hi) << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Token probability deltas

struct DeltaRow {
    std::string token;
    double p_base = 0.0;
    double p_steered = 0.0;
    double delta = 0.0;
};

struct DeltaTable {
    std::vector<DeltaRow> rows;       ///< top_k by |delta|, descending
    std::vector<DeltaRow> all;        ///< full vocabulary, id order
    double delta_sum = 0.0;           ///< sum of delta over the vocabulary
    double max_step_mass_error = 0.0; ///< max over all steps of |sum p - 1|
    std::size_t base_steps = 0;
    std::size_t steered_steps = 0;

    std::string csv() const {
        std::ostringstream os;
        os << "token,p_base,p_steered,delta\n";
        for (const auto& r : rows) {
            os << csv_field(r.token) << ',' << fmt_double(r.p_base, 8) << ',' << fmt_double(r.p_steered, 8) << ','
               << fmt_double(r.delta, 8) << '\n';
        }
        return os.str();
    }

    const DeltaRow* find(const std::string& token) const {
        for (const auto& r : all) {
            if (r.token == token) {
                return &r;
            }
        }
        return nullptr;
    }
};

/// Mean next-token distribution over all greedy decoding steps of all prompts, baseline vs steered.
inline DeltaTable token_prob_delta(const tinylm::Weights<float>& w, const Vocab& vocab,
                                   const Intervention& intervention, const std::vector<PromptSample>& prompts,
                                   std::size_t top_k, int max_new_tokens = 64, int threads = 1) {
    require(!prompts.empty(), ErrorCode::EmptyInput, "token_prob_delta needs prompts");
    require(top_k >= 1, ErrorCode::SpecError, "top_k must be at least 1");
    tinylm::GenerationConfig gc;
    gc.temperature = 0.0;
    gc.max_new_tokens = max_new_tokens;
    gc.keep_probs = true;

    DeltaTable table;
    const auto v = static_cast<std::size_t>(w.config.vocab_size);
    auto mean_dist = [&](const Intervention* iv, std::size_t& steps) {
        const auto recs = tinylm::generate_all(w, vocab, prompts, gc, iv, threads);
        std::vector<double> acc(v, 0.0);
        steps = 0;
        for (const auto& r : recs) {
            for (const auto& p : r.step_probs) {
                double mass = 0.0;
                for (std::size_t i = 0; i < v; ++i) {
                    acc[i] += p[i];
                    mass += p[i];
                }
                table.max_step_mass_error = std::max(table.max_step_mass_error, std::abs(mass - 1.0));
                ++steps;
            }
        }
        for (auto& a : acc) {
            a /= static_cast<double>(steps);
        }
        return acc;
    };
    const auto base = mean_dist(nullptr, table.base_steps);
    const auto steered = mean_dist(&intervention, table.steered_steps);
    for (std::size_t i = 0; i < v; ++i) {
        DeltaRow r{vocab.token(static_cast<TokenId>(i)), base[i], steered[i], steered[i] - base[i]};
        table.delta_sum += r.delta;
        table.all.push_back(r);
    }
    table.rows = table.all;
    std::stable_sort(table.rows.begin(), table.rows.end(),
                     [](const DeltaRow& a, const DeltaRow& b) { return std::abs(a.delta) > std::abs(b.delta); });
    table.rows.resize(std::min(top_k, table.rows.size()));
    return table;
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (const char c : s) {
        switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

/// Horizontal bar chart of the delta table as a standalone SVG document.
inline std::string delta_svg(const DeltaTable& t, const std::string& title = "change in next-token probability") {
    const int row_h = 18;
    const int left = 120;
    const int width = 640;
    const int plot_w = width - left - 40;
    const int top = 40;
    const int height = top + row_h * static_cast<int>(t.rows.size()) + 30;
    double max_abs = 1e-12;
    for (const auto& r : t.rows) {
        max_abs = std::max(max_abs, std::abs(r.delta));
    }
    const double zero_x = left + plot_w / 2.0;
    const double scale = (plot_w / 2.0) / max_abs;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\">" << xml_escape(title) << "</text>\n";
    os << "<line x1=\"" << zero_x << "\" y1=\"" << top - 5 << "\" x2=\"" << zero_x << "\" y2=\"" << height - 25
       << "\" stroke=\"black\"/>\n";
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const auto& r = t.rows[i];
        const double y = top + static_cast<double>(i) * row_h;
        const double len = std::abs(r.delta) * scale;
        const double x = r.delta < 0 ? zero_x - len : zero_x;
        os << "<text x=\"" << left - 6 << "\" y=\"" << y + 12 << "\" text-anchor=\"end\">" << xml_escape(r.token)
           << "</text>\n";
        os << "<rect x=\"" << fmt_double(x) << "\" y=\"" << y + 2 << "\" width=\"" << fmt_double(len)
           << "\" height=\"" << row_h - 4 << "\" fill=\"" << (r.delta < 0 ? "#c0392b" : "#2471a3") << "\"/>\n";
    }
    os << "<text x=\"" << zero_x << "\" y=\"" << height - 8 << "\" text-anchor=\"middle\">max |delta| = "
       << fmt_double(max_abs, 4) << "</text>\n";
    os << "</svg>\n";
    return os.str();
}

} // namespace steerlab::eval
