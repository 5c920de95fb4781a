#pragma once

#include <algorithm>
#include <cmath>
#include <ctime>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "steerlab/corpus.hpp"
#include "steerlab/error.hpp"
#include "steerlab/eval.hpp"
#include "steerlab/generate.hpp"
#include "steerlab/intervention.hpp"
#include "steerlab/model.hpp"
#include "steerlab/sample.hpp"
#include "steerlab/text.hpp"
#include "steerlab/util.hpp"

namespace steerlab::steering {

using tinylm::Weights;

/// Standard (benign) and bias-eliciting prompt sets.
struct ContrastiveDataset {
    std::vector<PromptSample> standard;
    std::vector<PromptSample> bias;
    std::string attribute;
    std::string source;

    void validate() const {
        require(!standard.empty(), ErrorCode::EmptyDataset, "standard set is empty");
        require(!bias.empty(), ErrorCode::EmptyDataset, "bias set is empty");
        std::set<std::string> keys;
        for (const auto& s : standard) {
            keys.insert(s.key());
        }
        for (const auto& s : bias) {
            require(keys.count(s.key()) == 0, ErrorCode::SpecError,
                    "sample '" + s.id + "' appears in both the standard and bias sets");
        }
    }
};

/// Per-hook mean residual at the policy-selected positions.
struct ActivationSummary {
    std::vector<std::vector<double>> means;  // [hook][d_model]
    std::size_t count = 0;
    PositionPolicy policy = PositionPolicy::LastPromptToken;
    tinylm::ModelConfig config;
};

/// Residual vectors of one sample at the policy position(s), averaged; [hook][d_model].
inline std::vector<std::vector<double>> sample_activation(const tinylm::ForwardTrace& trace, PositionPolicy policy) {
    const std::size_t hooks = trace.residuals.size();
    const auto d = static_cast<std::size_t>(trace.residuals.front().cols());
    std::vector<std::vector<double>> out(hooks, std::vector<double>(d, 0.0));
    std::size_t first = trace.seq_len - 1;
    if (policy == PositionPolicy::MeanOverPrompt) {
        first = trace.prefix_len;
    }
    const auto npos = static_cast<double>(trace.seq_len - first);
    for (std::size_t h = 0; h < hooks; ++h) {
        for (std::size_t p = first; p < trace.seq_len; ++p) {
            const auto r = trace.at(h, p);
            for (std::size_t j = 0; j < d; ++j) {
                out[h][j] += static_cast<double>(r[j]);
            }
        }
        for (auto& v : out[h]) {
            v /= npos;
        }
    }
    return out;
}

inline tinylm::ForwardTrace trace_prompt(const Weights<float>& w, const Vocab& vocab, const PromptSample& s,
                                         const Intervention* intervention = nullptr) {
    const auto enc = encode_sample(vocab, s);
    const tinylm::Matrix<float> prefix =
        enc.markers.empty() ? tinylm::Matrix<float>() : tinylm::prefix_from_markers(w, enc.markers);
    return *tinylm::forward(w, enc.prompt, prefix, intervention, true).trace;
}

/// Exact per-hook mean over samples: a parallel map of forward passes, then an in-order reduce.
inline ActivationSummary collect_activations(const Weights<float>& w, const Vocab& vocab,
                                             const std::vector<PromptSample>& samples,
                                             PositionPolicy policy = PositionPolicy::LastPromptToken,
                                             int threads = 1) {
    if (samples.empty()) {
        fail(ErrorCode::EmptyDataset, "collect_activations needs at least one sample");
    }
    std::vector<std::vector<std::vector<double>>> per(samples.size());
    tinylm::parallel_for(samples.size(), threads, [&](std::size_t i) {
        per[i] = sample_activation(trace_prompt(w, vocab, samples[i]), policy);
    });
    ActivationSummary out;
    out.policy = policy;
    out.config = w.config;
    out.count = samples.size();
    out.means.assign(per.front().size(), std::vector<double>(per.front().front().size(), 0.0));
    for (const auto& p : per) {
        for (std::size_t h = 0; h < p.size(); ++h) {
            for (std::size_t j = 0; j < p[h].size(); ++j) {
                out.means[h][j] += p[h][j];
            }
        }
    }
    for (auto& m : out.means) {
        for (auto& v : m) {
            v /= static_cast<double>(samples.size());
        }
    }
    return out;
}

inline constexpr double degenerate_norm = 1e-8;

/// u = mean_bias - mean_standard at `layer`, normalised to unit length.
inline SteeringDirection estimate_direction(const ActivationSummary& bias, const ActivationSummary& standard,
                                            HookPoint layer, double alpha = 1.0) {
    require(bias.policy == standard.policy, ErrorCode::SpecError, "summaries use different position policies");
    require(bias.config == standard.config, ErrorCode::SpecError, "summaries come from different model configs");
    require(alpha >= 0.0, ErrorCode::SpecError, "alpha must be nonnegative");
    const auto h = layer.index();
    require(h < bias.means.size() && layer.valid_for(bias.config.n_layers), ErrorCode::ShapeError,
            "hook " + layer.name() + " outside the model");
    const auto& a = bias.means[h];
    const auto& b = standard.means[h];
    std::vector<double> diff(a.size());
    double sq = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        diff[j] = a[j] - b[j];
        sq += diff[j] * diff[j];
    }
    const double norm = std::sqrt(sq);
    if (!(norm >= degenerate_norm)) {
        fail(ErrorCode::DegenerateDirection, "mean difference at " + layer.name() + " has norm " + fmt_double(norm));
    }
    SteeringDirection d;
    d.u.resize(a.size());
    for (std::size_t j = 0; j < a.size(); ++j) {
        d.u[j] = static_cast<float>(diff[j] / norm);
    }
    d.source = layer;
    d.alpha = alpha;
    d.policy = bias.policy;
    d.metadata = {{"raw_norm", norm}, {"n_bias", bias.count}, {"n_standard", standard.count}};
    return d;
}

/// Default hook set is every residual write point; default scope is prefix, prompt and generation.
inline Intervention make_intervention(const SteeringDirection& d, const tinylm::ModelConfig& config,
                                      std::optional<std::vector<HookPoint>> hooks = std::nullopt,
                                      InterventionScope scope = {}) {
    require(d.alpha >= 0.0, ErrorCode::SpecError, "alpha must be nonnegative");
    if (d.u.size() != static_cast<std::size_t>(config.d_model)) {
        fail(ErrorCode::ShapeError, "direction dimension does not match the model");
    }
    std::vector<HookPoint> set;
    if (hooks) {
        set = *hooks;
        for (const auto& h : set) {
            require(h.valid_for(config.n_layers), ErrorCode::InvalidHookSet, "hook " + h.name() + " outside the model");
        }
    } else {
        for (std::size_t i = 0; i < config.hook_count(); ++i) {
            set.push_back(HookPoint::from_index(i));
        }
    }
    return Intervention(d, std::move(set), scope);
}

// ---------------------------------------------------------------------------
// Layer sweep

struct SweepConfig {
    bool all_hooks = false;           ///< also try EmbedOut and PostAttn candidates
    int samples_per_prompt = 8;       ///< generations per held-out prompt
    double max_perplexity_ratio = 1.10;
    double alpha = 1.0;
    PositionPolicy policy = PositionPolicy::LastPromptToken;
    eval::CountMode mode = eval::CountMode::Lenient;
    tinylm::GenerationConfig gen;
    int threads = 1;

    nlohmann::json to_json() const {
        return {{"all_hooks", all_hooks},
                {"samples_per_prompt", samples_per_prompt},
                {"max_perplexity_ratio", max_perplexity_ratio},
                {"alpha", alpha},
                {"position_policy", to_string(policy)},
                {"count_mode", mode == eval::CountMode::Strict ? "strict" : "lenient"},
                {"generation", gen.to_json()}};
    }

    static SweepConfig from_json(const nlohmann::json& j, SweepConfig base) {
        base.all_hooks = j.value("all_hooks", base.all_hooks);
        base.samples_per_prompt = j.value("samples_per_prompt", base.samples_per_prompt);
        base.max_perplexity_ratio = j.value("max_perplexity_ratio", base.max_perplexity_ratio);
        base.alpha = j.value("alpha", base.alpha);
        if (j.contains("position_policy")) {
            base.policy = parse_position_policy(j.at("position_policy").get<std::string>());
        }
        if (j.contains("count_mode")) {
            base.mode = eval::parse_count_mode(j.at("count_mode").get<std::string>());
        }
        if (j.contains("generation")) {
            base.gen = tinylm::GenerationConfig::from_json(j.at("generation"), base.gen);
        }
        return base;
    }
};

struct SweepCandidate {
    HookPoint layer;
    std::optional<SteeringDirection> direction;  ///< empty when the mean difference was degenerate
    double attr_rate = 0.0;
    double perplexity_ratio = 0.0;
    bool disqualified = false;
    bool selected = false;
    std::vector<std::string> generations;  ///< held-out generations, kept for review
};

struct SweepResult {
    double baseline_rate = 0.0;
    double baseline_perplexity = 0.0;
    std::vector<SweepCandidate> ranked;  ///< ascending by score; disqualified candidates last

    const SweepCandidate& best() const { return ranked.front(); }

    /// CSV `layer,attr_rate,perplexity_ratio,selected` in ranked order.
    std::string csv() const {
        std::ostringstream os;
        os << "layer,attr_rate,perplexity_ratio,selected\n";
        for (const auto& c : ranked) {
            os << c.layer.name() << ',' << fmt_double(c.attr_rate) << ',' << fmt_double(c.perplexity_ratio) << ','
               << (c.selected ? 1 : 0) << '\n';
        }
        return os.str();
    }
};

/// Mean counted attribute bigrams per generation of `prompts`, each sampled `k` times.
inline double heldout_rate(const Weights<float>& w, const Vocab& vocab, const std::vector<PromptSample>& prompts,
                           const eval::AnnotationList& annotations, const SweepConfig& cfg,
                           const Intervention* intervention, std::vector<std::string>* texts = nullptr) {
    std::vector<PromptSample> expanded;
    for (const auto& p : prompts) {
        for (int k = 0; k < cfg.samples_per_prompt; ++k) {
            expanded.push_back(p);
        }
    }
    const auto recs = tinylm::generate_all(w, vocab, expanded, cfg.gen, intervention, cfg.threads);
    double total = 0.0;
    for (const auto& r : recs) {
        total += static_cast<double>(eval::count_bigrams(r.text, annotations, cfg.mode).count);
        if (texts != nullptr) {
            texts->push_back(r.text);
        }
    }
    return total / static_cast<double>(recs.size());
}

/// One candidate direction per hook layer, scored by held-out attribute-bigram rate under
/// ablation at every hook; candidates whose benign perplexity ratio exceeds the guard are
/// ranked after all others and cannot be selected.
inline SweepResult sweep_layers(const Weights<float>& w, const Vocab& vocab, const ContrastiveDataset& data,
                                const std::vector<PromptSample>& heldout, const std::vector<PromptSample>& benign,
                                const eval::AnnotationList& annotations, const SweepConfig& cfg = {}) {
    data.validate();
    require(!heldout.empty(), ErrorCode::EmptyDataset, "held-out set is empty");
    require(cfg.samples_per_prompt >= 1, ErrorCode::SpecError, "samples_per_prompt must be at least 1");
    std::set<std::string> contrastive;
    for (const auto* set : {&data.standard, &data.bias}) {
        for (const auto& s : *set) {
            contrastive.insert(s.key());
        }
    }
    for (const auto& s : heldout) {
        require(contrastive.count(s.key()) == 0, ErrorCode::SpecError,
                "held-out sample '" + s.id + "' also appears in the contrastive set");
    }

    const auto bias = collect_activations(w, vocab, data.bias, cfg.policy, cfg.threads);
    const auto standard = collect_activations(w, vocab, data.standard, cfg.policy, cfg.threads);

    SweepResult out;
    out.baseline_rate = heldout_rate(w, vocab, heldout, annotations, cfg, nullptr);
    out.baseline_perplexity = tinylm::perplexity(w, vocab, benign, nullptr, cfg.threads);

    std::vector<HookPoint> layers;
    for (std::size_t i = 0; i < w.config.hook_count(); ++i) {
        const auto h = HookPoint::from_index(i);
        if (cfg.all_hooks || h.kind == HookPoint::Kind::PostMlp) {
            layers.push_back(h);
        }
    }
    std::size_t viable = 0;
    for (const auto& layer : layers) {
        SweepCandidate c;
        c.layer = layer;
        try {
            c.direction = estimate_direction(bias, standard, layer, cfg.alpha);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::DegenerateDirection) {
                throw;
            }
            c.disqualified = true;
            c.attr_rate = std::numeric_limits<double>::infinity();
            c.perplexity_ratio = std::numeric_limits<double>::infinity();
            out.ranked.push_back(std::move(c));
            continue;
        }
        const auto iv = make_intervention(*c.direction, w.config);
        c.attr_rate = heldout_rate(w, vocab, heldout, annotations, cfg, &iv, &c.generations);
        c.perplexity_ratio = tinylm::perplexity(w, vocab, benign, &iv, cfg.threads) / out.baseline_perplexity;
        c.disqualified = c.perplexity_ratio > cfg.max_perplexity_ratio;
        viable += c.disqualified ? 0 : 1;
        out.ranked.push_back(std::move(c));
    }
    if (viable == 0) {
        fail(ErrorCode::NoViableDirection, "no candidate direction passed the degeneracy and perplexity checks");
    }
    std::stable_sort(out.ranked.begin(), out.ranked.end(), [](const SweepCandidate& a, const SweepCandidate& b) {
        if (a.disqualified != b.disqualified) {
            return !a.disqualified;
        }
        if (a.attr_rate != b.attr_rate) {
            return a.attr_rate < b.attr_rate;
        }
        return a.perplexity_ratio < b.perplexity_ratio;
    });
    out.ranked.front().selected = true;
    return out;
}

// ---------------------------------------------------------------------------
// Direction file

inline constexpr int direction_format_version = 1;

inline std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline nlohmann::json direction_to_json(const SteeringDirection& d) {
    nlohmann::json j;
    j["version"] = direction_format_version;
    j["model_hash"] = d.metadata.value("model_hash", "");
    j["hook_layer"] = d.source.name();
    j["alpha"] = d.alpha;
    j["position_policy"] = to_string(d.policy);
    j["u"] = d.u;
    j["created_at"] = d.metadata.value("created_at", utc_timestamp());
    j["dataset_hashes"] = d.metadata.value("dataset_hashes", nlohmann::json::object());
    return j;
}

inline SteeringDirection direction_from_json(const nlohmann::json& j) {
    try {
        require(j.at("version").get<int>() == direction_format_version, ErrorCode::FormatError,
                "unsupported direction file version");
        SteeringDirection d;
        d.u = j.at("u").get<std::vector<float>>();
        d.source = HookPoint::parse(j.at("hook_layer").get<std::string>());
        d.alpha = j.at("alpha").get<double>();
        d.policy = parse_position_policy(j.value("position_policy", std::string("last-prompt-token")));
        d.metadata = {{"model_hash", j.value("model_hash", "")},
                      {"created_at", j.value("created_at", "")},
                      {"dataset_hashes", j.value("dataset_hashes", nlohmann::json::object())}};
        require(!d.u.empty(), ErrorCode::FormatError, "direction vector is empty");
        require(d.alpha >= 0.0, ErrorCode::FormatError, "alpha must be nonnegative");
        double sq = 0.0;
        for (const float v : d.u) {
            sq += static_cast<double>(v) * v;
        }
        require(std::abs(std::sqrt(sq) - 1.0) <= 1e-5, ErrorCode::FormatError, "direction vector is not unit length");
        return d;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::FormatError, std::string("direction file: ") + e.what());
    }
}

inline void save_direction(const std::string& path, const SteeringDirection& d) {
    write_file(path, direction_to_json(d).dump(2) + "\n");
}

inline SteeringDirection load_direction(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorCode::ParseError, path + ": " + e.what());
    }
    return direction_from_json(j);
}

} // namespace steerlab::steering
