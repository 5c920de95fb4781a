#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "steerlab/error.hpp"
#include "steerlab/model.hpp"
#include "steerlab/sample.hpp"
#include "steerlab/util.hpp"
#include "steerlab/vocab.hpp"

namespace steerlab::tinylm {

struct GenerationConfig {
    double temperature = 0.75;
    int max_new_tokens = 256;
    std::uint64_t seed = 0;
    int batch_size = 3;
    bool keep_probs = false;  ///< retain per-step next-token distributions

    void validate() const {
        require(temperature >= 0.0, ErrorCode::SpecError, "temperature must be nonnegative");
        require(max_new_tokens >= 1, ErrorCode::SpecError, "max_new_tokens must be at least 1");
        require(batch_size >= 1, ErrorCode::SpecError, "batch_size must be at least 1");
    }

    nlohmann::json to_json() const {
        return {{"temperature", temperature}, {"max_new_tokens", max_new_tokens}, {"seed", seed},
                {"batch_size", batch_size}};
    }

    static GenerationConfig from_json(const nlohmann::json& j) { return from_json(j, GenerationConfig{}); }

    static GenerationConfig from_json(const nlohmann::json& j, GenerationConfig base) {
        base.temperature = j.value("temperature", base.temperature);
        base.max_new_tokens = j.value("max_new_tokens", base.max_new_tokens);
        base.seed = j.value("seed", base.seed);
        base.batch_size = j.value("batch_size", base.batch_size);
        return base;
    }
};

struct GenerationRecord {
    PromptSample sample;
    std::vector<TokenId> tokens;  ///< sampled ids, including a final EOS when one was produced
    std::string text;
    std::vector<std::vector<float>> step_probs;  ///< untempered next-token distribution per step
    GenerationConfig config;
    std::uint64_t seed = 0;  ///< per-record sampler seed
    std::string intervention = "none";

    nlohmann::json to_json() const {
        nlohmann::json j = {{"id", sample.id}, {"prompt", sample.prompt}, {"generation", text},
                            {"seed", seed}, {"intervention", intervention}, {"config", config.to_json()}};
        if (!sample.markers.empty()) {
            j["marker"] = sample.markers;
        }
        if (sample.label) {
            j["label"] = *sample.label;
        }
        if (sample.reference) {
            j["reference"] = *sample.reference;
        }
        return j;
    }
};

namespace detail {

inline std::vector<double> softmax(const float* logits, std::size_t n, double temperature = 1.0) {
    std::vector<double> p(n);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        mx = std::max(mx, static_cast<double>(logits[i]));
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = std::exp((static_cast<double>(logits[i]) - mx) / temperature);
        sum += p[i];
    }
    for (auto& v : p) {
        v /= sum;
    }
    return p;
}

} // namespace detail

/// Samples one continuation. The intervention (if any) is active according to its scope for
/// the prefix, prompt and generated positions.
inline GenerationRecord generate(const Weights<float>& w, const Vocab& vocab, const PromptSample& sample,
                                 const GenerationConfig& gen, const Intervention* intervention = nullptr,
                                 std::uint64_t record_seed = 0) {
    gen.validate();
    const auto enc = encode_sample(vocab, sample);
    const std::size_t context = enc.markers.size() + enc.prompt.size();
    if (context + static_cast<std::size_t>(gen.max_new_tokens) > static_cast<std::size_t>(w.config.max_seq)) {
        fail(ErrorCode::SequenceTooLong, "prompt of " + std::to_string(context) + " positions plus " +
                                             std::to_string(gen.max_new_tokens) + " new tokens exceeds max_seq " +
                                             std::to_string(w.config.max_seq));
    }

    GenerationRecord rec;
    rec.sample = sample;
    rec.config = gen;
    rec.seed = record_seed;
    rec.intervention = intervention != nullptr ? intervention->id() : "none";

    Session<float> session(w, intervention);
    Matrix<float> inputs(static_cast<Eigen::Index>(context), w.config.d_model);
    std::vector<Phase> phases(context, Phase::Prompt);
    const auto np = static_cast<Eigen::Index>(enc.markers.size());
    if (np > 0) {
        inputs.topRows(np) = prefix_from_markers(w, enc.markers);
        std::fill(phases.begin(), phases.begin() + np, Phase::Prefix);
    }
    inputs.bottomRows(static_cast<Eigen::Index>(enc.prompt.size())) = Session<float>::embed(w, enc.prompt);
    Matrix<float> logits = session.feed(inputs, phases);

    std::mt19937_64 rng(record_seed);
    const auto v = static_cast<std::size_t>(w.config.vocab_size);
    const Phase gen_phase[1] = {Phase::Generation};
    for (int step = 0; step < gen.max_new_tokens; ++step) {
        const float* last = &logits(logits.rows() - 1, 0);
        const auto probs = detail::softmax(last, v);
        TokenId next = 0;
        if (gen.temperature == 0.0) {
            for (std::size_t i = 1; i < v; ++i) {
                if (last[i] > last[static_cast<std::size_t>(next)]) {
                    next = static_cast<TokenId>(i);
                }
            }
        } else {
            const auto tempered = gen.temperature == 1.0 ? probs : detail::softmax(last, v, gen.temperature);
            const double u = uniform01(rng);
            double acc = 0.0;
            next = static_cast<TokenId>(v - 1);
            for (std::size_t i = 0; i < v; ++i) {
                acc += tempered[i];
                if (u < acc) {
                    next = static_cast<TokenId>(i);
                    break;
                }
            }
        }
        if (gen.keep_probs) {
            rec.step_probs.emplace_back(probs.begin(), probs.end());
        }
        rec.tokens.push_back(next);
        if (next == Vocab::eos_id || step + 1 == gen.max_new_tokens) {
            break;
        }
        logits = session.feed(Session<float>::embed(w, std::span<const TokenId>(&next, 1)), gen_phase);
    }
    rec.text = vocab.decode(rec.tokens);
    return rec;
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first failure.
template <typename F>
void parallel_for(std::size_t n, int threads, F&& fn) {
    const auto workers = static_cast<std::size_t>(std::max(1, std::min<int>(threads, static_cast<int>(n))));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) {
                        error = std::current_exception();
                    }
                }
            }
        });
    }
    for (auto& th : pool) {
        th.join();
    }
    if (error) {
        std::rethrow_exception(error);
    }
}

/// Generates for every sample; sampler seed of item i is derived from (gen.seed, i), so the
/// output does not depend on the thread count.
inline std::vector<GenerationRecord> generate_all(const Weights<float>& w, const Vocab& vocab,
                                                  const std::vector<PromptSample>& samples,
                                                  const GenerationConfig& gen,
                                                  const Intervention* intervention = nullptr, int threads = 1) {
    std::vector<GenerationRecord> out(samples.size());
    parallel_for(samples.size(), threads, [&](std::size_t i) {
        out[i] = generate(w, vocab, samples[i], gen, intervention, derive_seed(gen.seed, i));
    });
    return out;
}

/// exp(mean next-token cross-entropy) over [markers, BOS, prompt, response, EOS] sequences;
/// markers enter as prefix embeddings, and every token after the first position is a target.
inline double perplexity(const Weights<float>& w, const Vocab& vocab, const std::vector<PromptSample>& corpus,
                         const Intervention* intervention = nullptr, int threads = 1) {
    require(!corpus.empty(), ErrorCode::EmptyCorpus, "perplexity needs a nonempty corpus");
    std::vector<double> nll(corpus.size(), 0.0);
    std::vector<std::size_t> counts(corpus.size(), 0);
    parallel_for(corpus.size(), threads, [&](std::size_t k) {
        const auto& s = corpus[k];
        const auto enc = encode_sample(vocab, s);
        std::vector<TokenId> tokens = enc.prompt;
        if (s.generation) {
            const auto resp = vocab.encode(*s.generation);
            tokens.insert(tokens.end(), resp.begin(), resp.end());
        }
        tokens.push_back(Vocab::eos_id);
        const Matrix<float> prefix = enc.markers.empty() ? Matrix<float>() : prefix_from_markers(w, enc.markers);
        const auto res = forward(w, tokens, prefix, intervention);
        const std::size_t np = enc.markers.size();
        const std::size_t v = static_cast<std::size_t>(w.config.vocab_size);
        for (std::size_t pos = 0; pos + 1 < np + tokens.size(); ++pos) {
            if (pos + 1 < np) {
                continue;  // next position is another prefix vector, not a token
            }
            const TokenId target = tokens[pos + 1 - np];
            const auto p = detail::softmax(&res.logits(static_cast<Eigen::Index>(pos), 0), v);
            nll[k] -= std::log(p[static_cast<std::size_t>(target)]);
            ++counts[k];
        }
    });
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < corpus.size(); ++k) {
        total += nll[k];
        n += counts[k];
    }
    return std::exp(total / static_cast<double>(n));
}

} // namespace steerlab::tinylm
