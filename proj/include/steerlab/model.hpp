#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "steerlab/error.hpp"
#include "steerlab/intervention.hpp"
#include "steerlab/util.hpp"
#include "steerlab/vocab.hpp"

namespace steerlab::tinylm {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

inline constexpr double norm_eps = 1e-5;

struct ModelConfig {
    int n_layers = 4;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 256;
    int vocab_size = 0;
    int max_seq = 288;
    std::uint64_t seed = 0;

    int head_dim() const { return d_model / n_heads; }
    std::size_t hook_count() const { return HookPoint::count(n_layers); }

    void validate() const {
        require(n_layers >= 1 && d_model >= 1 && n_heads >= 1 && d_ff >= 1 && vocab_size >= 1, ErrorCode::SpecError,
                "model dimensions must be positive");
        require(d_model % n_heads == 0, ErrorCode::SpecError, "d_model must be divisible by n_heads");
        require(max_seq >= 2, ErrorCode::SpecError, "max_seq must be at least 2");
    }

    nlohmann::json to_json() const {
        return {{"n_layers", n_layers}, {"d_model", d_model}, {"n_heads", n_heads}, {"d_ff", d_ff},
                {"vocab_size", vocab_size}, {"max_seq", max_seq}, {"seed", seed}};
    }

    static ModelConfig from_json(const nlohmann::json& j) { return from_json(j, ModelConfig{}); }

    static ModelConfig from_json(const nlohmann::json& j, ModelConfig base) {
        base.n_layers = j.value("n_layers", base.n_layers);
        base.d_model = j.value("d_model", base.d_model);
        base.n_heads = j.value("n_heads", base.n_heads);
        base.d_ff = j.value("d_ff", base.d_ff);
        base.vocab_size = j.value("vocab_size", base.vocab_size);
        base.max_seq = j.value("max_seq", base.max_seq);
        base.seed = j.value("seed", base.seed);
        return base;
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct LayerWeights {
    Vector<T> attn_norm;
    Matrix<T> wq, wk, wv, wo;  // d_model x d_model, applied as x * W
    Vector<T> mlp_norm;
    Matrix<T> w_in;            // d_model x d_ff
    Vector<T> b_in;            // d_ff
    Matrix<T> w_out;           // d_ff x d_model
};

/// All parameters of the decoder. Block order (also the on-disk order):
/// tok_emb, pos_emb, then per layer attn_norm, wq, wk, wv, wo, mlp_norm, w_in, b_in, w_out,
/// then final_norm, unembed.
template <typename T>
struct Weights {
    ModelConfig config;
    Matrix<T> tok_emb;  // vocab x d_model
    Matrix<T> pos_emb;  // max_seq x d_model
    std::vector<LayerWeights<T>> layers;
    Vector<T> final_norm;
    Matrix<T> unembed;  // d_model x vocab

    static Weights zeros(const ModelConfig& c) {
        c.validate();
        Weights w;
        w.config = c;
        const int d = c.d_model;
        w.tok_emb = Matrix<T>::Zero(c.vocab_size, d);
        w.pos_emb = Matrix<T>::Zero(c.max_seq, d);
        w.layers.resize(static_cast<std::size_t>(c.n_layers));
        for (auto& l : w.layers) {
            l.attn_norm = Vector<T>::Zero(d);
            l.wq = Matrix<T>::Zero(d, d);
            l.wk = Matrix<T>::Zero(d, d);
            l.wv = Matrix<T>::Zero(d, d);
            l.wo = Matrix<T>::Zero(d, d);
            l.mlp_norm = Vector<T>::Zero(d);
            l.w_in = Matrix<T>::Zero(d, c.d_ff);
            l.b_in = Vector<T>::Zero(c.d_ff);
            l.w_out = Matrix<T>::Zero(c.d_ff, d);
        }
        w.final_norm = Vector<T>::Zero(d);
        w.unembed = Matrix<T>::Zero(d, c.vocab_size);
        return w;
    }

    /// Seeded Gaussian init; norms start at 1, residual output projections are scaled by 1/sqrt(2L).
    static Weights init(const ModelConfig& c, double std_dev = 0.02) {
        Weights w = zeros(c);
        std::mt19937_64 rng(c.seed);
        auto fill = [&](auto& m, double s) {
            for (Eigen::Index i = 0; i < m.size(); ++i) {
                m.data()[i] = static_cast<T>(s * normal01(rng));
            }
        };
        const double out_std = std_dev / std::sqrt(2.0 * c.n_layers);
        fill(w.tok_emb, std_dev);
        fill(w.pos_emb, std_dev);
        for (auto& l : w.layers) {
            l.attn_norm.setOnes();
            fill(l.wq, std_dev);
            fill(l.wk, std_dev);
            fill(l.wv, std_dev);
            fill(l.wo, out_std);
            l.mlp_norm.setOnes();
            fill(l.w_in, std_dev);
            fill(l.w_out, out_std);
        }
        w.final_norm.setOnes();
        fill(w.unembed, std_dev);
        return w;
    }

    template <typename F>
    void for_each_block(F&& f) {
        visit(*this, f);
    }

    template <typename F>
    void for_each_block(F&& f) const {
        visit(*this, f);
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for_each_block([&](const std::string&, auto span) { n += span.size(); });
        return n;
    }

    bool all_finite() const {
        bool ok = true;
        for_each_block([&](const std::string&, auto span) {
            for (const auto v : span) {
                ok = ok && std::isfinite(static_cast<double>(v));
            }
        });
        return ok;
    }

    template <typename U>
    Weights<U> cast() const {
        Weights<U> out;
        out.config = config;
        out.tok_emb = tok_emb.template cast<U>();
        out.pos_emb = pos_emb.template cast<U>();
        out.layers.resize(layers.size());
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& a = layers[i];
            auto& b = out.layers[i];
            b.attn_norm = a.attn_norm.template cast<U>();
            b.wq = a.wq.template cast<U>();
            b.wk = a.wk.template cast<U>();
            b.wv = a.wv.template cast<U>();
            b.wo = a.wo.template cast<U>();
            b.mlp_norm = a.mlp_norm.template cast<U>();
            b.w_in = a.w_in.template cast<U>();
            b.b_in = a.b_in.template cast<U>();
            b.w_out = a.w_out.template cast<U>();
        }
        out.final_norm = final_norm.template cast<U>();
        out.unembed = unembed.template cast<U>();
        return out;
    }

private:
    template <typename Self, typename F>
    static void visit(Self& self, F& f) {
        auto span_of = [](auto& m) {
            using Elem = std::remove_reference_t<decltype(*m.data())>;
            return std::span<Elem>(m.data(), static_cast<std::size_t>(m.size()));
        };
        f(std::string("tok_emb"), span_of(self.tok_emb));
        f(std::string("pos_emb"), span_of(self.pos_emb));
        for (std::size_t i = 0; i < self.layers.size(); ++i) {
            auto& l = self.layers[i];
            const std::string p = "layers." + std::to_string(i) + ".";
            f(p + "attn_norm", span_of(l.attn_norm));
            f(p + "wq", span_of(l.wq));
            f(p + "wk", span_of(l.wk));
            f(p + "wv", span_of(l.wv));
            f(p + "wo", span_of(l.wo));
            f(p + "mlp_norm", span_of(l.mlp_norm));
            f(p + "w_in", span_of(l.w_in));
            f(p + "b_in", span_of(l.b_in));
            f(p + "w_out", span_of(l.w_out));
        }
        f(std::string("final_norm"), span_of(self.final_norm));
        f(std::string("unembed"), span_of(self.unembed));
    }
};

/// Content hash of the parameters, used to bind directions to the model they came from.
template <typename T>
std::string weights_hash(const Weights<T>& w) {
    std::string bytes = w.config.to_json().dump();
    w.for_each_block([&](const std::string&, auto span) {
        for (const auto v : span) {
            const float f = static_cast<float>(v);
            bytes.append(reinterpret_cast<const char*>(&f), sizeof f);
        }
    });
    return sha256_hex(bytes);
}

namespace detail {

/// Row-wise RMS normalisation; writes inverse RMS per row when `inv_rms` is given.
template <typename T>
Matrix<T> rms_norm(const Matrix<T>& x, const Vector<T>& gain, std::vector<double>* inv_rms = nullptr) {
    Matrix<T> y(x.rows(), x.cols());
    if (inv_rms != nullptr) {
        inv_rms->resize(static_cast<std::size_t>(x.rows()));
    }
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double ss = 0.0;
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const double v = static_cast<double>(x(i, j));
            ss += v * v;
        }
        const double r = 1.0 / std::sqrt(ss / static_cast<double>(x.cols()) + norm_eps);
        if (inv_rms != nullptr) {
            (*inv_rms)[static_cast<std::size_t>(i)] = r;
        }
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            y(i, j) = static_cast<T>(static_cast<double>(x(i, j)) * r * static_cast<double>(gain(j)));
        }
    }
    return y;
}

inline constexpr double gelu_c = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double u) {
    return 0.5 * u * (1.0 + std::tanh(gelu_c * (u + 0.044715 * u * u * u)));
}

inline double gelu_grad(double u) {
    const double t = std::tanh(gelu_c * (u + 0.044715 * u * u * u));
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * gelu_c * (1.0 + 3.0 * 0.044715 * u * u);
}

/// In-place softmax of a score row, accumulated in double.
template <typename T>
void softmax_row(std::span<T> s) {
    double mx = -std::numeric_limits<double>::infinity();
    for (const auto v : s) {
        mx = std::max(mx, static_cast<double>(v));
    }
    double sum = 0.0;
    for (auto& v : s) {
        const double e = std::exp(static_cast<double>(v) - mx);
        v = static_cast<T>(e);
        sum += e;
    }
    for (auto& v : s) {
        v = static_cast<T>(static_cast<double>(v) / sum);
    }
}

} // namespace detail

/// Residual values at every hook point and position of one forward pass.
struct ForwardTrace {
    std::vector<Matrix<float>> residuals;  // [hook] -> seq_len x d_model
    std::size_t prefix_len = 0;
    std::size_t seq_len = 0;

    std::span<const float> at(std::size_t hook, std::size_t pos) const {
        const auto& m = residuals.at(hook);
        return {m.data() + static_cast<Eigen::Index>(pos) * m.cols(), static_cast<std::size_t>(m.cols())};
    }

    std::size_t vector_count() const { return residuals.size() * seq_len; }
};

/// Incremental decoder state (key/value cache). One session per sequence; not shared across threads.
template <typename T>
class Session {
public:
    explicit Session(const Weights<T>& w, const Intervention* intervention = nullptr)
        : w_(w), intervention_(intervention) {
        const auto& c = w.config;
        if (intervention_ != nullptr && intervention_->direction().dim() != static_cast<std::size_t>(c.d_model)) {
            fail(ErrorCode::ShapeError, "intervention direction has dimension " +
                                            std::to_string(intervention_->direction().dim()) + ", model " +
                                            std::to_string(c.d_model));
        }
        keys_.assign(static_cast<std::size_t>(c.n_layers), Matrix<T>(c.max_seq, c.d_model));
        values_.assign(static_cast<std::size_t>(c.n_layers), Matrix<T>(c.max_seq, c.d_model));
    }

    std::size_t length() const noexcept { return length_; }

    /// Appends input embeddings (before positional encoding) and returns logits for them.
    Matrix<T> feed(const Matrix<T>& inputs, std::span<const Phase> phases, ForwardTrace* trace = nullptr) {
        const auto& c = w_.config;
        const auto n = static_cast<std::size_t>(inputs.rows());
        if (inputs.cols() != c.d_model) {
            fail(ErrorCode::ShapeError, "input rows have dimension " + std::to_string(inputs.cols()) + ", expected " +
                                            std::to_string(c.d_model));
        }
        require(phases.size() == n, ErrorCode::ShapeError, "one phase per input row required");
        if (length_ + n > static_cast<std::size_t>(c.max_seq)) {
            fail(ErrorCode::SequenceTooLong, "sequence of " + std::to_string(length_ + n) + " exceeds max_seq " +
                                                 std::to_string(c.max_seq));
        }
        const auto p0 = static_cast<Eigen::Index>(length_);
        const auto rows = static_cast<Eigen::Index>(n);
        if (trace != nullptr) {
            trace->residuals.resize(c.hook_count());
            for (auto& m : trace->residuals) {
                m.conservativeResize(p0 + rows, c.d_model);
            }
            trace->seq_len = length_ + n;
        }

        Matrix<T> x = inputs + w_.pos_emb.middleRows(p0, rows);
        hook(0, x, phases, trace);

        const int hd = c.head_dim();
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
        for (int l = 0; l < c.n_layers; ++l) {
            const auto& lw = w_.layers[static_cast<std::size_t>(l)];
            auto& K = keys_[static_cast<std::size_t>(l)];
            auto& V = values_[static_cast<std::size_t>(l)];
            const Matrix<T> h = detail::rms_norm(x, lw.attn_norm);
            const Matrix<T> q = h * lw.wq;
            K.middleRows(p0, rows) = h * lw.wk;
            V.middleRows(p0, rows) = h * lw.wv;
            Matrix<T> att(rows, c.d_model);
            const Eigen::Index total = p0 + rows;
            for (int head = 0; head < c.n_heads; ++head) {
                const Eigen::Index off = head * hd;
                Matrix<T> scores = q.middleCols(off, hd) * K.block(0, off, total, hd).transpose();
                for (Eigen::Index i = 0; i < rows; ++i) {
                    const Eigen::Index visible = p0 + i + 1;
                    for (Eigen::Index j = 0; j < visible; ++j) {
                        scores(i, j) = static_cast<T>(static_cast<double>(scores(i, j)) * scale);
                    }
                    detail::softmax_row(std::span<T>(&scores(i, 0), static_cast<std::size_t>(visible)));
                    for (Eigen::Index j = visible; j < total; ++j) {
                        scores(i, j) = T(0);
                    }
                }
                att.middleCols(off, hd) = scores * V.block(0, off, total, hd);
            }
            x += att * lw.wo;
            hook(1 + 2 * static_cast<std::size_t>(l), x, phases, trace);

            const Matrix<T> h2 = detail::rms_norm(x, lw.mlp_norm);
            Matrix<T> a = h2 * lw.w_in;
            for (Eigen::Index i = 0; i < a.rows(); ++i) {
                for (Eigen::Index j = 0; j < a.cols(); ++j) {
                    a(i, j) = static_cast<T>(detail::gelu(static_cast<double>(a(i, j) + lw.b_in(j))));
                }
            }
            x += a * lw.w_out;
            hook(2 + 2 * static_cast<std::size_t>(l), x, phases, trace);
        }
        length_ += n;
        return detail::rms_norm(x, w_.final_norm) * w_.unembed;
    }

    Matrix<T> feed_tokens(std::span<const TokenId> tokens, Phase phase, ForwardTrace* trace = nullptr) {
        const std::vector<Phase> phases(tokens.size(), phase);
        return feed(embed(w_, tokens), phases, trace);
    }

    static Matrix<T> embed(const Weights<T>& w, std::span<const TokenId> tokens) {
        Matrix<T> x(static_cast<Eigen::Index>(tokens.size()), w.config.d_model);
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            const TokenId t = tokens[i];
            if (t < 0 || t >= w.config.vocab_size) {
                fail(ErrorCode::ShapeError, "token id " + std::to_string(t) + " outside vocabulary");
            }
            x.row(static_cast<Eigen::Index>(i)) = w.tok_emb.row(t);
        }
        return x;
    }

private:
    void hook(std::size_t index, Matrix<T>& x, std::span<const Phase> phases, ForwardTrace* trace) const {
        if (intervention_ != nullptr && intervention_->covers(index)) {
            for (Eigen::Index i = 0; i < x.rows(); ++i) {
                if (intervention_->active_in(phases[static_cast<std::size_t>(i)])) {
                    intervention_->apply(std::span<T>(&x(i, 0), static_cast<std::size_t>(x.cols())));
                }
            }
        }
        if (trace != nullptr) {
            trace->residuals[index].middleRows(static_cast<Eigen::Index>(length_), x.rows()) = x.template cast<float>();
        }
    }

    const Weights<T>& w_;
    const Intervention* intervention_;
    std::vector<Matrix<T>> keys_;
    std::vector<Matrix<T>> values_;
    std::size_t length_ = 0;
};

template <typename T>
struct ForwardResult {
    Matrix<T> logits;  // (prefix + tokens) x vocab
    std::optional<ForwardTrace> trace;
};

/// Full causal pass over [prefix ‖ token embeddings]. Prefix rows are in embedding space
/// (the same space as tok_emb rows) and receive positional encoding like tokens.
template <typename T>
ForwardResult<T> forward(const Weights<T>& w, std::span<const TokenId> tokens, const Matrix<T>& prefix = {},
                         const Intervention* intervention = nullptr, bool want_trace = false) {
    const auto& c = w.config;
    const Eigen::Index np = prefix.size() == 0 ? 0 : prefix.rows();
    if (np > 0 && prefix.cols() != c.d_model) {
        fail(ErrorCode::ShapeError, "prefix vectors have dimension " + std::to_string(prefix.cols()) + ", expected " +
                                        std::to_string(c.d_model));
    }
    const auto total = static_cast<std::size_t>(np) + tokens.size();
    if (total > static_cast<std::size_t>(c.max_seq)) {
        fail(ErrorCode::SequenceTooLong,
             "input of " + std::to_string(total) + " positions exceeds max_seq " + std::to_string(c.max_seq));
    }
    Matrix<T> inputs(static_cast<Eigen::Index>(total), c.d_model);
    if (np > 0) {
        inputs.topRows(np) = prefix;
    }
    inputs.bottomRows(static_cast<Eigen::Index>(tokens.size())) = Session<T>::embed(w, tokens);
    std::vector<Phase> phases(total, Phase::Prompt);
    std::fill(phases.begin(), phases.begin() + np, Phase::Prefix);

    ForwardResult<T> out;
    Session<T> session(w, intervention);
    if (want_trace) {
        out.trace.emplace();
        out.trace->prefix_len = static_cast<std::size_t>(np);
    }
    if (total > 0) {
        out.logits = session.feed(inputs, phases, want_trace ? &*out.trace : nullptr);
    } else {
        out.logits = Matrix<T>(0, c.vocab_size);
    }
    return out;
}

/// Embedding rows for a list of marker ids, usable as a forward() prefix.
template <typename T>
Matrix<T> prefix_from_markers(const Weights<T>& w, std::span<const TokenId> markers) {
    return Session<T>::embed(w, markers);
}

} // namespace steerlab::tinylm
