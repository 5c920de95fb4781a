#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "steerlab/error.hpp"
#include "steerlab/model.hpp"
#include "steerlab/util.hpp"

namespace steerlab::tinylm {

using Sequence = std::vector<TokenId>;

namespace detail {

template <typename T>
struct LayerCache {
    Matrix<T> x_in, h, q, k, v, att, x_mid, h2, pre, act;
    std::vector<double> r1, r2;
    std::vector<Matrix<T>> probs;  // [seq * n_heads + head] -> len x len
};

/// y = g * x * r per row; returns dx and accumulates dg.
template <typename T>
Matrix<T> rms_norm_backward(const Matrix<T>& x, const Vector<T>& gain, const std::vector<double>& inv_rms,
                            const Matrix<T>& dy, Vector<T>& dgain) {
    const auto d = static_cast<double>(x.cols());
    Matrix<T> dx(x.rows(), x.cols());
    std::vector<double> dg(static_cast<std::size_t>(x.cols()), 0.0);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double r = inv_rms[static_cast<std::size_t>(i)];
        double dot = 0.0;
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            dot += static_cast<double>(gain(j)) * static_cast<double>(dy(i, j)) * static_cast<double>(x(i, j));
        }
        const double coef = r * r * r * dot / d;
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const double xv = static_cast<double>(x(i, j));
            const double dyv = static_cast<double>(dy(i, j));
            dx(i, j) = static_cast<T>(r * static_cast<double>(gain(j)) * dyv - xv * coef);
            dg[static_cast<std::size_t>(j)] += dyv * xv * r;
        }
    }
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        dgain(j) += static_cast<T>(dg[static_cast<std::size_t>(j)]);
    }
    return dx;
}

template <typename T>
std::vector<std::span<T>> blocks_of(Weights<T>& w) {
    std::vector<std::span<T>> out;
    w.for_each_block([&](const std::string&, std::span<T> s) { out.push_back(s); });
    return out;
}

} // namespace detail

template <typename T>
struct LossAndGrads {
    double loss = 0.0;
    std::size_t targets = 0;
    Weights<T> grads;
};

/// Mean next-token cross-entropy over every position of every sequence, and (optionally)
/// its gradient. Sequences are processed as independent causal contexts.
template <typename T>
LossAndGrads<T> loss_and_grads(const Weights<T>& w, const std::vector<Sequence>& batch, bool want_grads = true) {
    const auto& c = w.config;
    if (batch.empty()) {
        fail(ErrorCode::EmptyCorpus, "loss_and_grads needs a nonempty batch");
    }
    std::vector<Eigen::Index> offsets;
    Eigen::Index n = 0;
    std::size_t targets = 0;
    for (const auto& s : batch) {
        if (s.size() < 2) {
            fail(ErrorCode::DegenerateSequence, "training sequences need at least two tokens");
        }
        if (s.size() > static_cast<std::size_t>(c.max_seq)) {
            fail(ErrorCode::SequenceTooLong, "training sequence of " + std::to_string(s.size()) + " exceeds max_seq");
        }
        offsets.push_back(n);
        n += static_cast<Eigen::Index>(s.size());
        targets += s.size() - 1;
    }

    Matrix<T> x(n, c.d_model);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        for (std::size_t t = 0; t < batch[b].size(); ++t) {
            const TokenId id = batch[b][t];
            require(id >= 0 && id < c.vocab_size, ErrorCode::ShapeError, "token id outside vocabulary");
            x.row(offsets[b] + static_cast<Eigen::Index>(t)) =
                w.tok_emb.row(id) + w.pos_emb.row(static_cast<Eigen::Index>(t));
        }
    }

    const int hd = c.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<detail::LayerCache<T>> caches(static_cast<std::size_t>(c.n_layers));
    for (int l = 0; l < c.n_layers; ++l) {
        const auto& lw = w.layers[static_cast<std::size_t>(l)];
        auto& lc = caches[static_cast<std::size_t>(l)];
        lc.x_in = x;
        lc.h = detail::rms_norm(x, lw.attn_norm, &lc.r1);
        lc.q = lc.h * lw.wq;
        lc.k = lc.h * lw.wk;
        lc.v = lc.h * lw.wv;
        lc.att = Matrix<T>::Zero(n, c.d_model);
        lc.probs.resize(batch.size() * static_cast<std::size_t>(c.n_heads));
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const auto len = static_cast<Eigen::Index>(batch[b].size());
            const Eigen::Index o = offsets[b];
            for (int head = 0; head < c.n_heads; ++head) {
                const Eigen::Index off = head * hd;
                Matrix<T> s = lc.q.block(o, off, len, hd) * lc.k.block(o, off, len, hd).transpose();
                for (Eigen::Index i = 0; i < len; ++i) {
                    for (Eigen::Index j = 0; j <= i; ++j) {
                        s(i, j) = static_cast<T>(static_cast<double>(s(i, j)) * scale);
                    }
                    detail::softmax_row(std::span<T>(&s(i, 0), static_cast<std::size_t>(i + 1)));
                    for (Eigen::Index j = i + 1; j < len; ++j) {
                        s(i, j) = T(0);
                    }
                }
                lc.att.block(o, off, len, hd) = s * lc.v.block(o, off, len, hd);
                lc.probs[b * static_cast<std::size_t>(c.n_heads) + static_cast<std::size_t>(head)] = std::move(s);
            }
        }
        lc.x_mid = x + lc.att * lw.wo;
        lc.h2 = detail::rms_norm(lc.x_mid, lw.mlp_norm, &lc.r2);
        lc.pre = lc.h2 * lw.w_in;
        lc.act.resize(n, c.d_ff);
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < c.d_ff; ++j) {
                lc.pre(i, j) += lw.b_in(j);
                lc.act(i, j) = static_cast<T>(detail::gelu(static_cast<double>(lc.pre(i, j))));
            }
        }
        x = lc.x_mid + lc.act * lw.w_out;
    }
    std::vector<double> rf;
    const Matrix<T> hf = detail::rms_norm(x, w.final_norm, &rf);
    Matrix<T> logits = hf * w.unembed;

    // Softmax cross-entropy; logits is overwritten with dL/dlogits.
    double total = 0.0;
    const double inv_targets = 1.0 / static_cast<double>(targets);
    std::vector<double> p(static_cast<std::size_t>(c.vocab_size));
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto len = batch[b].size();
        for (std::size_t t = 0; t < len; ++t) {
            const Eigen::Index row = offsets[b] + static_cast<Eigen::Index>(t);
            if (t + 1 == len) {
                logits.row(row).setZero();
                continue;
            }
            double mx = -std::numeric_limits<double>::infinity();
            for (Eigen::Index j = 0; j < c.vocab_size; ++j) {
                mx = std::max(mx, static_cast<double>(logits(row, j)));
            }
            double sum = 0.0;
            for (Eigen::Index j = 0; j < c.vocab_size; ++j) {
                p[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(logits(row, j)) - mx);
                sum += p[static_cast<std::size_t>(j)];
            }
            const TokenId target = batch[b][t + 1];
            total += -(static_cast<double>(logits(row, target)) - mx - std::log(sum));
            for (Eigen::Index j = 0; j < c.vocab_size; ++j) {
                const double pj = p[static_cast<std::size_t>(j)] / sum;
                logits(row, j) = static_cast<T>((pj - (j == target ? 1.0 : 0.0)) * inv_targets);
            }
        }
    }

    LossAndGrads<T> out;
    out.loss = total * inv_targets;
    out.targets = targets;
    if (!want_grads) {
        return out;
    }

    auto& g = out.grads;
    g = Weights<T>::zeros(c);
    const Matrix<T>& dlogits = logits;
    g.unembed = hf.transpose() * dlogits;
    Matrix<T> dx = detail::rms_norm_backward(x, w.final_norm, rf, Matrix<T>(dlogits * w.unembed.transpose()),
                                             g.final_norm);

    for (int l = c.n_layers - 1; l >= 0; --l) {
        const auto& lw = w.layers[static_cast<std::size_t>(l)];
        auto& lg = g.layers[static_cast<std::size_t>(l)];
        const auto& lc = caches[static_cast<std::size_t>(l)];

        // x_out = x_mid + gelu(h2 w_in + b) w_out
        lg.w_out = lc.act.transpose() * dx;
        Matrix<T> dpre = dx * lw.w_out.transpose();
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < c.d_ff; ++j) {
                dpre(i, j) = static_cast<T>(static_cast<double>(dpre(i, j)) *
                                            detail::gelu_grad(static_cast<double>(lc.pre(i, j))));
            }
        }
        lg.b_in = dpre.colwise().sum().transpose();
        lg.w_in = lc.h2.transpose() * dpre;
        const Matrix<T> dh2 = dpre * lw.w_in.transpose();
        Matrix<T> dx_mid = dx + detail::rms_norm_backward(lc.x_mid, lw.mlp_norm, lc.r2, dh2, lg.mlp_norm);

        // x_mid = x_in + att wo
        lg.wo = lc.att.transpose() * dx_mid;
        const Matrix<T> datt = dx_mid * lw.wo.transpose();
        Matrix<T> dq = Matrix<T>::Zero(n, c.d_model);
        Matrix<T> dk = Matrix<T>::Zero(n, c.d_model);
        Matrix<T> dv = Matrix<T>::Zero(n, c.d_model);
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const auto len = static_cast<Eigen::Index>(batch[b].size());
            const Eigen::Index o = offsets[b];
            for (int head = 0; head < c.n_heads; ++head) {
                const Eigen::Index off = head * hd;
                const auto& P = lc.probs[b * static_cast<std::size_t>(c.n_heads) + static_cast<std::size_t>(head)];
                const auto dO = datt.block(o, off, len, hd);
                Matrix<T> dP = dO * lc.v.block(o, off, len, hd).transpose();
                dv.block(o, off, len, hd) = P.transpose() * dO;
                for (Eigen::Index i = 0; i < len; ++i) {
                    double rs = 0.0;
                    for (Eigen::Index j = 0; j <= i; ++j) {
                        rs += static_cast<double>(dP(i, j)) * static_cast<double>(P(i, j));
                    }
                    for (Eigen::Index j = 0; j < len; ++j) {
                        dP(i, j) = j <= i ? static_cast<T>(static_cast<double>(P(i, j)) *
                                                           (static_cast<double>(dP(i, j)) - rs) * scale)
                                          : T(0);
                    }
                }
                dq.block(o, off, len, hd) = dP * lc.k.block(o, off, len, hd);
                dk.block(o, off, len, hd) = dP.transpose() * lc.q.block(o, off, len, hd);
            }
        }
        lg.wq = lc.h.transpose() * dq;
        lg.wk = lc.h.transpose() * dk;
        lg.wv = lc.h.transpose() * dv;
        const Matrix<T> dh = dq * lw.wq.transpose() + dk * lw.wk.transpose() + dv * lw.wv.transpose();
        dx = dx_mid + detail::rms_norm_backward(lc.x_in, lw.attn_norm, lc.r1, dh, lg.attn_norm);
    }

    for (std::size_t b = 0; b < batch.size(); ++b) {
        for (std::size_t t = 0; t < batch[b].size(); ++t) {
            const Eigen::Index row = offsets[b] + static_cast<Eigen::Index>(t);
            g.tok_emb.row(batch[b][t]) += dx.row(row);
            g.pos_emb.row(static_cast<Eigen::Index>(t)) += dx.row(row);
        }
    }
    return out;
}

/// Mean next-token cross-entropy without gradients, evaluated in chunks.
template <typename T>
double corpus_loss(const Weights<T>& w, const std::vector<Sequence>& corpus, std::size_t chunk = 64) {
    require(!corpus.empty(), ErrorCode::EmptyCorpus, "corpus_loss needs a nonempty corpus");
    double total = 0.0;
    std::size_t targets = 0;
    for (std::size_t i = 0; i < corpus.size(); i += chunk) {
        const std::vector<Sequence> part(corpus.begin() + static_cast<std::ptrdiff_t>(i),
                                         corpus.begin() + static_cast<std::ptrdiff_t>(std::min(corpus.size(), i + chunk)));
        const auto r = loss_and_grads(w, part, false);
        total += r.loss * static_cast<double>(r.targets);
        targets += r.targets;
    }
    return total / static_cast<double>(targets);
}

struct TrainConfig {
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;
    int steps = 2000;
    int batch_size = 32;
    std::size_t eval_subset = 1024;  ///< sequences used for the initial/final corpus loss

    nlohmann::json to_json() const {
        return {{"learning_rate", learning_rate}, {"beta1", beta1}, {"beta2", beta2}, {"adam_eps", adam_eps},
                {"clip_norm", clip_norm}, {"steps", steps}, {"batch_size", batch_size}, {"eval_subset", eval_subset}};
    }

    static TrainConfig from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }

    static TrainConfig from_json(const nlohmann::json& j, TrainConfig base) {
        base.learning_rate = j.value("learning_rate", base.learning_rate);
        base.beta1 = j.value("beta1", base.beta1);
        base.beta2 = j.value("beta2", base.beta2);
        base.adam_eps = j.value("adam_eps", base.adam_eps);
        base.clip_norm = j.value("clip_norm", base.clip_norm);
        base.steps = j.value("steps", base.steps);
        base.batch_size = j.value("batch_size", base.batch_size);
        base.eval_subset = j.value("eval_subset", base.eval_subset);
        return base;
    }
};

struct TrainResult {
    Weights<float> weights;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> curve;  ///< batch loss before each step, index = step - 1

    std::string curve_csv() const {
        std::ostringstream os;
        os << "step,loss\n";
        for (std::size_t i = 0; i < curve.size(); ++i) {
            os << (i + 1) << ',' << fmt_double(curve[i], 8) << '\n';
        }
        return os.str();
    }
};

/// Adam with global-norm clipping over shuffled epochs. Deterministic given (config, corpus, seed).
inline TrainResult train(ModelConfig model, const TrainConfig& tc, const std::vector<Sequence>& corpus,
                         std::uint64_t seed, const std::function<void(int, double)>& progress = {}) {
    if (corpus.empty()) {
        fail(ErrorCode::EmptyCorpus, "train needs a nonempty corpus");
    }
    require(tc.learning_rate > 0.0, ErrorCode::SpecError, "learning rate must be positive");
    require(tc.steps >= 0 && tc.batch_size >= 1, ErrorCode::SpecError, "invalid step count or batch size");
    model.seed = seed;
    model.validate();

    TrainResult result;
    result.weights = Weights<float>::init(model);
    auto& w = result.weights;

    const std::vector<Sequence> eval_set(corpus.begin(),
                                         corpus.begin() + static_cast<std::ptrdiff_t>(std::min(corpus.size(), tc.eval_subset)));
    result.initial_loss = corpus_loss(w, eval_set);

    Weights<float> m = Weights<float>::zeros(model);
    Weights<float> v = Weights<float>::zeros(model);
    auto pblocks = detail::blocks_of(w);
    auto mblocks = detail::blocks_of(m);
    auto vblocks = detail::blocks_of(v);

    std::mt19937_64 rng(derive_seed(seed, 0x7452));
    std::vector<std::size_t> order(corpus.size());
    std::size_t cursor = order.size();
    std::vector<Sequence> batch;
    for (int step = 1; step <= tc.steps; ++step) {
        batch.clear();
        for (int i = 0; i < tc.batch_size; ++i) {
            if (cursor == order.size()) {
                for (std::size_t k = 0; k < order.size(); ++k) {
                    order[k] = k;
                }
                shuffle(rng, order);
                cursor = 0;
            }
            batch.push_back(corpus[order[cursor++]]);
        }
        auto lg = loss_and_grads(w, batch);
        if (!std::isfinite(lg.loss)) {
            fail(ErrorCode::TrainingDiverged, "loss became non-finite at step " + std::to_string(step));
        }
        result.curve.push_back(lg.loss);
        if (progress) {
            progress(step, lg.loss);
        }

        auto gblocks = detail::blocks_of(lg.grads);
        double sq = 0.0;
        for (const auto& gb : gblocks) {
            for (const float gv : gb) {
                sq += static_cast<double>(gv) * static_cast<double>(gv);
            }
        }
        const double gnorm = std::sqrt(sq);
        if (!std::isfinite(gnorm)) {
            fail(ErrorCode::TrainingDiverged, "gradient became non-finite at step " + std::to_string(step));
        }
        const double clip = gnorm > tc.clip_norm ? tc.clip_norm / gnorm : 1.0;
        const double bc1 = 1.0 - std::pow(tc.beta1, step);
        const double bc2 = 1.0 - std::pow(tc.beta2, step);
        for (std::size_t b = 0; b < pblocks.size(); ++b) {
            auto& pb = pblocks[b];
            auto& mb = mblocks[b];
            auto& vb = vblocks[b];
            const auto& gb = gblocks[b];
            for (std::size_t i = 0; i < pb.size(); ++i) {
                const double gi = static_cast<double>(gb[i]) * clip;
                const double mi = tc.beta1 * mb[i] + (1.0 - tc.beta1) * gi;
                const double vi = tc.beta2 * vb[i] + (1.0 - tc.beta2) * gi * gi;
                mb[i] = static_cast<float>(mi);
                vb[i] = static_cast<float>(vi);
                pb[i] = static_cast<float>(pb[i] - tc.learning_rate * (mi / bc1) / (std::sqrt(vi / bc2) + tc.adam_eps));
            }
        }
    }
    result.final_loss = corpus_loss(w, eval_set);
    if (!std::isfinite(result.final_loss)) {
        fail(ErrorCode::TrainingDiverged, "final corpus loss is non-finite");
    }
    return result;
}

} // namespace steerlab::tinylm
