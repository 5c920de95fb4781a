#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "steerlab/error.hpp"

namespace steerlab {

/// A residual-stream write point. Index order: embed, attn.0, mlp.0, attn.1, mlp.1, ...
struct HookPoint {
    enum class Kind { EmbedOut, PostAttn, PostMlp };

    Kind kind = Kind::EmbedOut;
    int layer = 0;

    static HookPoint embed_out() { return {Kind::EmbedOut, 0}; }
    static HookPoint post_attn(int l) { return {Kind::PostAttn, l}; }
    static HookPoint post_mlp(int l) { return {Kind::PostMlp, l}; }

    static std::size_t count(int n_layers) { return 1 + 2 * static_cast<std::size_t>(n_layers); }

    std::size_t index() const {
        switch (kind) {
        case Kind::EmbedOut: return 0;
        case Kind::PostAttn: return 1 + 2 * static_cast<std::size_t>(layer);
        case Kind::PostMlp: return 2 + 2 * static_cast<std::size_t>(layer);
        }
        return 0;
    }

    static HookPoint from_index(std::size_t i) {
        if (i == 0) {
            return embed_out();
        }
        const int l = static_cast<int>((i - 1) / 2);
        return (i % 2 == 1) ? post_attn(l) : post_mlp(l);
    }

    std::string name() const {
        switch (kind) {
        case Kind::EmbedOut: return "embed";
        case Kind::PostAttn: return "attn." + std::to_string(layer);
        case Kind::PostMlp: return "mlp." + std::to_string(layer);
        }
        return "?";
    }

    static HookPoint parse(const std::string& s) {
        if (s == "embed") {
            return embed_out();
        }
        const auto dot = s.find('.');
        if (dot != std::string::npos) {
            const std::string kind = s.substr(0, dot);
            int l = -1;
            try {
                l = std::stoi(s.substr(dot + 1));
            } catch (const std::exception&) {
                l = -1;
            }
            if (l >= 0 && kind == "attn") {
                return post_attn(l);
            }
            if (l >= 0 && kind == "mlp") {
                return post_mlp(l);
            }
        }
        fail(ErrorCode::ParseError, "bad hook point name '" + s + "'");
    }

    bool valid_for(int n_layers) const {
        return kind == Kind::EmbedOut || (layer >= 0 && layer < n_layers);
    }

    friend bool operator==(const HookPoint& a, const HookPoint& b) { return a.index() == b.index(); }
};

enum class PositionPolicy { LastPromptToken, MeanOverPrompt };

inline std::string to_string(PositionPolicy p) {
    return p == PositionPolicy::LastPromptToken ? "last-prompt-token" : "mean-over-prompt";
}

inline PositionPolicy parse_position_policy(const std::string& s) {
    if (s == "last-prompt-token") {
        return PositionPolicy::LastPromptToken;
    }
    if (s == "mean-over-prompt") {
        return PositionPolicy::MeanOverPrompt;
    }
    fail(ErrorCode::ParseError, "unknown position policy '" + s + "'");
}

/// Unit direction u in residual space, the hook it was read from, and the ablation strength.
struct SteeringDirection {
    std::vector<float> u;
    HookPoint source;
    double alpha = 1.0;
    PositionPolicy policy = PositionPolicy::LastPromptToken;
    nlohmann::json metadata = nlohmann::json::object();

    std::size_t dim() const noexcept { return u.size(); }
};

/// In place: r <- r - alpha * u (u^T r). The projection is accumulated in double.
template <typename T>
void ablate_inplace(std::span<T> r, std::span<const float> u, double alpha) {
    if (r.size() != u.size()) {
        fail(ErrorCode::ShapeError, "ablate: residual has " + std::to_string(r.size()) + " entries, direction " +
                                        std::to_string(u.size()));
    }
    double dot = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
        dot += static_cast<double>(u[i]) * static_cast<double>(r[i]);
    }
    const double scale = alpha * dot;
    for (std::size_t i = 0; i < r.size(); ++i) {
        r[i] = static_cast<T>(static_cast<double>(r[i]) - scale * static_cast<double>(u[i]));
    }
}

inline std::vector<float> ablate(std::span<const float> r, const SteeringDirection& d) {
    std::vector<float> out(r.begin(), r.end());
    ablate_inplace<float>(out, d.u, d.alpha);
    return out;
}

/// Which token positions an intervention touches.
struct InterventionScope {
    bool prompt = true;      ///< text prompt positions (BOS and prompt tokens)
    bool generation = true;  ///< positions of sampled tokens
    bool prefix = true;      ///< injected prefix-embedding positions
};

enum class Phase { Prefix, Prompt, Generation };

/// A direction applied at a set of hook points. Immutable once built.
class Intervention {
public:
    Intervention(SteeringDirection direction, std::vector<HookPoint> hooks, InterventionScope scope)
        : direction_(std::move(direction)), scope_(scope) {
        if (hooks.empty()) {
            fail(ErrorCode::InvalidHookSet, "intervention needs at least one hook point");
        }
        for (const auto& h : hooks) {
            const auto i = h.index();
            if (mask_.size() <= i) {
                mask_.resize(i + 1, false);
            }
            mask_[i] = true;
        }
        hooks_ = std::move(hooks);
    }

    const SteeringDirection& direction() const noexcept { return direction_; }
    const std::vector<HookPoint>& hooks() const noexcept { return hooks_; }
    const InterventionScope& scope() const noexcept { return scope_; }

    bool covers(std::size_t hook_index) const noexcept { return hook_index < mask_.size() && mask_[hook_index]; }

    bool active_in(Phase p) const noexcept {
        switch (p) {
        case Phase::Prefix: return scope_.prefix;
        case Phase::Prompt: return scope_.prompt;
        case Phase::Generation: return scope_.generation;
        }
        return false;
    }

    template <typename T>
    void apply(std::span<T> r) const {
        ablate_inplace<T>(r, direction_.u, direction_.alpha);
    }

    /// Short identifier recorded with generations.
    std::string id() const {
        std::string hooks = hooks_.size() == 0 ? "" : hooks_.front().name();
        if (hooks_.size() > 1) {
            hooks += "+" + std::to_string(hooks_.size() - 1);
        }
        return "ablate(" + direction_.source.name() + ",alpha=" + std::to_string(direction_.alpha) + ",hooks=" +
               hooks + ")";
    }

private:
    SteeringDirection direction_;
    std::vector<HookPoint> hooks_;
    std::vector<bool> mask_;
    InterventionScope scope_;
};

} // namespace steerlab
