#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "miditune/features.hpp"
#include "miditune/midi.hpp"
#include "miditune/render.hpp"

namespace miditune {

// Four aesthetic axes on a 10-point scale.
struct AestheticScores {
    double content_enjoyment = 0.0;
    double content_usefulness = 0.0;
    double production_complexity = 0.0;
    double production_quality = 0.0;

    bool valid() const {
        for (const double v :
             {content_enjoyment, content_usefulness, production_complexity, production_quality})
            if (!std::isfinite(v) || v < 0.0 || v > 10.0) return false;
        return true;
    }
};

enum class RewardAxis {
    content_enjoyment,
    content_usefulness,
    production_complexity,
    production_quality,
};

inline const char* to_string(RewardAxis a) {
    switch (a) {
        case RewardAxis::content_enjoyment: return "content_enjoyment";
        case RewardAxis::content_usefulness: return "content_usefulness";
        case RewardAxis::production_complexity: return "production_complexity";
        case RewardAxis::production_quality: return "production_quality";
    }
    return "?";
}

inline RewardAxis reward_axis_from_string(const std::string& s) {
    if (s == "content_enjoyment" || s == "CE") return RewardAxis::content_enjoyment;
    if (s == "content_usefulness" || s == "CU") return RewardAxis::content_usefulness;
    if (s == "production_complexity" || s == "PC") return RewardAxis::production_complexity;
    if (s == "production_quality" || s == "PQ") return RewardAxis::production_quality;
    throw std::invalid_argument("unknown reward axis: " + s);
}

struct RewardSpec {
    RewardAxis axis = RewardAxis::content_enjoyment;
    enum class Kind { proxy, remote };
    Kind kind = Kind::proxy;
};

inline double reward_of(const AestheticScores& scores, const RewardSpec& spec) {
    switch (spec.axis) {
        case RewardAxis::content_enjoyment: return scores.content_enjoyment;
        case RewardAxis::content_usefulness: return scores.content_usefulness;
        case RewardAxis::production_complexity: return scores.production_complexity;
        case RewardAxis::production_quality: return scores.production_quality;
    }
    return scores.content_enjoyment;
}

// ---------------------------------------------------------------------------
// Deterministic proxy scorer. Silent audio floors every axis at 1.0;
// otherwise content enjoyment is an affine blend of symbolic features
// (note count toward 70, polyphony, few empty beats, wide pitch and
// velocity ranges). The weights are declared constants that make reward
// ascent observable offline, not estimates of any external model.

inline double audio_rms(const AudioClip& clip) {
    if (clip.samples.empty()) return 0.0;
    double acc = 0.0;
    for (const float s : clip.samples) acc += static_cast<double>(s) * s;
    return std::sqrt(acc / static_cast<double>(clip.samples.size()));
}

inline AestheticScores score_proxy(const Score& score, const AudioClip& audio) {
    if (audio_rms(audio) < 1e-4) return {1.0, 1.0, 1.0, 1.0};
    const FeatureReport f = extract_features(score);
    const double f1 = std::min(static_cast<double>(f.n_notes) / 70.0, 1.0);
    const double f2 = f.polyphony_rate;
    const double f3 = 1.0 - f.empty_beat_rate;
    const double f4 = std::min(f.pitch_range / 48.0, 1.0);
    const double f5 = std::min(f.velocity_range / 40.0, 1.0);
    const double ce =
        std::clamp(1.0 + 9.0 * (0.30 * f1 + 0.20 * f2 + 0.20 * f3 + 0.15 * f4 + 0.15 * f5), 1.0, 10.0);
    AestheticScores s;
    s.content_enjoyment = ce;
    s.content_usefulness = std::clamp(0.5 + ce * 0.9, 0.0, 10.0);
    s.production_complexity = 1.0 + 2.0 * f2;
    s.production_quality = 7.0;
    return s;
}

// ---------------------------------------------------------------------------
// Renderer comparison: renders each sample with each renderer, scores, and
// averages per axis. Failed cells are counted and excluded from the mean.

struct RendererComparison {
    struct Row {
        std::string renderer;
        AestheticScores mean;
        int n_ok = 0;
        int n_failed = 0;
        std::vector<std::string> errors;
    };
    std::vector<Row> rows;
};

using ScoreFn = std::function<AestheticScores(const Score&, const AudioClip&)>;

inline RendererComparison compare_renderers(std::span<const Score> samples,
                                            std::span<const RendererChoice> renderers,
                                            int sample_rate, double crop_seconds,
                                            const ScoreFn& score_fn) {
    if (samples.empty() || renderers.empty())
        throw std::invalid_argument("compare_renderers needs at least one sample and one renderer");
    RendererComparison cmp;
    for (const auto& choice : renderers) {
        RendererComparison::Row row;
        row.renderer = choice.name;
        double sums[4] = {0, 0, 0, 0};
        for (const auto& s : samples) {
            try {
                const AudioClip clip = crop_audio(render(s, choice, sample_rate), crop_seconds);
                const AestheticScores sc = score_fn(s, clip);
                sums[0] += sc.content_enjoyment;
                sums[1] += sc.content_usefulness;
                sums[2] += sc.production_complexity;
                sums[3] += sc.production_quality;
                ++row.n_ok;
            } catch (const std::exception& e) {
                ++row.n_failed;
                row.errors.emplace_back(e.what());
            }
        }
        if (row.n_ok > 0) {
            row.mean.content_enjoyment = sums[0] / row.n_ok;
            row.mean.content_usefulness = sums[1] / row.n_ok;
            row.mean.production_complexity = sums[2] / row.n_ok;
            row.mean.production_quality = sums[3] / row.n_ok;
        }
        cmp.rows.push_back(std::move(row));
    }
    return cmp;
}

}  // namespace miditune
