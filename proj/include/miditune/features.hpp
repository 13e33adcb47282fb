#pragma once

#include <array>
#include <bitset>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "miditune/midi.hpp"

namespace miditune {

struct FeatureReport {
    int64_t n_notes = 0;
    double polyphony_rate = 0.0;   // active steps with >= 2 pitches / active steps
    double empty_beat_rate = 0.0;  // onset-free beats over [first onset beat, last offset beat]
    std::array<int64_t, 128> pitch_histogram{};
    int pitch_range = 0;  // semitones, lowest to highest
    double scale_consistency = 1.0;
    std::array<int64_t, 20> velocity_histogram{};  // tokenizer-style 20 bins
    int velocity_range = 0;
};

inline constexpr int kFeatureStepsPerBeat = 8;  // matches the tokenizer position grid

namespace detail {

// grid step containing a tick; beat = quarter note
inline int64_t step_of_tick(int64_t tick, int tpq, int steps_per_beat) {
    return tick * steps_per_beat / tpq;
}

}  // namespace detail

inline double scale_consistency(const Score& score) {
    if (score.notes.empty()) return 1.0;
    // 12 major + 12 natural-minor scales as pitch-class bitmasks
    constexpr int major[7] = {0, 2, 4, 5, 7, 9, 11};
    constexpr int minor[7] = {0, 2, 3, 5, 7, 8, 10};
    int64_t class_counts[12] = {0};
    for (const auto& n : score.notes) ++class_counts[n.pitch % 12];
    int64_t best = 0;
    for (int root = 0; root < 12; ++root) {
        int64_t in_major = 0, in_minor = 0;
        for (int k = 0; k < 7; ++k) {
            in_major += class_counts[(root + major[k]) % 12];
            in_minor += class_counts[(root + minor[k]) % 12];
        }
        best = std::max({best, in_major, in_minor});
    }
    return static_cast<double>(best) / static_cast<double>(score.notes.size());
}

inline FeatureReport extract_features(const Score& score) {
    FeatureReport r;
    r.n_notes = static_cast<int64_t>(score.notes.size());
    r.scale_consistency = scale_consistency(score);
    if (score.notes.empty()) return r;

    const int tpq = score.ticks_per_quarter;
    int pmin = 127, pmax = 0, vmin = 127, vmax = 1;
    for (const auto& n : score.notes) {
        ++r.pitch_histogram[static_cast<size_t>(std::clamp(n.pitch, 0, 127))];
        const int vbin = std::min<int64_t>(19, static_cast<int64_t>(n.velocity - 1) * 20 / 127);
        ++r.velocity_histogram[static_cast<size_t>(std::max(0, vbin))];
        pmin = std::min(pmin, n.pitch);
        pmax = std::max(pmax, n.pitch);
        vmin = std::min(vmin, n.velocity);
        vmax = std::max(vmax, n.velocity);
    }
    r.pitch_range = pmax - pmin;
    r.velocity_range = vmax - vmin;

    // polyphony over the position grid
    const int64_t n_steps = detail::step_of_tick(score.end_tick() - 1, tpq, kFeatureStepsPerBeat) + 1;
    std::vector<std::bitset<128>> grid(static_cast<size_t>(n_steps));
    for (const auto& n : score.notes) {
        const int64_t s0 = detail::step_of_tick(n.onset, tpq, kFeatureStepsPerBeat);
        const int64_t s1 = detail::step_of_tick(n.onset + n.duration - 1, tpq, kFeatureStepsPerBeat);
        for (int64_t s = s0; s <= s1; ++s) grid[static_cast<size_t>(s)].set(static_cast<size_t>(n.pitch));
    }
    int64_t active = 0, poly = 0;
    for (const auto& cell : grid) {
        const size_t c = cell.count();
        if (c >= 1) ++active;
        if (c >= 2) ++poly;
    }
    r.polyphony_rate = active > 0 ? static_cast<double>(poly) / static_cast<double>(active) : 0.0;

    // empty beats over [first onset's beat, last offset's beat]
    const int64_t first_beat = score.notes.front().onset / tpq;
    const int64_t last_beat = (score.end_tick() - 1) / tpq;
    std::vector<uint8_t> has_onset(static_cast<size_t>(last_beat - first_beat + 1), 0);
    for (const auto& n : score.notes) {
        const int64_t b = n.onset / tpq;
        if (b >= first_beat && b <= last_beat) has_onset[static_cast<size_t>(b - first_beat)] = 1;
    }
    int64_t empty = 0;
    for (const uint8_t h : has_onset)
        if (!h) ++empty;
    r.empty_beat_rate = static_cast<double>(empty) / static_cast<double>(has_onset.size());
    return r;
}

// ---------------------------------------------------------------------------
// Piano rolls

struct PianoRollSummary {
    int cols = 0;  // beats * steps_per_beat
    std::vector<double> cells;  // 128 x cols, row-major by pitch
    int sample_count = 0;

    double at(int pitch, int col) const { return cells[static_cast<size_t>(pitch) * cols + col]; }
};

// 1 where any note of the given pitch sounds during the cell's time span
inline std::vector<uint8_t> binarize_roll(const Score& score, int beats, int steps_per_beat) {
    const int cols = beats * steps_per_beat;
    std::vector<uint8_t> roll(static_cast<size_t>(128) * cols, 0);
    const int tpq = score.ticks_per_quarter;
    for (const auto& n : score.notes) {
        int64_t s0 = detail::step_of_tick(n.onset, tpq, steps_per_beat);
        int64_t s1 = detail::step_of_tick(n.onset + n.duration - 1, tpq, steps_per_beat);
        s0 = std::max<int64_t>(s0, 0);
        s1 = std::min<int64_t>(s1, cols - 1);
        for (int64_t s = s0; s <= s1; ++s)
            roll[static_cast<size_t>(n.pitch) * cols + static_cast<size_t>(s)] = 1;
    }
    return roll;
}

inline PianoRollSummary average_piano_roll(std::span<const Score> scores, int beats,
                                           int steps_per_beat) {
    if (scores.empty()) throw std::invalid_argument("average_piano_roll needs at least one score");
    PianoRollSummary out;
    out.cols = beats * steps_per_beat;
    out.cells.assign(static_cast<size_t>(128) * out.cols, 0.0);
    out.sample_count = static_cast<int>(scores.size());
    for (const auto& s : scores) {
        const auto roll = binarize_roll(s, beats, steps_per_beat);
        for (size_t i = 0; i < roll.size(); ++i) out.cells[i] += roll[i];
    }
    for (auto& c : out.cells) c /= static_cast<double>(scores.size());
    return out;
}

// Mean pairwise normalized Hamming distance between binarized rolls.
inline double diversity(std::span<const Score> scores, int beats, int steps_per_beat) {
    if (scores.size() < 2) throw std::invalid_argument("diversity needs at least two scores");
    std::vector<std::vector<uint8_t>> rolls;
    rolls.reserve(scores.size());
    for (const auto& s : scores) rolls.push_back(binarize_roll(s, beats, steps_per_beat));
    const size_t cells = rolls.front().size();
    int64_t disagree = 0;
    int64_t pairs = 0;
    for (size_t i = 0; i < rolls.size(); ++i) {
        for (size_t j = i + 1; j < rolls.size(); ++j) {
            for (size_t k = 0; k < cells; ++k) disagree += rolls[i][k] != rolls[j][k];
            ++pairs;
        }
    }
    return static_cast<double>(disagree) / (static_cast<double>(pairs) * static_cast<double>(cells));
}

}  // namespace miditune
