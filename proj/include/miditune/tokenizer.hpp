#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "miditune/midi.hpp"
#include "miditune/rng.hpp"

namespace miditune {

enum class TokenKind { pad, bos, bar, time_sig, tempo, position, pitch, velocity, duration };

struct TokenizerConfig {
    int pitch_min = 21;   // 88-key piano
    int pitch_max = 108;
    int velocity_bins = 20;
    int tempo_bins = 32;
    double tempo_min = 40.0;
    double tempo_max = 250.0;
    int steps_per_beat = 8;  // beat = quarter note
    std::vector<std::pair<int, int>> time_signatures = {
        {1, 4}, {2, 4}, {3, 4}, {4, 4}, {5, 4}, {6, 4}, {3, 8}, {6, 8}, {9, 8}, {12, 8}};

    bool operator==(const TokenizerConfig&) const = default;

    // bar length of (num/den) in grid steps; integral for the supported set
    int bar_steps(int num, int den) const { return num * 4 * steps_per_beat / den; }

    int max_positions() const {
        int m = 0;
        for (auto [n, d] : time_signatures) m = std::max(m, bar_steps(n, d));
        return m;
    }

    // duration bins in grid steps: every step up to 4 beats, then whole
    // beats up to 16 beats (covers long pedaled notes with a bounded vocab)
    std::vector<int> duration_bins() const {
        std::vector<int> bins;
        for (int s = 1; s <= 4 * steps_per_beat; ++s) bins.push_back(s);
        for (int b = 5; b <= 16; ++b) bins.push_back(b * steps_per_beat);
        return bins;
    }

    double tempo_bin_center(int bin) const {
        const double t = (tempo_bins <= 1) ? 0.0 : static_cast<double>(bin) / (tempo_bins - 1);
        return tempo_min * std::pow(tempo_max / tempo_min, t);
    }

    int tempo_bin_of(double bpm) const {
        const double clamped = std::clamp(bpm, tempo_min, tempo_max);
        const double t = std::log(clamped / tempo_min) / std::log(tempo_max / tempo_min);
        const int bin = static_cast<int>(std::llround(t * (tempo_bins - 1)));
        return std::clamp(bin, 0, tempo_bins - 1);
    }

    int velocity_bin_of(int velocity) const {
        const int v = std::clamp(velocity, 1, 127);
        return std::min(velocity_bins - 1, (v - 1) * velocity_bins / 127);
    }

    int velocity_bin_midpoint(int bin) const {
        const double width = 127.0 / velocity_bins;
        const int v = 1 + static_cast<int>(std::llround((bin + 0.5) * width));
        return std::clamp(v, 1, 127);
    }
};

struct Vocab {
    TokenizerConfig config;
    std::vector<std::string> tokens;  // id -> string
    std::unordered_map<std::string, int> index;

    struct Info {
        TokenKind kind = TokenKind::pad;
        int a = 0;  // ts numerator / tempo bin / position / pitch / velocity bin / duration steps
        int b = 0;  // ts denominator
    };
    std::vector<Info> info;  // per id

    int pad_id = 0;
    int bos_id = 1;
    int bar_id = 2;
    std::vector<int> time_sig_ids;
    std::vector<int> tempo_ids;     // by bin
    std::vector<int> position_ids;  // by step
    std::vector<int> pitch_ids;     // by pitch - pitch_min
    std::vector<int> velocity_ids;  // by bin
    std::vector<int> duration_ids;  // by bin index into duration_bins()
    std::vector<int> duration_steps;

    int size() const { return static_cast<int>(tokens.size()); }
    TokenKind kind(int id) const { return info[static_cast<size_t>(id)].kind; }

    int pitch_token(int pitch) const {
        const int p = std::clamp(pitch, config.pitch_min, config.pitch_max);
        return pitch_ids[static_cast<size_t>(p - config.pitch_min)];
    }

    int duration_bin_of_steps(int steps) const {
        int best = 0;
        int64_t best_err = INT64_MAX;
        for (size_t i = 0; i < duration_steps.size(); ++i) {
            const int64_t err = std::llabs(static_cast<int64_t>(duration_steps[i]) - steps);
            if (err < best_err) {
                best_err = err;
                best = static_cast<int>(i);
            }
        }
        return best;
    }

    int time_sig_token(int num, int den) const {
        // exact match first, else nearest by bar length then numerator
        for (size_t i = 0; i < config.time_signatures.size(); ++i)
            if (config.time_signatures[i] == std::pair{num, den}) return time_sig_ids[i];
        const double q = static_cast<double>(num) * 4.0 / den;
        size_t best = 0;
        double best_err = 1e300;
        for (size_t i = 0; i < config.time_signatures.size(); ++i) {
            auto [n, d] = config.time_signatures[i];
            const double err = std::abs(static_cast<double>(n) * 4.0 / d - q) * 1000.0 +
                               std::abs(n - num);
            if (err < best_err) {
                best_err = err;
                best = i;
            }
        }
        return time_sig_ids[best];
    }
};

inline Vocab build_vocab(const TokenizerConfig& config = {}) {
    if (config.pitch_max < config.pitch_min || config.velocity_bins < 1 || config.tempo_bins < 1 ||
        config.steps_per_beat < 1 || config.time_signatures.empty())
        throw std::invalid_argument("tokenizer config has an empty range");

    Vocab v;
    v.config = config;
    auto add = [&v](const std::string& s, TokenKind k, int a = 0, int b = 0) {
        if (!v.index.emplace(s, v.size()).second)
            throw std::invalid_argument("tokenizer config produces duplicate token " + s);
        v.tokens.push_back(s);
        v.info.push_back({k, a, b});
        return v.size() - 1;
    };
    v.pad_id = add("PAD", TokenKind::pad);
    v.bos_id = add("BOS", TokenKind::bos);
    v.bar_id = add("Bar", TokenKind::bar);
    for (auto [n, d] : config.time_signatures)
        v.time_sig_ids.push_back(
            add("TimeSig_" + std::to_string(n) + "/" + std::to_string(d), TokenKind::time_sig, n, d));
    for (int b = 0; b < config.tempo_bins; ++b) {
        const int rounded = static_cast<int>(std::llround(config.tempo_bin_center(b)));
        v.tempo_ids.push_back(add("Tempo_" + std::to_string(rounded), TokenKind::tempo, b));
    }
    for (int p = 0; p < config.max_positions(); ++p)
        v.position_ids.push_back(add("Position_" + std::to_string(p), TokenKind::position, p));
    for (int p = config.pitch_min; p <= config.pitch_max; ++p)
        v.pitch_ids.push_back(add("Pitch_" + std::to_string(p), TokenKind::pitch, p));
    for (int b = 0; b < config.velocity_bins; ++b)
        v.velocity_ids.push_back(add("Velocity_" + std::to_string(config.velocity_bin_midpoint(b)),
                                     TokenKind::velocity, b));
    v.duration_steps = config.duration_bins();
    for (size_t i = 0; i < v.duration_steps.size(); ++i)
        v.duration_ids.push_back(
            add("Duration_" + std::to_string(v.duration_steps[i]), TokenKind::duration,
                v.duration_steps[i]));
    return v;
}

struct TokenSequence {
    std::vector<int32_t> ids;

    bool operator==(const TokenSequence&) const = default;
    size_t size() const { return ids.size(); }
};

// ---------------------------------------------------------------------------
// Encoding: [BOS] then per bar: Bar, TimeSig when (re)stated, Tempo when
// (re)stated, then per note Position Pitch Velocity Duration.

inline TokenSequence encode(const Score& score, const Vocab& vocab) {
    const auto& cfg = vocab.config;
    const int tpq = score.ticks_per_quarter;
    const int spb = cfg.steps_per_beat;

    // one grid step of margin so an onset that rounds past the final bar
    // line still has a bar to land in
    const auto bars = bar_grid(score, score.last_onset() + tpq / spb);

    struct Quant {
        size_t bar;
        int pos;
        int pitch;
        int vbin;
        int dbin;
    };
    std::vector<Quant> qnotes;
    qnotes.reserve(score.notes.size());
    for (const auto& n : score.notes) {
        size_t bi = bar_index_of(bars, n.onset);
        int pos = static_cast<int>(
            std::llround(static_cast<double>(n.onset - bars[bi].start) * spb / tpq));
        int bsteps = static_cast<int>(
            std::llround(static_cast<double>(bars[bi].length) * spb / tpq));
        if (pos >= std::max(1, bsteps) && bi + 1 < bars.size()) {
            ++bi;
            pos = 0;
        }
        pos = std::clamp(pos, 0, static_cast<int>(vocab.position_ids.size()) - 1);
        const int dsteps = std::max(
            1, static_cast<int>(std::llround(static_cast<double>(n.duration) * spb / tpq)));
        qnotes.push_back({bi, pos, n.pitch, cfg.velocity_bin_of(n.velocity),
                          vocab.duration_bin_of_steps(dsteps)});
    }
    std::sort(qnotes.begin(), qnotes.end(), [](const Quant& a, const Quant& b) {
        return std::tie(a.bar, a.pos, a.pitch, a.vbin, a.dbin) <
               std::tie(b.bar, b.pos, b.pitch, b.vbin, b.dbin);
    });

    TokenSequence seq;
    seq.ids.push_back(vocab.bos_id);
    int stated_ts = -1;
    int stated_tempo = -1;
    size_t qi = 0;
    const auto& tempos = score.tempos;
    for (size_t bi = 0; bi < bars.size(); ++bi) {
        seq.ids.push_back(vocab.bar_id);
        const int ts_tok = vocab.time_sig_token(bars[bi].numerator, bars[bi].denominator);
        if (ts_tok != stated_ts) {
            seq.ids.push_back(ts_tok);
            stated_ts = ts_tok;
        }
        // tempo in effect at the bar start
        double bpm = 120.0;
        for (const auto& t : tempos) {
            if (t.tick <= bars[bi].start) bpm = t.bpm;
            else break;
        }
        const int tempo_bin = cfg.tempo_bin_of(bpm);
        if (tempo_bin != stated_tempo) {
            seq.ids.push_back(vocab.tempo_ids[static_cast<size_t>(tempo_bin)]);
            stated_tempo = tempo_bin;
        }
        for (; qi < qnotes.size() && qnotes[qi].bar == bi; ++qi) {
            const auto& q = qnotes[qi];
            seq.ids.push_back(vocab.position_ids[static_cast<size_t>(q.pos)]);
            seq.ids.push_back(vocab.pitch_token(q.pitch));
            seq.ids.push_back(vocab.velocity_ids[static_cast<size_t>(q.vbin)]);
            seq.ids.push_back(vocab.duration_ids[static_cast<size_t>(q.dbin)]);
        }
    }
    return seq;
}

// Best-effort decode of an arbitrary id sequence (model output). Never
// throws on valid ids; incomplete note triples are dropped.
inline Score decode(const TokenSequence& seq, const Vocab& vocab) {
    const auto& cfg = vocab.config;
    Score s;
    s.ticks_per_quarter = 480;
    const int64_t step_ticks = s.ticks_per_quarter / cfg.steps_per_beat;

    int64_t bar_start = 0;
    int cur_num = 4, cur_den = 4;
    bool in_bar = false;
    int cur_pos = 0;
    int pend_pitch = -1, pend_vel = -1;
    int last_ts = -1, last_tempo = -1;

    for (const int32_t id : seq.ids) {
        if (id < 0 || id >= vocab.size()) continue;
        const auto& inf = vocab.info[static_cast<size_t>(id)];
        if (inf.kind != TokenKind::velocity && inf.kind != TokenKind::duration) {
            // a Pitch not followed by Velocity+Duration is dropped
            if (inf.kind != TokenKind::pitch) pend_pitch = -1;
            pend_vel = -1;
        }
        switch (inf.kind) {
            case TokenKind::pad:
            case TokenKind::bos:
                break;
            case TokenKind::bar:
                if (in_bar) bar_start += static_cast<int64_t>(cfg.bar_steps(cur_num, cur_den)) * step_ticks;
                in_bar = true;
                cur_pos = 0;
                break;
            case TokenKind::time_sig:
                cur_num = inf.a;
                cur_den = inf.b;
                if (id != last_ts) {
                    s.time_signatures.push_back({bar_start, cur_num, cur_den});
                    last_ts = id;
                }
                break;
            case TokenKind::tempo:
                if (id != last_tempo) {
                    s.tempos.push_back({bar_start, cfg.tempo_bin_center(inf.a)});
                    last_tempo = id;
                }
                break;
            case TokenKind::position:
                cur_pos = inf.a;
                break;
            case TokenKind::pitch:
                pend_pitch = inf.a;
                pend_vel = -1;
                break;
            case TokenKind::velocity:
                if (pend_pitch >= 0 && pend_vel < 0)
                    pend_vel = cfg.velocity_bin_midpoint(inf.a);
                else
                    pend_pitch = -1;
                break;
            case TokenKind::duration:
                if (pend_pitch >= 0 && pend_vel >= 0) {
                    s.notes.push_back({pend_pitch, pend_vel, bar_start + cur_pos * step_ticks,
                                       static_cast<int64_t>(inf.a) * step_ticks});
                }
                pend_pitch = -1;
                pend_vel = -1;
                break;
        }
    }
    s.normalize();
    return s;
}

// Contiguous window at a uniform offset, right-padded with PAD to max_len.
inline TokenSequence random_crop(const TokenSequence& seq, int max_len, Rng& rng) {
    if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
    const int64_t len = static_cast<int64_t>(seq.ids.size());
    const int64_t window = std::min<int64_t>(len, max_len);
    const int64_t max_off = len - window;
    const int64_t off = (max_off > 0) ? rng.uniform_int(0, max_off) : 0;
    TokenSequence out;
    out.ids.assign(seq.ids.begin() + off, seq.ids.begin() + off + window);
    out.ids.resize(static_cast<size_t>(max_len), 0 /* PAD */);
    return out;
}

// ---------------------------------------------------------------------------
// Token dataset: length-prefixed binary records plus a JSON vocab sidecar.

struct TokenDataset {
    struct Record {
        std::string id;
        std::vector<int32_t> ids;
    };
    std::vector<Record> records;
};

namespace detail {

template <typename T>
void put_le(std::vector<uint8_t>& b, T v) {
    for (size_t i = 0; i < sizeof(T); ++i) b.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

template <typename T>
T get_le(const uint8_t* p) {
    T v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline std::vector<uint8_t> serialize_dataset(const TokenDataset& ds) {
    std::vector<uint8_t> b;
    const char* magic = "MTDS";
    b.insert(b.end(), magic, magic + 4);
    detail::put_le<uint32_t>(b, 1);  // version
    detail::put_le<uint64_t>(b, ds.records.size());
    for (const auto& r : ds.records) {
        detail::put_le<uint32_t>(b, static_cast<uint32_t>(r.id.size()));
        b.insert(b.end(), r.id.begin(), r.id.end());
        detail::put_le<uint64_t>(b, r.ids.size());
        for (const int32_t t : r.ids) detail::put_le<uint32_t>(b, static_cast<uint32_t>(t));
    }
    return b;
}

inline TokenDataset deserialize_dataset(std::span<const uint8_t> bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), "MTDS", 4) != 0)
        throw std::runtime_error("not a token dataset file");
    const uint8_t* p = bytes.data() + 4;
    const uint8_t* end = bytes.data() + bytes.size();
    auto need = [&](size_t k) {
        if (static_cast<size_t>(end - p) < k) throw std::runtime_error("truncated dataset file");
    };
    need(4);
    const uint32_t version = detail::get_le<uint32_t>(p);
    p += 4;
    if (version != 1) throw std::runtime_error("unsupported dataset version");
    need(8);
    const uint64_t count = detail::get_le<uint64_t>(p);
    p += 8;
    TokenDataset ds;
    ds.records.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        need(4);
        const uint32_t id_len = detail::get_le<uint32_t>(p);
        p += 4;
        need(id_len);
        TokenDataset::Record r;
        r.id.assign(reinterpret_cast<const char*>(p), id_len);
        p += id_len;
        need(8);
        const uint64_t n = detail::get_le<uint64_t>(p);
        p += 8;
        need(n * 4);
        r.ids.resize(n);
        for (uint64_t k = 0; k < n; ++k) {
            r.ids[k] = static_cast<int32_t>(detail::get_le<uint32_t>(p));
            p += 4;
        }
        ds.records.push_back(std::move(r));
    }
    return ds;
}

}  // namespace miditune
