#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace miditune {

struct MidiError : std::runtime_error {
    explicit MidiError(const std::string& what) : std::runtime_error(what) {}
};

struct Note {
    int pitch = 60;      // MIDI pitch, [0, 127]
    int velocity = 64;   // [1, 127]
    int64_t onset = 0;   // ticks
    int64_t duration = 1;  // ticks, >= 1

    bool operator==(const Note&) const = default;
};

inline bool note_less(const Note& a, const Note& b) {
    return std::tie(a.onset, a.pitch, a.duration, a.velocity) <
           std::tie(b.onset, b.pitch, b.duration, b.velocity);
}

struct TempoEvent {
    int64_t tick = 0;
    double bpm = 120.0;
    bool operator==(const TempoEvent&) const = default;
};

struct TimeSigEvent {
    int64_t tick = 0;
    int numerator = 4;
    int denominator = 4;  // power of two
    bool operator==(const TimeSigEvent&) const = default;
};

// Symbolic score: single merged piano track plus tempo / meter maps.
struct Score {
    int ticks_per_quarter = 480;
    std::vector<Note> notes;                    // sorted by (onset, pitch, duration, velocity)
    std::vector<TempoEvent> tempos;             // sorted by tick, one per tick, starts at 0
    std::vector<TimeSigEvent> time_signatures;  // likewise

    bool operator==(const Score&) const = default;

    int64_t end_tick() const {
        int64_t end = 0;
        for (const auto& n : notes) end = std::max(end, n.onset + n.duration);
        return end;
    }

    int64_t last_onset() const { return notes.empty() ? 0 : notes.back().onset; }

    // Establishes the Score invariants: sorted, deduped notes; clamped
    // ranges; tempo and time signature present at tick 0; per-tick event
    // dedup keeping the last event (MIDI semantics: later event wins).
    void normalize() {
        for (auto& n : notes) {
            n.pitch = std::clamp(n.pitch, 0, 127);
            n.velocity = std::clamp(n.velocity, 1, 127);
            if (n.onset < 0) n.onset = 0;
            if (n.duration < 1) n.duration = 1;
        }
        std::sort(notes.begin(), notes.end(), note_less);
        notes.erase(std::unique(notes.begin(), notes.end(),
                                [](const Note& a, const Note& b) {
                                    return a.onset == b.onset && a.pitch == b.pitch &&
                                           a.duration == b.duration;
                                }),
                    notes.end());

        auto dedup_by_tick = [](auto& events) {
            std::stable_sort(events.begin(), events.end(),
                             [](const auto& a, const auto& b) { return a.tick < b.tick; });
            // keep the last event of each same-tick run
            auto out = events;
            out.clear();
            for (size_t i = 0; i < events.size(); ++i) {
                if (i + 1 < events.size() && events[i + 1].tick == events[i].tick) continue;
                out.push_back(events[i]);
            }
            events = std::move(out);
        };
        dedup_by_tick(tempos);
        dedup_by_tick(time_signatures);
        if (tempos.empty() || tempos.front().tick > 0)
            tempos.insert(tempos.begin(), TempoEvent{0, 120.0});
        if (time_signatures.empty() || time_signatures.front().tick > 0)
            time_signatures.insert(time_signatures.begin(), TimeSigEvent{0, 4, 4});
    }
};

enum class RejectReason {
    none,
    no_piano_program,
    notes_per_bar_exceeded,
    empty_bar_ratio_exceeded,
    parse_error,
};

inline const char* to_string(RejectReason r) {
    switch (r) {
        case RejectReason::none: return "none";
        case RejectReason::no_piano_program: return "no-piano-program";
        case RejectReason::notes_per_bar_exceeded: return "notes-per-bar-exceeded";
        case RejectReason::empty_bar_ratio_exceeded: return "empty-bar-ratio-exceeded";
        case RejectReason::parse_error: return "parse-error";
    }
    return "?";
}

struct FilterReport {
    bool accepted = true;
    RejectReason reason = RejectReason::none;  // set iff !accepted
};

// ---------------------------------------------------------------------------
// Bars and musical time

struct Bar {
    int64_t start = 0;
    int64_t length = 0;  // ticks
    int numerator = 4;
    int denominator = 4;
};

inline int64_t bar_length_ticks(int numerator, int denominator, int tpq) {
    const int64_t len = static_cast<int64_t>(numerator) * 4 * tpq / std::max(1, denominator);
    return std::max<int64_t>(1, len);
}

// Bars are delimited by time-signature events; a meter change starting
// mid-bar cuts the previous bar short and opens a new one at its tick.
// Emits every bar whose start tick is <= end_tick (at least one).
inline std::vector<Bar> bar_grid(const Score& score, int64_t end_tick) {
    std::vector<Bar> bars;
    const auto& ts = score.time_signatures;
    size_t i = 0;
    int64_t start = 0;
    while (true) {
        while (i + 1 < ts.size() && ts[i + 1].tick <= start) ++i;
        const int num = ts[i].numerator;
        const int den = ts[i].denominator;
        int64_t len = bar_length_ticks(num, den, score.ticks_per_quarter);
        if (i + 1 < ts.size() && ts[i + 1].tick < start + len) len = ts[i + 1].tick - start;
        if (len < 1) len = 1;
        bars.push_back({start, len, num, den});
        start += len;
        if (start > end_tick) break;
    }
    return bars;
}

inline size_t bar_index_of(const std::vector<Bar>& bars, int64_t tick) {
    size_t lo = 0, hi = bars.size();
    while (lo + 1 < hi) {
        const size_t mid = (lo + hi) / 2;
        if (bars[mid].start <= tick)
            lo = mid;
        else
            hi = mid;
    }
    return lo;
}

// Piecewise-linear tick -> seconds map built from the tempo events.
class TempoMap {
public:
    explicit TempoMap(const Score& score) {
        double sec = 0.0;
        const auto& ts = score.tempos;
        for (size_t i = 0; i < ts.size(); ++i) {
            const double spt = 60.0 / (ts[i].bpm * score.ticks_per_quarter);
            segs_.push_back({ts[i].tick, sec, spt});
            const int64_t next = (i + 1 < ts.size()) ? ts[i + 1].tick : ts[i].tick;
            sec += static_cast<double>(next - ts[i].tick) * spt;
        }
        if (segs_.empty()) segs_.push_back({0, 0.0, 60.0 / (120.0 * score.ticks_per_quarter)});
    }

    double seconds_at(int64_t tick) const {
        if (tick <= segs_.front().tick) return 0.0;
        size_t lo = 0, hi = segs_.size();
        while (lo + 1 < hi) {
            const size_t mid = (lo + hi) / 2;
            if (segs_[mid].tick <= tick)
                lo = mid;
            else
                hi = mid;
        }
        return segs_[lo].sec_start + static_cast<double>(tick - segs_[lo].tick) * segs_[lo].sec_per_tick;
    }

private:
    struct Seg {
        int64_t tick;
        double sec_start;
        double sec_per_tick;
    };
    std::vector<Seg> segs_;
};

// ---------------------------------------------------------------------------
// Standard MIDI File parsing

struct TrackNote {
    Note note;
    int channel = 0;
    int program = 0;  // program active on the note's channel at its onset
};

struct MultiTrackMidi {
    int ticks_per_quarter = 480;
    std::vector<std::vector<TrackNote>> tracks;
    std::vector<TempoEvent> tempos;
    std::vector<TimeSigEvent> time_signatures;
};

namespace detail {

class ByteReader {
public:
    ByteReader(const uint8_t* p, size_t n) : p_(p), n_(n) {}

    size_t remaining() const { return n_ - off_; }
    size_t offset() const { return off_; }

    uint8_t peek() const {
        require(1);
        return p_[off_];
    }
    uint8_t u8() {
        require(1);
        return p_[off_++];
    }
    uint16_t u16be() {
        require(2);
        uint16_t v = (static_cast<uint16_t>(p_[off_]) << 8) | p_[off_ + 1];
        off_ += 2;
        return v;
    }
    uint32_t u32be() {
        require(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v = (v << 8) | p_[off_ + i];
        off_ += 4;
        return v;
    }
    uint32_t varlen() {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            const uint8_t b = u8();
            v = (v << 7) | (b & 0x7f);
            if (!(b & 0x80)) return v;
        }
        throw MidiError("variable-length quantity longer than 4 bytes");
    }
    void skip(size_t k) {
        require(k);
        off_ += k;
    }
    const uint8_t* cursor() const { return p_ + off_; }

private:
    void require(size_t k) const {
        if (off_ + k > n_) throw MidiError("truncated MIDI data");
    }
    const uint8_t* p_;
    size_t n_;
    size_t off_ = 0;
};

}  // namespace detail

inline MultiTrackMidi parse_smf_tracks(std::span<const uint8_t> bytes) {
    detail::ByteReader r(bytes.data(), bytes.size());
    if (r.remaining() < 14) throw MidiError("malformed header: too short");
    if (std::memcmp(r.cursor(), "MThd", 4) != 0) throw MidiError("malformed header: no MThd");
    r.skip(4);
    const uint32_t hlen = r.u32be();
    if (hlen < 6) throw MidiError("malformed header: bad length");
    const uint16_t format = r.u16be();
    const uint16_t ntrks = r.u16be();
    const uint16_t division = r.u16be();
    if (hlen > 6) r.skip(hlen - 6);
    if (format > 1) throw MidiError("unsupported SMF format " + std::to_string(format));
    if (division & 0x8000) throw MidiError("SMPTE division not supported");
    if (division == 0) throw MidiError("malformed header: zero division");

    MultiTrackMidi out;
    out.ticks_per_quarter = division;

    for (uint16_t trk = 0; trk < ntrks; ++trk) {
        if (r.remaining() < 8) throw MidiError("truncated track chunk");
        if (std::memcmp(r.cursor(), "MTrk", 4) != 0) throw MidiError("expected MTrk chunk");
        r.skip(4);
        const uint32_t len = r.u32be();
        if (r.remaining() < len) throw MidiError("truncated track data");
        detail::ByteReader tr(r.cursor(), len);
        r.skip(len);

        std::vector<TrackNote> notes;
        int programs[16] = {0};
        struct Open {
            int64_t tick;
            int velocity;
            int program;
        };
        std::map<int, std::vector<Open>> open;  // (channel<<8 | pitch) -> FIFO of opens
        int64_t tick = 0;
        uint8_t running = 0;
        bool ended = false;

        auto close_note = [&](int channel, int pitch, int64_t off_tick) {
            auto it = open.find((channel << 8) | pitch);
            if (it == open.end() || it->second.empty()) return;  // stray note-off
            const Open o = it->second.front();
            it->second.erase(it->second.begin());
            if (channel == 9) return;  // percussion
            Note n{pitch, std::clamp(o.velocity, 1, 127), o.tick, std::max<int64_t>(1, off_tick - o.tick)};
            notes.push_back({n, channel, o.program});
        };

        while (!ended && tr.remaining() > 0) {
            tick += tr.varlen();
            uint8_t status = tr.peek();
            if (status & 0x80) {
                tr.skip(1);
                if (status < 0xF0) running = status;
            } else {
                if (running == 0) throw MidiError("data byte without running status");
                status = running;
            }
            const int channel = status & 0x0f;
            switch (status & 0xf0) {
                case 0x80: {
                    const int pitch = tr.u8() & 0x7f;
                    tr.u8();  // release velocity
                    close_note(channel, pitch, tick);
                    break;
                }
                case 0x90: {
                    const int pitch = tr.u8() & 0x7f;
                    const int vel = tr.u8() & 0x7f;
                    if (vel == 0) {
                        close_note(channel, pitch, tick);
                    } else {
                        open[(channel << 8) | pitch].push_back({tick, vel, programs[channel]});
                    }
                    break;
                }
                case 0xA0:
                case 0xB0:
                case 0xE0:
                    tr.skip(2);
                    break;
                case 0xC0:
                    programs[channel] = tr.u8() & 0x7f;
                    break;
                case 0xD0:
                    tr.skip(1);
                    break;
                case 0xF0: {
                    if (status == 0xF0 || status == 0xF7) {
                        running = 0;
                        const uint32_t slen = tr.varlen();
                        tr.skip(slen);
                    } else if (status == 0xFF) {
                        running = 0;
                        const uint8_t type = tr.u8();
                        const uint32_t mlen = tr.varlen();
                        if (type == 0x51 && mlen == 3) {
                            uint32_t usec = 0;
                            for (int i = 0; i < 3; ++i) usec = (usec << 8) | tr.u8();
                            if (usec > 0) out.tempos.push_back({tick, 60000000.0 / usec});
                        } else if (type == 0x58 && mlen >= 2) {
                            const int num = tr.u8();
                            const int dpow = tr.u8();
                            tr.skip(mlen - 2);
                            if (num >= 1 && dpow <= 12)
                                out.time_signatures.push_back({tick, num, 1 << dpow});
                        } else if (type == 0x2F) {
                            tr.skip(mlen);
                            ended = true;
                        } else {
                            tr.skip(mlen);
                        }
                    } else {
                        throw MidiError("unexpected system realtime byte in file");
                    }
                    break;
                }
                default:
                    throw MidiError("bad status byte");
            }
        }
        // unmatched note-ons closed at the end of the track
        for (auto& [key, opens] : open) {
            const int channel = key >> 8;
            const int pitch = key & 0xff;
            for (const auto& o : opens) {
                if (channel == 9) continue;
                Note n{pitch, std::clamp(o.velocity, 1, 127), o.tick, std::max<int64_t>(1, tick - o.tick)};
                notes.push_back({n, channel, o.program});
            }
        }
        out.tracks.push_back(std::move(notes));
    }
    return out;
}

// Merge every non-percussion track into one Score, regardless of program.
inline Score parse_smf(std::span<const uint8_t> bytes) {
    const MultiTrackMidi m = parse_smf_tracks(bytes);
    Score s;
    s.ticks_per_quarter = m.ticks_per_quarter;
    for (const auto& trk : m.tracks)
        for (const auto& tn : trk) s.notes.push_back(tn.note);
    s.tempos = m.tempos;
    s.time_signatures = m.time_signatures;
    s.normalize();
    return s;
}

// Keeps only notes whose program is in the General MIDI piano group
// (program bytes 0-7); returns nullopt when the file has none.
inline std::optional<Score> filter_and_merge_piano(const MultiTrackMidi& m) {
    Score s;
    s.ticks_per_quarter = m.ticks_per_quarter;
    for (const auto& trk : m.tracks)
        for (const auto& tn : trk)
            if (tn.program >= 0 && tn.program <= 7) s.notes.push_back(tn.note);
    if (s.notes.empty()) return std::nullopt;
    s.tempos = m.tempos;
    s.time_signatures = m.time_signatures;
    s.normalize();
    return s;
}

// ---------------------------------------------------------------------------
// Standard MIDI File writing (format 0, single track)

namespace detail {

inline void put_u16be(std::vector<uint8_t>& b, uint16_t v) {
    b.push_back(static_cast<uint8_t>(v >> 8));
    b.push_back(static_cast<uint8_t>(v));
}
inline void put_u32be(std::vector<uint8_t>& b, uint32_t v) {
    for (int i = 3; i >= 0; --i) b.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
inline void put_varlen(std::vector<uint8_t>& b, uint32_t v) {
    uint8_t buf[4];
    int n = 0;
    buf[n++] = v & 0x7f;
    while (v >>= 7) buf[n++] = (v & 0x7f) | 0x80;
    while (n--) b.push_back(buf[n]);
}

}  // namespace detail

inline std::vector<uint8_t> write_smf(const Score& score) {
    struct Ev {
        int64_t tick;
        int cls;  // 0 timesig, 1 tempo, 2 note-off, 3 note-on, 4 end
        int64_t k1, k2;
        std::vector<uint8_t> payload;
    };
    std::vector<Ev> evs;
    for (const auto& ts : score.time_signatures) {
        int dpow = 0;
        while ((1 << dpow) < ts.denominator) ++dpow;
        evs.push_back({ts.tick, 0, 0, 0,
                       {0xFF, 0x58, 0x04, static_cast<uint8_t>(ts.numerator),
                        static_cast<uint8_t>(dpow), 24, 8}});
    }
    for (const auto& t : score.tempos) {
        int64_t usec = static_cast<int64_t>(std::llround(60000000.0 / t.bpm));
        usec = std::clamp<int64_t>(usec, 1, 0xFFFFFF);
        evs.push_back({t.tick, 1, 0, 0,
                       {0xFF, 0x51, 0x03, static_cast<uint8_t>(usec >> 16),
                        static_cast<uint8_t>((usec >> 8) & 0xff), static_cast<uint8_t>(usec & 0xff)}});
    }
    int64_t last_tick = 0;
    for (const auto& n : score.notes) {
        // same-tick same-pitch note-ons are ordered shortest-first so the
        // reader's FIFO matching recovers the original durations
        evs.push_back({n.onset, 3, n.pitch, n.duration,
                       {0x90, static_cast<uint8_t>(n.pitch), static_cast<uint8_t>(n.velocity)}});
        evs.push_back({n.onset + n.duration, 2, n.pitch, n.duration,
                       {0x80, static_cast<uint8_t>(n.pitch), 0x00}});
        last_tick = std::max(last_tick, n.onset + n.duration);
    }
    for (const auto& e : evs) last_tick = std::max(last_tick, e.tick);
    evs.push_back({last_tick, 4, 0, 0, {0xFF, 0x2F, 0x00}});

    std::sort(evs.begin(), evs.end(), [](const Ev& a, const Ev& b) {
        return std::tie(a.tick, a.cls, a.k1, a.k2) < std::tie(b.tick, b.cls, b.k1, b.k2);
    });

    std::vector<uint8_t> track;
    int64_t cur = 0;
    for (const auto& e : evs) {
        detail::put_varlen(track, static_cast<uint32_t>(e.tick - cur));
        cur = e.tick;
        track.insert(track.end(), e.payload.begin(), e.payload.end());
    }

    std::vector<uint8_t> out;
    out.reserve(track.size() + 22);
    const char* mthd = "MThd";
    out.insert(out.end(), mthd, mthd + 4);
    detail::put_u32be(out, 6);
    detail::put_u16be(out, 0);  // format 0
    detail::put_u16be(out, 1);  // one track
    detail::put_u16be(out, static_cast<uint16_t>(score.ticks_per_quarter));
    const char* mtrk = "MTrk";
    out.insert(out.end(), mtrk, mtrk + 4);
    detail::put_u32be(out, static_cast<uint32_t>(track.size()));
    out.insert(out.end(), track.begin(), track.end());
    return out;
}

// ---------------------------------------------------------------------------
// Corpus gate: > 300 notes in any bar, or > 20% empty bars over the span
// [first bar with an onset, last bar with an onset], rejects the score.

inline FilterReport corpus_gate(const Score& score) {
    if (score.notes.empty()) return {true, RejectReason::none};
    const auto bars = bar_grid(score, score.last_onset());
    std::vector<int64_t> counts(bars.size(), 0);
    for (const auto& n : score.notes) ++counts[bar_index_of(bars, n.onset)];
    for (const int64_t c : counts)
        if (c > 300) return {false, RejectReason::notes_per_bar_exceeded};
    size_t first = counts.size(), last = 0;
    for (size_t i = 0; i < counts.size(); ++i) {
        if (counts[i] > 0) {
            if (first == counts.size()) first = i;
            last = i;
        }
    }
    int64_t empty = 0;
    for (size_t i = first; i <= last; ++i)
        if (counts[i] == 0) ++empty;
    const int64_t span = static_cast<int64_t>(last - first + 1);
    if (static_cast<double>(empty) > 0.20 * static_cast<double>(span))
        return {false, RejectReason::empty_bar_ratio_exceeded};
    return {true, RejectReason::none};
}

}  // namespace miditune
