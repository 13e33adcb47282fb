#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "miditune/midi.hpp"

namespace miditune {

struct RenderError : std::runtime_error {
    explicit RenderError(const std::string& what) : std::runtime_error(what) {}
};

struct AudioClip {
    int sample_rate = 22050;
    std::vector<float> samples;  // mono, in [-1, 1]

    double seconds() const {
        return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
    }
};

struct RendererChoice {
    enum class Kind { builtin, external };
    Kind kind = Kind::builtin;
    std::string command;    // external: invoked as `command <midi> <soundfont> <wav>`
    std::string soundfont;  // external: SF2 path passed through
    std::string name = "builtin";
};

// ---------------------------------------------------------------------------
// Built-in synthesizer: per note a 4-harmonic tone (amplitudes 1, 0.5, 0.25,
// 0.125), 5 ms linear attack, 0.5 s exponential decay, gated at the note
// duration with a 10 ms release; velocity-squared amplitude; tanh limiter.

inline AudioClip render_builtin(const Score& score, int sample_rate) {
    constexpr double kAttack = 0.005;
    constexpr double kDecayTau = 0.5;
    constexpr double kRelease = 0.010;
    constexpr double kHarmonics[4] = {1.0, 0.5, 0.25, 0.125};
    constexpr double kNoteGain = 0.25 / 1.875;  // unit peak per note before the limiter
    constexpr double kTwoPi = 6.283185307179586476925286766559;

    AudioClip clip;
    clip.sample_rate = sample_rate;
    if (score.notes.empty()) return clip;

    const TempoMap tempo(score);
    double end_sec = 0.0;
    for (const auto& n : score.notes)
        end_sec = std::max(end_sec, tempo.seconds_at(n.onset + n.duration));
    const int64_t n_samples = static_cast<int64_t>(std::llround((end_sec + kRelease) * sample_rate));
    std::vector<float> mix(static_cast<size_t>(n_samples), 0.0f);

    for (const auto& n : score.notes) {
        const double t0 = tempo.seconds_at(n.onset);
        const double gate = tempo.seconds_at(n.onset + n.duration) - t0;
        const double f0 = 440.0 * std::pow(2.0, (n.pitch - 69) / 12.0);
        const double vel_amp = (n.velocity / 127.0) * (n.velocity / 127.0);
        const int64_t k0 = static_cast<int64_t>(std::ceil(t0 * sample_rate));
        for (int64_t k = k0; k < n_samples; ++k) {
            const double t = static_cast<double>(k) / sample_rate - t0;
            if (t < 0.0) continue;
            double env = std::exp(-t / kDecayTau);
            if (t < kAttack) env *= t / kAttack;
            if (t > gate) {
                const double rel = 1.0 - (t - gate) / kRelease;
                if (rel <= 0.0) break;
                env *= rel;
            }
            double tone = 0.0;
            for (int h = 0; h < 4; ++h) tone += kHarmonics[h] * std::sin(kTwoPi * f0 * (h + 1) * t);
            mix[static_cast<size_t>(k)] += static_cast<float>(kNoteGain * vel_amp * env * tone);
        }
    }
    clip.samples.resize(mix.size());
    for (size_t i = 0; i < mix.size(); ++i) clip.samples[i] = std::tanh(mix[i]);
    return clip;
}

// First floor(seconds * sample_rate) samples; shorter clips pass unchanged.
inline AudioClip crop_audio(const AudioClip& clip, double seconds) {
    if (seconds <= 0.0) throw std::invalid_argument("crop seconds must be positive");
    const size_t keep = static_cast<size_t>(seconds * clip.sample_rate);
    if (clip.samples.size() <= keep) return clip;
    AudioClip out;
    out.sample_rate = clip.sample_rate;
    out.samples.assign(clip.samples.begin(), clip.samples.begin() + keep);
    return out;
}

// ---------------------------------------------------------------------------
// RIFF WAV, 16-bit PCM mono

inline std::vector<uint8_t> write_wav(const AudioClip& clip) {
    const uint32_t data_bytes = static_cast<uint32_t>(clip.samples.size() * 2);
    std::vector<uint8_t> b;
    b.reserve(44 + data_bytes);
    auto put_u32 = [&b](uint32_t v) {
        for (int i = 0; i < 4; ++i) b.push_back(static_cast<uint8_t>(v >> (8 * i)));
    };
    auto put_u16 = [&b](uint16_t v) {
        b.push_back(static_cast<uint8_t>(v));
        b.push_back(static_cast<uint8_t>(v >> 8));
    };
    auto put_tag = [&b](const char* t) { b.insert(b.end(), t, t + 4); };
    put_tag("RIFF");
    put_u32(36 + data_bytes);
    put_tag("WAVE");
    put_tag("fmt ");
    put_u32(16);
    put_u16(1);  // PCM
    put_u16(1);  // mono
    put_u32(static_cast<uint32_t>(clip.sample_rate));
    put_u32(static_cast<uint32_t>(clip.sample_rate) * 2);
    put_u16(2);   // block align
    put_u16(16);  // bits
    put_tag("data");
    put_u32(data_bytes);
    for (const float s : clip.samples) {
        const double x = std::clamp(static_cast<double>(s), -1.0, 1.0);
        const int16_t q = static_cast<int16_t>(std::llround(x * 32767.0));
        b.push_back(static_cast<uint8_t>(q & 0xff));
        b.push_back(static_cast<uint8_t>((q >> 8) & 0xff));
    }
    return b;
}

inline AudioClip read_wav(std::span<const uint8_t> bytes) {
    auto fail = [](const std::string& m) -> AudioClip { throw RenderError("bad WAV: " + m); };
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
        return fail("missing RIFF/WAVE header");
    auto u32 = [&](size_t off) {
        uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | bytes[off + i];
        return v;
    };
    auto u16 = [&](size_t off) { return static_cast<uint16_t>(bytes[off] | (bytes[off + 1] << 8)); };

    size_t off = 12;
    int channels = 0, bits = 0;
    uint32_t rate = 0;
    bool got_fmt = false;
    AudioClip clip;
    while (off + 8 <= bytes.size()) {
        char tag[5] = {0};
        std::memcpy(tag, bytes.data() + off, 4);
        const uint32_t len = u32(off + 4);
        const size_t body = off + 8;
        if (body + len > bytes.size()) return fail("truncated chunk");
        if (std::memcmp(tag, "fmt ", 4) == 0) {
            if (len < 16) return fail("short fmt chunk");
            if (u16(body) != 1) return fail("not PCM");
            channels = u16(body + 2);
            rate = u32(body + 4);
            bits = u16(body + 14);
            got_fmt = true;
        } else if (std::memcmp(tag, "data", 4) == 0) {
            if (!got_fmt) return fail("data before fmt");
            if (channels != 1 || bits != 16) return fail("expected 16-bit mono PCM");
            clip.sample_rate = static_cast<int>(rate);
            clip.samples.resize(len / 2);
            for (size_t i = 0; i < clip.samples.size(); ++i) {
                const int16_t q = static_cast<int16_t>(
                    static_cast<uint16_t>(bytes[body + 2 * i] | (bytes[body + 2 * i + 1] << 8)));
                clip.samples[i] = static_cast<float>(q / 32767.0);
            }
            return clip;
        }
        off = body + len + (len & 1);
    }
    return fail("no data chunk");
}

inline AudioClip resample_linear(const AudioClip& in, int target_rate) {
    if (in.sample_rate == target_rate || in.samples.empty()) {
        AudioClip out = in;
        out.sample_rate = target_rate;
        return out;
    }
    AudioClip out;
    out.sample_rate = target_rate;
    const double ratio = static_cast<double>(in.sample_rate) / target_rate;
    const size_t n = static_cast<size_t>(in.samples.size() / ratio);
    out.samples.resize(n);
    for (size_t i = 0; i < n; ++i) {
        const double x = i * ratio;
        const size_t k = static_cast<size_t>(x);
        const double f = x - k;
        const float a = in.samples[std::min(k, in.samples.size() - 1)];
        const float b = in.samples[std::min(k + 1, in.samples.size() - 1)];
        out.samples[i] = static_cast<float>(a + (b - a) * f);
    }
    return out;
}

// ---------------------------------------------------------------------------
// External renderer hook: `command <midi path> <soundfont path> <wav path>`

namespace detail {

inline std::filesystem::path temp_file(const std::string& suffix) {
    static int counter = 0;
    const auto dir = std::filesystem::temp_directory_path();
    return dir / ("miditune_" + std::to_string(::getpid()) + "_" + std::to_string(counter++) + suffix);
}

inline std::vector<uint8_t> read_file_bytes(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + p.string());
    return std::vector<uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& p, std::span<const uint8_t> bytes) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace detail

inline AudioClip render_external(const Score& score, const RendererChoice& choice, int sample_rate) {
    namespace fs = std::filesystem;
    const fs::path midi_path = detail::temp_file(".mid");
    const fs::path wav_path = detail::temp_file(".wav");
    detail::write_file_bytes(midi_path, write_smf(score));
    const std::string cmd = choice.command + " \"" + midi_path.string() + "\" \"" + choice.soundfont +
                            "\" \"" + wav_path.string() + "\"";
    const int rc = std::system(cmd.c_str());
    std::vector<uint8_t> wav_bytes;
    std::string failure;
    if (rc != 0) {
        failure = "renderer exited with status " + std::to_string(rc);
    } else {
        try {
            wav_bytes = detail::read_file_bytes(wav_path);
        } catch (const std::exception& e) {
            failure = e.what();
        }
    }
    std::error_code ec;
    fs::remove(midi_path, ec);
    fs::remove(wav_path, ec);
    if (!failure.empty()) throw RenderError("external renderer failed: " + failure + " (cmd: " + cmd + ")");
    return resample_linear(read_wav(wav_bytes), sample_rate);
}

inline AudioClip render(const Score& score, const RendererChoice& choice, int sample_rate) {
    if (choice.kind == RendererChoice::Kind::builtin) return render_builtin(score, sample_rate);
    if (choice.command.empty()) throw RenderError("external renderer command not configured");
    return render_external(score, choice, sample_rate);
}

}  // namespace miditune
