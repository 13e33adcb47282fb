#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <semaphore>
#include <string>
#include <vector>

#include <json.hpp>

#include "miditune/checkpoint.hpp"
#include "miditune/features.hpp"
#include "miditune/grpo.hpp"
#include "miditune/midi.hpp"
#include "miditune/pretrain.hpp"
#include "miditune/remote_scorer.hpp"
#include "miditune/render.hpp"
#include "miditune/scorer.hpp"
#include "miditune/tokenizer.hpp"

namespace miditune {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// JSON bindings

inline void to_json(json& j, const TokenizerConfig& c) {
    json ts = json::array();
    for (auto [n, d] : c.time_signatures) ts.push_back({n, d});
    j = json{{"pitch_min", c.pitch_min},
             {"pitch_max", c.pitch_max},
             {"velocity_bins", c.velocity_bins},
             {"tempo_bins", c.tempo_bins},
             {"tempo_min", c.tempo_min},
             {"tempo_max", c.tempo_max},
             {"steps_per_beat", c.steps_per_beat},
             {"time_signatures", ts}};
}

inline void from_json(const json& j, TokenizerConfig& c) {
    c.pitch_min = j.value("pitch_min", c.pitch_min);
    c.pitch_max = j.value("pitch_max", c.pitch_max);
    c.velocity_bins = j.value("velocity_bins", c.velocity_bins);
    c.tempo_bins = j.value("tempo_bins", c.tempo_bins);
    c.tempo_min = j.value("tempo_min", c.tempo_min);
    c.tempo_max = j.value("tempo_max", c.tempo_max);
    c.steps_per_beat = j.value("steps_per_beat", c.steps_per_beat);
    if (j.contains("time_signatures")) {
        c.time_signatures.clear();
        for (const auto& e : j["time_signatures"])
            c.time_signatures.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
    }
}

inline void to_json(json& j, const ModelConfig& c) {
    j = json{{"n_layers", c.n_layers}, {"d_model", c.d_model},   {"n_heads", c.n_heads},
             {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
             {"seed", c.seed}};
}

inline void from_json(const json& j, ModelConfig& c) {
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.seed = j.value("seed", c.seed);
}

inline void to_json(json& j, const PretrainConfig& c) {
    j = json{{"epochs", c.epochs},
             {"batch_size", c.batch_size},
             {"crop_len", c.crop_len},
             {"lr", c.lr},
             {"seed", c.seed}};
}

inline void from_json(const json& j, PretrainConfig& c) {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.crop_len = j.value("crop_len", c.crop_len);
    c.lr = j.value("lr", c.lr);
    c.seed = j.value("seed", c.seed);
}

inline void to_json(json& j, const GrpoConfig& c) {
    j = json{{"prompts_per_iter", c.prompts_per_iter},
             {"completions_per_prompt", c.completions_per_prompt},
             {"temperature", c.temperature},
             {"beta", c.beta},
             {"iterations", c.iterations},
             {"lr_start", c.lr_start},
             {"max_new_tokens", c.max_new_tokens},
             {"audio_crop_seconds", c.audio_crop_seconds},
             {"seed", c.seed},
             {"prompt_source",
              c.prompt_source == GrpoConfig::PromptSource::procedural ? "procedural" : "dataset"},
             {"dataset_prompt_len", c.dataset_prompt_len},
             {"advantage_epsilon", c.advantage_epsilon},
             {"max_grad_norm", c.max_grad_norm},
             {"checkpoint_interval", c.checkpoint_interval},
             {"max_parallel", c.max_parallel}};
}

inline void from_json(const json& j, GrpoConfig& c) {
    c.prompts_per_iter = j.value("prompts_per_iter", c.prompts_per_iter);
    c.completions_per_prompt = j.value("completions_per_prompt", c.completions_per_prompt);
    c.temperature = j.value("temperature", c.temperature);
    c.beta = j.value("beta", c.beta);
    c.iterations = j.value("iterations", c.iterations);
    c.lr_start = j.value("lr_start", c.lr_start);
    c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
    c.audio_crop_seconds = j.value("audio_crop_seconds", c.audio_crop_seconds);
    c.seed = j.value("seed", c.seed);
    if (j.contains("prompt_source"))
        c.prompt_source = j["prompt_source"] == "dataset" ? GrpoConfig::PromptSource::dataset
                                                          : GrpoConfig::PromptSource::procedural;
    c.dataset_prompt_len = j.value("dataset_prompt_len", c.dataset_prompt_len);
    c.advantage_epsilon = j.value("advantage_epsilon", c.advantage_epsilon);
    c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    c.max_parallel = j.value("max_parallel", c.max_parallel);
}

inline void to_json(json& j, const RewardSpec& s) {
    j = json{{"axis", to_string(s.axis)},
             {"scorer", s.kind == RewardSpec::Kind::proxy ? "proxy" : "remote"}};
}

inline void from_json(const json& j, RewardSpec& s) {
    if (j.contains("axis")) s.axis = reward_axis_from_string(j["axis"].get<std::string>());
    if (j.contains("scorer"))
        s.kind = j["scorer"] == "remote" ? RewardSpec::Kind::remote : RewardSpec::Kind::proxy;
}

inline void to_json(json& j, const RendererChoice& r) {
    j = json{{"kind", r.kind == RendererChoice::Kind::builtin ? "builtin" : "external"},
             {"command", r.command},
             {"soundfont", r.soundfont},
             {"name", r.name}};
}

inline void from_json(const json& j, RendererChoice& r) {
    if (j.contains("kind"))
        r.kind = j["kind"] == "external" ? RendererChoice::Kind::external
                                         : RendererChoice::Kind::builtin;
    r.command = j.value("command", r.command);
    r.soundfont = j.value("soundfont", r.soundfont);
    r.name = j.value("name", r.name);
}

inline void to_json(json& j, const RemoteScorerConfig& c) {
    j = json{{"base_url", c.base_url},
             {"timeout_ms", c.timeout_ms},
             {"max_retries", c.max_retries},
             {"max_in_flight", c.max_in_flight},
             {"bearer_token", c.bearer_token}};
}

inline void from_json(const json& j, RemoteScorerConfig& c) {
    c.base_url = j.value("base_url", c.base_url);
    c.timeout_ms = j.value("timeout_ms", c.timeout_ms);
    c.max_retries = j.value("max_retries", c.max_retries);
    c.max_in_flight = j.value("max_in_flight", c.max_in_flight);
    c.bearer_token = j.value("bearer_token", c.bearer_token);
}

inline void to_json(json& j, const FeatureReport& f) {
    j = json{{"n_notes", f.n_notes},
             {"polyphony_rate", f.polyphony_rate},
             {"empty_beat_rate", f.empty_beat_rate},
             {"pitch_histogram", f.pitch_histogram},
             {"pitch_range", f.pitch_range},
             {"scale_consistency", f.scale_consistency},
             {"velocity_histogram", f.velocity_histogram},
             {"velocity_range", f.velocity_range}};
}

inline void to_json(json& j, const AestheticScores& s) {
    j = json{{"CE", s.content_enjoyment},
             {"CU", s.content_usefulness},
             {"PC", s.production_complexity},
             {"PQ", s.production_quality}};
}

inline void to_json(json& j, const IterationStats& s) {
    j = json{{"iter", s.iter},         {"mean_reward", s.mean_reward}, {"std_reward", s.std_reward},
             {"mean_kl", s.mean_kl},   {"loss", s.loss},               {"lr", s.lr},
             {"wall_ms", s.wall_ms}};
}

// Fully resolved run configuration; every command writes it next to its
// outputs for provenance.
struct PipelineConfig {
    uint64_t seed = 7;
    int sample_rate = 22050;
    TokenizerConfig tokenizer;
    ModelConfig model{2, 128, 4, 512, 0, 512, 7};
    PretrainConfig pretrain;
    GrpoConfig grpo;
    RewardSpec reward;
    RendererChoice renderer;
    RemoteScorerConfig remote;
};

inline void to_json(json& j, const PipelineConfig& c) {
    j = json{{"seed", c.seed},           {"sample_rate", c.sample_rate},
             {"tokenizer", c.tokenizer}, {"model", c.model},
             {"pretrain", c.pretrain},   {"grpo", c.grpo},
             {"reward", c.reward},       {"renderer", c.renderer},
             {"remote", c.remote}};
}

inline void from_json(const json& j, PipelineConfig& c) {
    c.seed = j.value("seed", c.seed);
    c.sample_rate = j.value("sample_rate", c.sample_rate);
    if (j.contains("tokenizer")) j["tokenizer"].get_to(c.tokenizer);
    if (j.contains("model")) j["model"].get_to(c.model);
    if (j.contains("pretrain")) j["pretrain"].get_to(c.pretrain);
    if (j.contains("grpo")) j["grpo"].get_to(c.grpo);
    if (j.contains("reward")) j["reward"].get_to(c.reward);
    if (j.contains("renderer")) j["renderer"].get_to(c.renderer);
    if (j.contains("remote")) j["remote"].get_to(c.remote);
}

// ---------------------------------------------------------------------------
// Filesystem helpers

// Write-to-temp-then-rename so a failed command never leaves a partial file.
inline void atomic_write(const fs::path& path, std::span<const uint8_t> bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write " + tmp.string());
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw std::runtime_error("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline void atomic_write_text(const fs::path& path, const std::string& text) {
    atomic_write(path, std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(text.data()),
                                                text.size()));
}

inline std::vector<uint8_t> read_bytes(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    return std::vector<uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

// One command at a time per output directory.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) {
        fs::create_directories(dir);
        path_ = dir / ".miditune.lock";
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw std::runtime_error("output directory is locked by another run: " + path_.string());
    }
    ~DirLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            std::error_code ec;
            fs::remove(path_, ec);
        }
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
    int fd_ = -1;
};

inline std::vector<fs::path> list_midi_files(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const auto ext = e.path().extension().string();
        if (ext == ".mid" || ext == ".midi") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

inline void write_resolved_config(const fs::path& out_dir, const PipelineConfig& cfg) {
    atomic_write_text(out_dir / "resolved_config.json", json(cfg).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Commands

struct IngestReport {
    int64_t accepted = 0;
    std::map<std::string, int64_t> rejected;  // reason -> count
    struct Entry {
        std::string id;
        bool accepted;
        std::string reason;
    };
    std::vector<Entry> files;
};

inline void to_json(json& j, const IngestReport& r) {
    json files = json::array();
    for (const auto& e : r.files)
        files.push_back({{"id", e.id}, {"accepted", e.accepted}, {"reason", e.reason}});
    j = json{{"accepted", r.accepted}, {"rejected", r.rejected}, {"files", files}};
}

// Parse + piano filter + corpus gate + encode over a directory of SMF files.
inline IngestReport cmd_ingest(const fs::path& corpus_dir, const fs::path& dataset_path,
                               const TokenizerConfig& tok_cfg) {
    const Vocab vocab = build_vocab(tok_cfg);
    IngestReport report;
    TokenDataset ds;
    for (const auto& path : list_midi_files(corpus_dir)) {
        const std::string id = path.filename().string();
        RejectReason reason = RejectReason::none;
        try {
            const MultiTrackMidi m = parse_smf_tracks(read_bytes(path));
            const auto merged = filter_and_merge_piano(m);
            if (!merged) {
                reason = RejectReason::no_piano_program;
            } else {
                const FilterReport gate = corpus_gate(*merged);
                if (!gate.accepted) {
                    reason = gate.reason;
                } else {
                    ds.records.push_back({id, encode(*merged, vocab).ids});
                }
            }
        } catch (const MidiError&) {
            reason = RejectReason::parse_error;
        }
        const bool ok = reason == RejectReason::none;
        if (ok)
            ++report.accepted;
        else
            ++report.rejected[to_string(reason)];
        report.files.push_back({id, ok, ok ? "" : to_string(reason)});
    }

    atomic_write(dataset_path, serialize_dataset(ds));
    json sidecar{{"config", tok_cfg}, {"tokens", vocab.tokens}};
    atomic_write_text(dataset_path.string() + ".vocab.json", sidecar.dump(2) + "\n");
    atomic_write_text(dataset_path.string() + ".report.json", json(report).dump(2) + "\n");
    return report;
}

inline TokenDataset load_dataset(const fs::path& dataset_path) {
    return deserialize_dataset(read_bytes(dataset_path));
}

// Loads the vocab sidecar written by cmd_ingest and verifies the token list
// still matches a rebuild from its config.
inline Vocab load_vocab_sidecar(const fs::path& dataset_path) {
    const json j = json::parse(read_bytes(dataset_path.string() + ".vocab.json"));
    TokenizerConfig cfg = j.at("config").get<TokenizerConfig>();
    Vocab v = build_vocab(cfg);
    const auto tokens = j.at("tokens").get<std::vector<std::string>>();
    if (tokens != v.tokens) throw std::runtime_error("vocab sidecar does not match its config");
    return v;
}

struct PretrainOutcome {
    std::vector<EpochStats> epochs;
    fs::path checkpoint;
};

inline PretrainOutcome cmd_pretrain(const fs::path& dataset_path, const fs::path& checkpoint_path,
                                    const PipelineConfig& cfg) {
    const TokenDataset ds = load_dataset(dataset_path);
    const Vocab vocab = load_vocab_sidecar(dataset_path);
    PretrainOutcome out;
    ModelConfig mcfg = cfg.model;
    mcfg.vocab_size = vocab.size();
    mcfg.seed = cfg.seed;
    PretrainConfig pcfg = cfg.pretrain;
    pcfg.seed = cfg.seed;
    const ModelParams<float> params = pretrain(ds, vocab, mcfg, pcfg, &out.epochs);
    atomic_write(checkpoint_path, serialize_checkpoint(params));
    json log = json::array();
    for (const auto& e : out.epochs)
        log.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}});
    atomic_write_text(checkpoint_path.string() + ".log.json", log.dump(2) + "\n");
    out.checkpoint = checkpoint_path;
    return out;
}

inline ScoreFn make_score_fn(const RewardSpec& spec, const RemoteScorerConfig& remote) {
    if (spec.kind == RewardSpec::Kind::proxy) return ScoreFn(score_proxy);
    // bound concurrent requests to the configured in-flight limit
    auto gate = std::make_shared<std::counting_semaphore<256>>(
        std::max(1, std::min(256, remote.max_in_flight)));
    return [remote, gate](const Score&, const AudioClip& clip) {
        gate->acquire();
        struct Release {
            std::counting_semaphore<256>* s;
            ~Release() { s->release(); }
        } release{gate.get()};
        return score_remote(clip, remote);
    };
}

struct TuneOutcome {
    std::vector<IterationStats> log;
    fs::path checkpoint;
};

inline TuneOutcome cmd_tune(const fs::path& checkpoint_in, const fs::path& checkpoint_out,
                            const fs::path& iter_log_path, const PipelineConfig& cfg,
                            const fs::path& prompt_dataset_path = {}) {
    const ModelParams<float> base = load_checkpoint(checkpoint_in.string());
    const Vocab vocab = build_vocab(cfg.tokenizer);
    if (vocab.size() != base.config.vocab_size)
        throw std::runtime_error("checkpoint vocab size does not match tokenizer config");

    TokenDataset prompt_ds;
    const TokenDataset* prompt_ptr = nullptr;
    if (cfg.grpo.prompt_source == GrpoConfig::PromptSource::dataset) {
        prompt_ds = load_dataset(prompt_dataset_path);
        prompt_ptr = &prompt_ds;
    }

    std::ofstream log_file(iter_log_path, std::ios::app);
    if (!log_file) throw std::runtime_error("cannot open iteration log " + iter_log_path.string());

    TuneOutcome out;
    const ScoreFn scorer = make_score_fn(cfg.reward, cfg.remote);
    auto on_iter = [&](const IterationStats& st) {
        out.log.push_back(st);
        log_file << json(st).dump() << "\n";
        log_file.flush();
    };
    auto on_checkpoint = [&](int iter, const ModelParams<float>& params) {
        atomic_write(checkpoint_out, serialize_checkpoint(params));
        json resume{{"checkpoint", checkpoint_out.string()}, {"completed_iterations", iter + 1}};
        atomic_write_text(checkpoint_out.string() + ".resume.json", resume.dump(2) + "\n");
    };
    const TuneResult result = train(base, vocab, cfg.grpo, cfg.reward, cfg.renderer,
                                    cfg.sample_rate, scorer, prompt_ptr, on_iter, on_checkpoint);
    atomic_write(checkpoint_out, serialize_checkpoint(result.params));
    out.checkpoint = checkpoint_out;
    return out;
}

// Generates n completions from procedural (or dataset) prompts and writes one
// SMF per sample, named by the per-sample seed.
inline std::vector<fs::path> cmd_generate(const fs::path& checkpoint_path, int n,
                                          const fs::path& out_dir, const PipelineConfig& cfg,
                                          const fs::path& prompt_dataset_path = {}) {
    const ModelParams<float> params = load_checkpoint(checkpoint_path.string());
    const Vocab vocab = build_vocab(cfg.tokenizer);
    if (vocab.size() != params.config.vocab_size)
        throw std::runtime_error("checkpoint vocab size does not match tokenizer config");
    TokenDataset prompt_ds;
    if (cfg.grpo.prompt_source == GrpoConfig::PromptSource::dataset)
        prompt_ds = load_dataset(prompt_dataset_path);

    fs::create_directories(out_dir);
    std::vector<fs::path> written;
    for (int i = 0; i < n; ++i) {
        const uint64_t sample_seed = cfg.seed + static_cast<uint64_t>(i);
        Rng rng(seed_combine(sample_seed, 0x6702));
        const TokenSequence prompt = cfg.grpo.prompt_source == GrpoConfig::PromptSource::procedural
                                         ? procedural_prompt(rng, vocab)
                                         : dataset_prompt(prompt_ds, rng, cfg.grpo.dataset_prompt_len);
        const SampleResult sr =
            sample(params, prompt.ids, cfg.grpo.max_new_tokens, cfg.grpo.temperature, rng);
        const Score score = decode(TokenSequence{sr.ids}, vocab);
        char name[64];
        std::snprintf(name, sizeof(name), "gen_%08llu.mid",
                      static_cast<unsigned long long>(sample_seed));
        const fs::path path = out_dir / name;
        atomic_write(path, write_smf(score));
        written.push_back(path);
    }
    return written;
}

inline std::vector<fs::path> cmd_render(const fs::path& in, const fs::path& out_dir,
                                        const PipelineConfig& cfg) {
    std::vector<fs::path> inputs;
    if (fs::is_directory(in))
        inputs = list_midi_files(in);
    else
        inputs.push_back(in);
    fs::create_directories(out_dir);
    std::vector<fs::path> written;
    for (const auto& path : inputs) {
        const Score score = parse_smf(read_bytes(path));
        const AudioClip clip = render(score, cfg.renderer, cfg.sample_rate);
        const fs::path out = out_dir / (path.stem().string() + ".wav");
        atomic_write(out, write_wav(clip));
        written.push_back(out);
    }
    return written;
}

// Renders and scores a directory of SMF files. With several renderers the
// result is a per-renderer mean table; per-file scores are emitted for the
// first renderer.
inline json cmd_score(const fs::path& in_dir, const fs::path& out_dir, const PipelineConfig& cfg,
                      const std::vector<RendererChoice>& renderers) {
    if (renderers.empty()) throw std::invalid_argument("cmd_score needs at least one renderer");
    const auto files = list_midi_files(in_dir);
    if (files.empty()) throw std::runtime_error("no .mid files in " + in_dir.string());
    std::vector<Score> scores;
    scores.reserve(files.size());
    for (const auto& f : files) scores.push_back(parse_smf(read_bytes(f)));

    const ScoreFn score_fn = make_score_fn(cfg.reward, cfg.remote);
    fs::create_directories(out_dir);

    json per_file = json::array();
    for (size_t i = 0; i < files.size(); ++i) {
        const AudioClip clip = crop_audio(render(scores[i], renderers.front(), cfg.sample_rate),
                                          cfg.grpo.audio_crop_seconds);
        const AestheticScores s = score_fn(scores[i], clip);
        per_file.push_back({{"file", files[i].filename().string()},
                            {"scores", s},
                            {"reward", reward_of(s, cfg.reward)}});
    }
    atomic_write_text(out_dir / "scores.json", per_file.dump(2) + "\n");

    const RendererComparison cmp = compare_renderers(scores, renderers, cfg.sample_rate,
                                                     cfg.grpo.audio_crop_seconds, score_fn);
    json table = json::array();
    std::string csv = "renderer,CE,CU,PC,PQ,n_ok,n_failed\n";
    for (const auto& row : cmp.rows) {
        table.push_back({{"renderer", row.renderer},
                         {"mean", row.mean},
                         {"n_ok", row.n_ok},
                         {"n_failed", row.n_failed}});
        char line[256];
        std::snprintf(line, sizeof(line), "%s,%.4f,%.4f,%.4f,%.4f,%d,%d\n", row.renderer.c_str(),
                      row.mean.content_enjoyment, row.mean.content_usefulness,
                      row.mean.production_complexity, row.mean.production_quality, row.n_ok,
                      row.n_failed);
        csv += line;
    }
    atomic_write_text(out_dir / "renderer_comparison.json", table.dump(2) + "\n");
    atomic_write_text(out_dir / "renderer_comparison.csv", csv);
    return json{{"per_file", per_file}, {"renderers", table}};
}

namespace detail {

struct DirFeatures {
    std::vector<std::string> names;
    std::vector<FeatureReport> reports;
    std::vector<Score> scores;
};

inline DirFeatures analyze_dir(const fs::path& dir) {
    DirFeatures out;
    for (const auto& path : list_midi_files(dir)) {
        out.names.push_back(path.filename().string());
        out.scores.push_back(parse_smf(read_bytes(path)));
        out.reports.push_back(extract_features(out.scores.back()));
    }
    if (out.reports.empty()) throw std::runtime_error("no .mid files in " + dir.string());
    return out;
}

inline json mean_features(const std::vector<FeatureReport>& reports) {
    double n_notes = 0, poly = 0, empty = 0, prange = 0, scale = 0, vrange = 0;
    for (const auto& r : reports) {
        n_notes += static_cast<double>(r.n_notes);
        poly += r.polyphony_rate;
        empty += r.empty_beat_rate;
        prange += r.pitch_range;
        scale += r.scale_consistency;
        vrange += r.velocity_range;
    }
    const double n = static_cast<double>(reports.size());
    return json{{"mean_n_notes", n_notes / n},          {"mean_polyphony_rate", poly / n},
                {"mean_empty_beat_rate", empty / n},    {"mean_pitch_range", prange / n},
                {"mean_scale_consistency", scale / n},  {"mean_velocity_range", vrange / n},
                {"n_files", reports.size()}};
}

// Histogram CSV with both pooled counts and per-file means, labeled, since
// either convention is defensible for cross-corpus comparison plots.
template <size_t N>
std::string histogram_csv(const std::string& key,
                          const std::vector<FeatureReport>& a,
                          const std::vector<FeatureReport>* b,
                          std::array<int64_t, N> FeatureReport::*member) {
    std::string csv = key + ",pooled_a,per_file_mean_a";
    if (b) csv += ",pooled_b,per_file_mean_b";
    csv += "\n";
    for (size_t bin = 0; bin < N; ++bin) {
        int64_t pa = 0;
        for (const auto& r : a) pa += (r.*member)[bin];
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%zu,%lld,%.6f", bin, static_cast<long long>(pa),
                      static_cast<double>(pa) / static_cast<double>(a.size()));
        csv += buf;
        if (b) {
            int64_t pb = 0;
            for (const auto& r : *b) pb += (r.*member)[bin];
            std::snprintf(buf, sizeof(buf), ",%lld,%.6f", static_cast<long long>(pb),
                          static_cast<double>(pb) / static_cast<double>(b->size()));
            csv += buf;
        }
        csv += "\n";
    }
    return csv;
}

}  // namespace detail

// Feature reports plus plot-ready histogram CSVs for one directory or a
// base-vs-tuned pair.
inline json cmd_analyze(const fs::path& dir_a, const std::optional<fs::path>& dir_b,
                        const fs::path& out_dir) {
    const auto a = detail::analyze_dir(dir_a);
    std::optional<detail::DirFeatures> b;
    if (dir_b) b = detail::analyze_dir(*dir_b);
    fs::create_directories(out_dir);

    auto report_list = [](const detail::DirFeatures& d) {
        json arr = json::array();
        for (size_t i = 0; i < d.reports.size(); ++i)
            arr.push_back({{"file", d.names[i]}, {"features", d.reports[i]}});
        return arr;
    };
    atomic_write_text(out_dir / "features_a.json", report_list(a).dump(2) + "\n");
    if (b) atomic_write_text(out_dir / "features_b.json", report_list(*b).dump(2) + "\n");

    atomic_write_text(out_dir / "pitch_histogram.csv",
                      detail::histogram_csv("pitch", a.reports, b ? &b->reports : nullptr,
                                            &FeatureReport::pitch_histogram));
    atomic_write_text(out_dir / "velocity_histogram.csv",
                      detail::histogram_csv("velocity_bin", a.reports, b ? &b->reports : nullptr,
                                            &FeatureReport::velocity_histogram));

    json summary{{"dir_a", detail::mean_features(a.reports)}};
    if (b) summary["dir_b"] = detail::mean_features(b->reports);
    atomic_write_text(out_dir / "summary.json", summary.dump(2) + "\n");
    return summary;
}

// Diversity scalar plus the average piano roll as CSV.
inline json cmd_diversity(const fs::path& dir, const fs::path& out_dir, int beats = 16,
                          int steps_per_beat = 4) {
    const auto d = detail::analyze_dir(dir);
    if (d.scores.size() < 2) throw std::runtime_error("diversity needs at least two files");
    fs::create_directories(out_dir);
    const double div = diversity(d.scores, beats, steps_per_beat);
    const PianoRollSummary roll = average_piano_roll(d.scores, beats, steps_per_beat);

    std::string csv = "pitch";
    for (int c = 0; c < roll.cols; ++c) csv += ",c" + std::to_string(c);
    csv += "\n";
    for (int p = 0; p < 128; ++p) {
        csv += std::to_string(p);
        char buf[32];
        for (int c = 0; c < roll.cols; ++c) {
            std::snprintf(buf, sizeof(buf), ",%.6f", roll.at(p, c));
            csv += buf;
        }
        csv += "\n";
    }
    atomic_write_text(out_dir / "piano_roll.csv", csv);
    json out{{"diversity", div},
             {"n_files", d.scores.size()},
             {"beats", beats},
             {"steps_per_beat", steps_per_beat}};
    atomic_write_text(out_dir / "diversity.json", out.dump(2) + "\n");
    return out;
}

}  // namespace miditune
