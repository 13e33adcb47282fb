// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. An optional argv[1] substring filters which criteria run.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "miditune/grpo.hpp"
#include "miditune/pipeline.hpp"
#include "miditune/pretrain.hpp"
#include "miditune/remote_scorer.hpp"
#include "mock_scorer_server.hpp"
#include "test_util.hpp"

using namespace miditune;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

struct Check {
    std::ostringstream detail;
    bool pass = true;

    void expect(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << (detail.str().empty() ? "" : "; ") << what;
        }
    }
};

double now_s() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Shared fixtures for the closed-loop criteria. Built lazily, reused across
// criteria so the two tuning runs both start from the same base checkpoint.

struct Fixtures {
    Vocab vocab = build_vocab();
    fs::path work;

    bool has_base = false;
    ModelParams<float> base{};
    double pretrain_seconds = 0;

    bool has_run_a = false;  // beta 0.04, 50 iterations
    TuneResult run_a{};
    double run_a_seconds = 0;

    bool has_run_b = false;  // beta 0, 150 iterations
    TuneResult run_b{};
    double run_b_seconds = 0;

    Fixtures() {
        work = fs::temp_directory_path() / ("miditune_acceptance_" + std::to_string(::getpid()));
        fs::remove_all(work);
        fs::create_directories(work);
    }
    ~Fixtures() {
        std::error_code ec;
        fs::remove_all(work, ec);
    }

    static GrpoConfig loop_config(double beta, int iterations) {
        GrpoConfig cfg;
        cfg.prompts_per_iter = 4;
        cfg.completions_per_prompt = 4;
        cfg.temperature = 1.0;
        cfg.beta = beta;
        cfg.iterations = iterations;
        cfg.lr_start = 1.5e-3;
        cfg.max_new_tokens = 188;
        cfg.audio_crop_seconds = 10.0;
        cfg.seed = 0x5EED5;
        cfg.advantage_epsilon = 1e-4;
        cfg.max_parallel = 1;
        return cfg;
    }

    const ModelParams<float>& base_model() {
        if (has_base) return base;
        const double t0 = now_s();
        // 220 synthetic piano MIDI files through the real ingestion pipeline
        const fs::path corpus = work / "corpus";
        fs::create_directories(corpus);
        Rng rng(0xACCE97);
        for (int i = 0; i < 240; ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "synth_%03d.mid", i);
            const auto bytes = write_smf(testutil::musical_score(rng, 8));
            std::ofstream(corpus / name, std::ios::binary)
                .write(reinterpret_cast<const char*>(bytes.data()),
                       static_cast<std::streamsize>(bytes.size()));
        }
        const fs::path dataset_path = work / "dataset.mtds";
        const IngestReport report = cmd_ingest(corpus, dataset_path, vocab.config);
        if (report.accepted < 200)
            throw std::runtime_error("fixture corpus lost files in ingestion");
        const TokenDataset ds = load_dataset(dataset_path);

        ModelConfig mcfg;
        mcfg.n_layers = 2;
        mcfg.d_model = 64;
        mcfg.n_heads = 4;
        mcfg.d_ff = 128;
        mcfg.vocab_size = vocab.size();
        mcfg.max_seq_len = 192;
        mcfg.seed = 41;
        PretrainConfig pcfg;
        pcfg.epochs = 3;
        pcfg.batch_size = 8;
        pcfg.crop_len = 128;
        pcfg.lr = 1.4e-3;
        pcfg.seed = 41;
        std::vector<EpochStats> stats;
        base = pretrain(ds, vocab, mcfg, pcfg, &stats);
        pretrain_seconds = now_s() - t0;
        std::cout << "  [fixture] pretrained base model on " << report.accepted << " files in "
                  << fmt(pretrain_seconds) << " s (train loss " << fmt(stats.front().train_loss)
                  << " -> " << fmt(stats.back().train_loss) << ")\n";
        has_base = true;
        return base;
    }

    static std::function<void(const IterationStats&)> verbose_logger() {
        if (!std::getenv("MIDITUNE_ACCEPT_VERBOSE")) return {};
        return [](const IterationStats& st) {
            std::printf("    iter %3d reward %.3f +- %.3f kl %.5f loss % .5f lr %.5f\n", st.iter,
                        st.mean_reward, st.std_reward, st.mean_kl, st.loss, st.lr);
        };
    }

    const TuneResult& tuned_a() {
        if (has_run_a) return run_a;
        const auto& b = base_model();
        const double t0 = now_s();
        run_a = train(b, vocab, loop_config(0.04, 50), RewardSpec{}, RendererChoice{}, 22050,
                      ScoreFn(score_proxy), nullptr, verbose_logger());
        run_a_seconds = now_s() - t0;
        std::cout << "  [fixture] run (a): beta 0.04, 50 iterations in " << fmt(run_a_seconds)
                  << " s (mean reward " << fmt(run_a.log.front().mean_reward) << " -> "
                  << fmt(run_a.log.back().mean_reward) << ")\n";
        has_run_a = true;
        return run_a;
    }

    const TuneResult& tuned_b() {
        if (has_run_b) return run_b;
        const auto& b = base_model();
        const double t0 = now_s();
        run_b = train(b, vocab, loop_config(0.0, 150), RewardSpec{}, RendererChoice{}, 22050,
                      ScoreFn(score_proxy), nullptr, verbose_logger());
        run_b_seconds = now_s() - t0;
        std::cout << "  [fixture] run (b): beta 0, 150 iterations in " << fmt(run_b_seconds)
                  << " s (mean reward " << fmt(run_b.log.front().mean_reward) << " -> "
                  << fmt(run_b.log.back().mean_reward) << ")\n";
        has_run_b = true;
        return run_b;
    }

    std::vector<Score> generate(const ModelParams<float>& params, int n, uint64_t seed_base) {
        std::vector<Score> out;
        out.reserve(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            Rng rng(seed_combine(seed_base, static_cast<uint64_t>(i)));
            const TokenSequence prompt = procedural_prompt(rng, vocab);
            const SampleResult sr = sample(params, prompt.ids, 188, 1.0, rng);
            out.push_back(decode(TokenSequence{sr.ids}, vocab));
        }
        return out;
    }

    double mean_proxy_ce(const std::vector<Score>& scores) {
        double sum = 0;
        for (const auto& s : scores) {
            const AudioClip clip = crop_audio(render_builtin(s, 22050), 10.0);
            sum += score_proxy(s, clip).content_enjoyment;
        }
        return sum / static_cast<double>(scores.size());
    }
};

Fixtures fixtures;

// ---------------------------------------------------------------------------

Outcome grpo_math_properties() {
    Check c;
    const double t0 = now_s();
    Rng rng(0xACC1);
    double worst_mean = 0, lo_sd = 1e9, hi_sd = -1e9;
    for (int g = 0; g < 1000; ++g) {
        std::vector<double> rewards(8);
        for (auto& r : rewards) r = rng.uniform_real(0.0, 10.0);
        const auto adv = compute_advantages(rewards, 1e-4);
        double mean = 0;
        for (const double a : adv) mean += a;
        mean /= 8.0;
        worst_mean = std::max(worst_mean, std::abs(mean));
        double var = 0;
        for (const double a : adv) var += (a - mean) * (a - mean);
        const double sd = std::sqrt(var / 7.0);
        lo_sd = std::min(lo_sd, sd);
        hi_sd = std::max(hi_sd, sd);
    }
    c.expect(worst_mean < 1e-6, "advantage mean " + fmt(worst_mean) + " >= 1e-6");
    c.expect(lo_sd >= 0.999 && hi_sd <= 1.0,
             "advantage std range [" + fmt(lo_sd) + ", " + fmt(hi_sd) + "] outside [0.999, 1]");
    const auto zeros = compute_advantages(std::vector<double>{4.2, 4.2, 4.2, 4.2, 4.2, 4.2, 4.2, 4.2},
                                          1e-4);
    for (const double a : zeros) c.expect(a == 0.0, "zero-spread advantage not exactly 0");
    const double elapsed = now_s() - t0;
    c.expect(elapsed < 1.0, "runtime " + fmt(elapsed) + " s >= 1 s");
    c.detail << (c.detail.str().empty()
                     ? "1000 groups, |mean| <= " + fmt(worst_mean) + ", std in [" + fmt(lo_sd) +
                           ", " + fmt(hi_sd) + "], " + fmt(elapsed) + " s"
                     : "");
    return {c.pass, c.detail.str()};
}

Outcome gradient_correctness() {
    Check c;
    const double t0 = now_s();
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 4;
    cfg.d_ff = 32;
    cfg.vocab_size = 24;
    cfg.max_seq_len = 16;
    cfg.seed = 0xACC2;

    // cross-entropy loss
    auto params = init_params<double>(cfg);
    Rng rng(0xACC2b);
    std::vector<std::vector<int32_t>> batch;
    for (int k = 0; k < 2; ++k) {
        std::vector<int32_t> ids;
        for (int i = 0; i < 8; ++i)
            ids.push_back(static_cast<int32_t>(rng.uniform_int(0, cfg.vocab_size - 1)));
        batch.push_back(std::move(ids));
    }
    ModelParams<double> grads = make_params_shell<double>(cfg);
    ce_loss_and_grads(params, batch, 0, grads);
    const double h = 1e-5;
    double worst_ce = 0;
    {
        auto pt = named_tensors(params);
        auto gt = named_tensors(grads);
        for (size_t i = 0; i < pt.size(); ++i)
            for (size_t k = 0; k < pt[i].second->a.size(); ++k) {
                double& w = pt[i].second->a[k];
                const double orig = w;
                w = orig + h;
                const double up = ce_loss(params, batch, 0);
                w = orig - h;
                const double down = ce_loss(params, batch, 0);
                w = orig;
                const double fd = (up - down) / (2 * h);
                const double an = gt[i].second->a[k];
                worst_ce = std::max(worst_ce,
                                    std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
            }
    }
    c.expect(worst_ce < 1e-3, "cross-entropy rel err " + fmt(worst_ce));

    // GRPO loss, distinct policy / reference / old parameters
    ModelConfig cfg_ref = cfg;
    cfg_ref.seed = 0xACC2c;
    ModelConfig cfg_old = cfg;
    cfg_old.seed = 0xACC2d;
    auto policy = init_params<double>(cfg);
    const auto ref = init_params<double>(cfg_ref);
    const auto old = init_params<double>(cfg_old);
    std::vector<GrpoSequence<double>> gbatch;
    for (const double adv : {1.0, -0.5, 0.25}) {
        GrpoSequence<double> item;
        for (int i = 0; i < 9; ++i)
            item.ids.push_back(static_cast<int32_t>(rng.uniform_int(0, cfg.vocab_size - 1)));
        item.prompt_len = 3;
        item.advantage = adv;
        item.old_logp = log_probs(old, item.ids, 3);
        item.ref_logp = log_probs(ref, item.ids, 3);
        gbatch.push_back(std::move(item));
    }
    ModelParams<double> ggrads = make_params_shell<double>(cfg);
    grpo_loss_and_grads(policy, gbatch, 0.04, ggrads);
    ModelParams<double> scratch = make_params_shell<double>(cfg);
    auto loss_only = [&]() {
        for (auto& [name, g] : named_tensors(scratch)) g->zero();
        return grpo_loss_and_grads(policy, gbatch, 0.04, scratch).loss;
    };
    double worst_grpo = 0;
    {
        auto pt = named_tensors(policy);
        auto gt = named_tensors(ggrads);
        for (size_t i = 0; i < pt.size(); ++i)
            for (size_t k = 0; k < pt[i].second->a.size(); ++k) {
                double& w = pt[i].second->a[k];
                const double orig = w;
                w = orig + h;
                const double up = loss_only();
                w = orig - h;
                const double down = loss_only();
                w = orig;
                const double fd = (up - down) / (2 * h);
                const double an = gt[i].second->a[k];
                worst_grpo = std::max(
                    worst_grpo, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
            }
    }
    c.expect(worst_grpo < 1e-3, "GRPO rel err " + fmt(worst_grpo));
    const double elapsed = now_s() - t0;
    c.expect(elapsed < 120.0, "runtime " + fmt(elapsed) + " s >= 2 min");
    if (c.pass)
        c.detail << "CE rel err " << fmt(worst_ce) << ", GRPO rel err " << fmt(worst_grpo) << ", "
                 << fmt(elapsed) << " s";
    return {c.pass, c.detail.str()};
}

Outcome kl_estimator() {
    Check c;
    Rng rng(0xACC3);
    double min_k = 1e300;
    for (int i = 0; i < 100000; ++i) {
        const double pol = rng.uniform_real(-12.0, 0.0);
        const double ref = rng.uniform_real(-12.0, 0.0);
        min_k = std::min(min_k, kl_per_token(pol, ref));
    }
    c.expect(min_k >= 0.0, "negative estimate " + fmt(min_k));
    for (int i = 0; i < 1000; ++i) {
        const double v = rng.uniform_real(-12.0, 0.0);
        c.expect(kl_per_token(v, v) == 0.0, "nonzero at equality");
    }

    // anchor: beta 10 with a constant reward keeps per-token KL tiny
    ModelConfig mcfg;
    mcfg.n_layers = 1;
    mcfg.d_model = 16;
    mcfg.n_heads = 2;
    mcfg.d_ff = 32;
    mcfg.vocab_size = fixtures.vocab.size();
    mcfg.max_seq_len = 32;
    mcfg.seed = 5;
    const auto params = init_params<float>(mcfg);
    GrpoConfig cfg;
    cfg.prompts_per_iter = 2;
    cfg.completions_per_prompt = 2;
    cfg.beta = 10.0;
    cfg.iterations = 20;
    cfg.max_new_tokens = 16;
    cfg.lr_start = 1e-3;
    cfg.seed = 0xACC3;
    cfg.max_parallel = 1;
    const ScoreFn constant = [](const Score&, const AudioClip&) {
        return AestheticScores{5.0, 5.0, 5.0, 5.0};
    };
    const TuneResult res =
        train(params, fixtures.vocab, cfg, RewardSpec{}, RendererChoice{}, 22050, constant);
    double max_kl = 0;
    for (const auto& st : res.log) max_kl = std::max(max_kl, st.mean_kl);
    c.expect(res.log.size() == 20, "anchor run incomplete");
    c.expect(max_kl < 0.01, "mean per-token KL " + fmt(max_kl) + " >= 0.01");
    if (c.pass)
        c.detail << "1e5 pairs nonnegative, exact zero at equality, anchor max KL " << fmt(max_kl);
    return {c.pass, c.detail.str()};
}

Outcome closed_loop_reward_ascent() {
    Check c;
    const double t0 = now_s();
    const TuneResult& run = fixtures.tuned_a();
    double first10 = 0, last10 = 0;
    for (int i = 0; i < 10; ++i) {
        first10 += run.log[static_cast<size_t>(i)].mean_reward / 10.0;
        last10 += run.log[run.log.size() - 10 + static_cast<size_t>(i)].mean_reward / 10.0;
    }
    const double gain = last10 - first10;
    c.expect(run.log.size() == 50, "expected 50 iterations");
    c.expect(gain >= 0.5, "reward gain " + fmt(gain) + " < 0.5");
    const double elapsed = fixtures.pretrain_seconds + fixtures.run_a_seconds + (now_s() - t0);
    c.expect(elapsed < 1800.0, "runtime " + fmt(elapsed) + " s >= 30 min");
    if (c.pass)
        c.detail << "first-10 mean " << fmt(first10) << ", last-10 mean " << fmt(last10) << " (gain "
                 << fmt(gain) << "), " << fmt(elapsed) << " s total";
    return {c.pass, c.detail.str()};
}

Outcome over_optimization_diversity() {
    Check c;
    const double t0 = now_s();
    const TuneResult& a = fixtures.tuned_a();
    const TuneResult& b = fixtures.tuned_b();

    const auto samples_a = fixtures.generate(a.params, 100, 0xD1A);
    const auto samples_b = fixtures.generate(b.params, 100, 0xD1B);
    const double div_a = diversity(samples_a, 16, 4);
    const double div_b = diversity(samples_b, 16, 4);
    const double reward_a = fixtures.mean_proxy_ce(samples_a);
    const double reward_b = fixtures.mean_proxy_ce(samples_b);

    c.expect(div_b < div_a, "diversity (b) " + fmt(div_b) + " not strictly below (a) " + fmt(div_a));
    c.expect(reward_b >= reward_a,
             "reward (b) " + fmt(reward_b) + " below (a) " + fmt(reward_a));
    const double elapsed = fixtures.run_a_seconds + fixtures.run_b_seconds + (now_s() - t0);
    c.expect(elapsed < 5400.0, "runtime " + fmt(elapsed) + " s >= 90 min");
    if (c.pass)
        c.detail << "diversity a " << fmt(div_a) << " vs b " << fmt(div_b) << "; reward a "
                 << fmt(reward_a) << " vs b " << fmt(reward_b) << ", " << fmt(elapsed) << " s total";
    return {c.pass, c.detail.str()};
}

Outcome feature_shift_direction() {
    Check c;
    const auto& base = fixtures.base_model();
    const auto& tuned = fixtures.tuned_a();
    const auto base_gens = fixtures.generate(base, 100, 0xF5A);
    const auto tuned_gens = fixtures.generate(tuned.params, 100, 0xF5B);

    auto means = [](const std::vector<Score>& scores) {
        double n = 0, empty = 0, poly = 0;
        for (const auto& s : scores) {
            const FeatureReport f = extract_features(s);
            n += static_cast<double>(f.n_notes);
            empty += f.empty_beat_rate;
            poly += f.polyphony_rate;
        }
        const double k = static_cast<double>(scores.size());
        return std::array<double, 3>{n / k, empty / k, poly / k};
    };
    const auto mb = means(base_gens);
    const auto mt = means(tuned_gens);
    c.expect(mt[0] > mb[0], "n_notes did not increase (" + fmt(mb[0]) + " -> " + fmt(mt[0]) + ")");
    c.expect(mt[1] < mb[1],
             "empty_beat_rate did not decrease (" + fmt(mb[1]) + " -> " + fmt(mt[1]) + ")");
    c.expect(mt[2] > mb[2],
             "polyphony_rate did not increase (" + fmt(mb[2]) + " -> " + fmt(mt[2]) + ")");
    if (c.pass)
        c.detail << "n_notes " << fmt(mb[0]) << " -> " << fmt(mt[0]) << ", empty_beat "
                 << fmt(mb[1]) << " -> " << fmt(mt[1]) << ", polyphony " << fmt(mb[2]) << " -> "
                 << fmt(mt[2]);
    return {c.pass, c.detail.str()};
}

Outcome tokenizer_round_trip() {
    Check c;
    const Vocab& v = fixtures.vocab;
    Rng rng(0xACC7);
    const auto bins = v.config.duration_bins();
    for (int trial = 0; trial < 500 && c.pass; ++trial) {
        testutil::RandomScoreOpts opts;
        opts.tokenizer_safe = true;
        opts.single_meter = true;
        opts.max_notes = 40;
        const Score s = testutil::random_score(rng, opts);
        const Score back = decode(encode(s, v), v);
        c.expect(back.notes.size() == s.notes.size(), "note count changed at trial " +
                                                          std::to_string(trial));
        if (!c.pass) break;
        // sorted multiset comparison against per-note quantization bounds
        std::vector<Note> orig = s.notes;
        for (size_t i = 0; i < orig.size(); ++i) {
            const double beats_orig =
                static_cast<double>(orig[i].onset) / s.ticks_per_quarter;
            // match by quantized onset step and pitch
            const int64_t step = std::llround(beats_orig * 8.0);
            bool found = false;
            for (const auto& bn : back.notes) {
                if (bn.onset != step * 60 || bn.pitch != std::clamp(orig[i].pitch, 21, 108)) continue;
                const double beats_back = static_cast<double>(bn.onset) / 480.0;
                if (std::abs(beats_orig - beats_back) > 1.0 / 16.0 + 1e-9) continue;
                if (std::abs(orig[i].velocity - bn.velocity) > 127.0 / 20.0 / 2.0 + 0.5) continue;
                const int dsteps = std::max(
                    1, static_cast<int>(std::llround(static_cast<double>(orig[i].duration) * 8.0 /
                                                     s.ticks_per_quarter)));
                int best = bins[0];
                for (const int bsteps : bins)
                    if (std::abs(bsteps - dsteps) < std::abs(best - dsteps)) best = bsteps;
                if (bn.duration != static_cast<int64_t>(best) * 60) continue;
                found = true;
                break;
            }
            c.expect(found, "no quantization-bounded match for a note at trial " +
                                std::to_string(trial));
            if (!c.pass) break;
        }
    }

    Rng fuzz(0xACC7F);
    int violations = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        TokenSequence seq;
        const int len = static_cast<int>(fuzz.uniform_int(0, 400));
        for (int i = 0; i < len; ++i)
            seq.ids.push_back(static_cast<int32_t>(fuzz.uniform_int(0, v.size() - 1)));
        const Score s = decode(seq, v);
        for (size_t i = 0; i < s.notes.size(); ++i) {
            const auto& n = s.notes[i];
            if (n.pitch < 0 || n.pitch > 127 || n.velocity < 1 || n.velocity > 127 ||
                n.duration < 1 || n.onset < 0)
                ++violations;
            if (i > 0 && note_less(n, s.notes[i - 1])) ++violations;
        }
        if (s.tempos.empty() || s.tempos[0].tick != 0) ++violations;
        if (s.time_signatures.empty() || s.time_signatures[0].tick != 0) ++violations;
    }
    c.expect(violations == 0, std::to_string(violations) + " fuzz invariant violations");
    if (c.pass) c.detail << "500 round-trips within bounds, 1000 fuzz decodes clean";
    return {c.pass, c.detail.str()};
}

Outcome feature_oracle_equivalence() {
    Check c;
    Rng rng(0xACC8);
    for (int i = 0; i < 50; ++i) {
        testutil::RandomScoreOpts opts;
        opts.max_bars = 6;
        opts.max_notes = 50;
        const Score s = testutil::random_score(rng, opts);
        const FeatureReport got = extract_features(s);
        const testutil::FeatureOracle want = testutil::brute_force_features(s);
        c.expect(got.n_notes == want.n_notes, "n_notes mismatch");
        c.expect(got.polyphony_rate == want.polyphony_rate, "polyphony mismatch");
        c.expect(got.empty_beat_rate == want.empty_beat_rate, "empty-beat mismatch");
        c.expect(got.pitch_histogram == want.pitch_histogram, "pitch histogram mismatch");
        c.expect(got.pitch_range == want.pitch_range, "pitch range mismatch");
        c.expect(got.scale_consistency == want.scale_consistency, "scale mismatch");
        c.expect(got.velocity_histogram == want.velocity_histogram, "velocity histogram mismatch");
        c.expect(got.velocity_range == want.velocity_range, "velocity range mismatch");
        if (!c.pass) break;
    }
    Score chroma;
    chroma.ticks_per_quarter = 480;
    for (int pc = 0; pc < 12; ++pc) chroma.notes.push_back({60 + pc, 64, pc * 480L, 240});
    chroma.normalize();
    const double sc = scale_consistency(chroma);
    c.expect(sc == 7.0 / 12.0, "chromatic scale consistency " + fmt(sc) + " != 7/12");
    if (c.pass) c.detail << "50 scores exact on all eight features, chromatic = 7/12";
    return {c.pass, c.detail.str()};
}

Outcome schedule_and_config_echoes() {
    Check c;
    GrpoConfig cfg;
    cfg.lr_start = 1e-4;
    cfg.iterations = 200;
    c.expect(lr_at(0, cfg) == 1e-4, "lr(0) != 1e-4");
    c.expect(lr_at(200, cfg) == 0.0, "lr(200) != 0");
    c.expect(std::abs(lr_at(100, cfg) - 5e-5) < 1e-20, "lr(100) != 5e-5");

    ModelConfig mcfg;
    mcfg.n_layers = 1;
    mcfg.d_model = 16;
    mcfg.n_heads = 2;
    mcfg.d_ff = 32;
    mcfg.vocab_size = fixtures.vocab.size();
    mcfg.max_seq_len = 24;
    mcfg.seed = 9;
    const auto params = init_params<float>(mcfg);
    GrpoConfig loop;
    loop.prompts_per_iter = 8;
    loop.completions_per_prompt = 8;
    loop.iterations = 1;
    loop.max_new_tokens = 8;
    loop.seed = 0xACC9;
    loop.max_parallel = 1;
    std::atomic<int> rollouts{0};
    const ScoreFn counting = [&rollouts](const Score& s, const AudioClip& clip) {
        ++rollouts;
        return score_proxy(s, clip);
    };
    train(params, fixtures.vocab, loop, RewardSpec{}, RendererChoice{}, 22050, counting);
    c.expect(rollouts.load() == 64,
             "8x8 config produced " + std::to_string(rollouts.load()) + " rollouts");
    if (c.pass) c.detail << "lr schedule endpoints exact, 8x8 -> 64 rollouts per iteration";
    return {c.pass, c.detail.str()};
}

Outcome remote_scorer_protocol() {
    Check c;
    AudioClip clip;
    clip.sample_rate = 8000;
    for (int i = 0; i < 1600; ++i)
        clip.samples.push_back(0.25f * static_cast<float>(std::sin(0.05 * i)));

    {
        testutil::MockScorerServer server;
        RemoteScorerConfig cfg;
        cfg.base_url = server.url();
        const AestheticScores s = score_remote(clip, cfg);
        c.expect(std::abs(s.content_enjoyment - 7.48) < 1e-9, "CE parse mismatch");
        c.expect(std::abs(s.content_usefulness - 7.76) < 1e-9, "CU parse mismatch");
        c.expect(std::abs(s.production_complexity - 3.94) < 1e-9, "PC parse mismatch");
        c.expect(std::abs(s.production_quality - 7.70) < 1e-9, "PQ parse mismatch");
    }
    {
        testutil::MockScorerServer server(testutil::MockScorerServer::Mode::ok, 2);
        RemoteScorerConfig cfg;
        cfg.base_url = server.url();
        cfg.max_retries = 2;
        int attempts = 0;
        score_remote(clip, cfg, &attempts);
        c.expect(attempts == 3, "retry count " + std::to_string(attempts) + " != 3");
        c.expect(server.requests() == 3, "server saw " + std::to_string(server.requests()));
    }
    {
        testutil::MockScorerServer server(testutil::MockScorerServer::Mode::missing_field);
        RemoteScorerConfig cfg;
        cfg.base_url = server.url();
        bool typed = false;
        try {
            score_remote(clip, cfg);
        } catch (const ScoringError& e) {
            typed = e.kind == ScoringError::Kind::missing_field;
        }
        c.expect(typed, "missing field not reported as typed error");
    }
    {
        testutil::MockScorerServer server(testutil::MockScorerServer::Mode::bad_json);
        RemoteScorerConfig cfg;
        cfg.base_url = server.url();
        bool typed = false;
        try {
            score_remote(clip, cfg);
        } catch (const ScoringError& e) {
            typed = e.kind == ScoringError::Kind::malformed_response;
        }
        c.expect(typed, "malformed JSON not reported as typed error");
    }
    {
        testutil::MockScorerServer server(testutil::MockScorerServer::Mode::ok, 0, 2500);
        RemoteScorerConfig cfg;
        cfg.base_url = server.url();
        cfg.timeout_ms = 500;
        cfg.max_retries = 0;
        const double t0 = now_s();
        bool threw = false;
        try {
            score_remote(clip, cfg);
        } catch (const ScoringError&) {
            threw = true;
        }
        const double ms = (now_s() - t0) * 1000.0;
        c.expect(threw, "timeout did not raise");
        c.expect(ms >= 0.8 * 500 && ms <= 1.2 * 500 + 50,
                 "timeout elapsed " + fmt(ms) + " ms outside 500 ms +/- 20%");
    }
    if (c.pass) c.detail << "parse, retries, typed errors, timeout within 20%";
    return {c.pass, c.detail.str()};
}

}  // namespace

int main(int argc, char** argv) {
    const std::string filter = argc > 1 ? argv[1] : "";
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"grpo-advantage-normalization", grpo_math_properties},
        {"gradient-correctness", gradient_correctness},
        {"kl-estimator", kl_estimator},
        {"tokenizer-round-trip", tokenizer_round_trip},
        {"feature-oracle-equivalence", feature_oracle_equivalence},
        {"schedule-and-config-echoes", schedule_and_config_echoes},
        {"remote-scorer-protocol", remote_scorer_protocol},
        {"closed-loop-reward-ascent", closed_loop_reward_ascent},
        {"over-optimization-diversity", over_optimization_diversity},
        {"feature-shift-direction", feature_shift_direction},
    };

    int failures = 0;
    int ran = 0;
    for (const auto& [name, fn] : criteria) {
        if (!filter.empty() && name.find(filter) == std::string::npos) continue;
        ++ran;
        const double t0 = now_s();
        Outcome out;
        try {
            out = fn();
        } catch (const std::exception& e) {
            out.pass = false;
            out.detail = std::string("exception: ") + e.what();
        }
        const double dt = now_s() - t0;
        std::cout << (out.pass ? "[PASS] " : "[FAIL] ") << name << ": " << out.detail << " ("
                  << fmt(dt) << " s)" << std::endl;
        if (!out.pass) ++failures;
    }
    if (ran == 0) {
        std::cerr << "no criteria matched filter '" << filter << "'\n";
        return 2;
    }
    std::cout << (failures == 0 ? "ALL CRITERIA PASSED" : std::to_string(failures) + " CRITERIA FAILED")
              << std::endl;
    return failures == 0 ? 0 : 1;
}
