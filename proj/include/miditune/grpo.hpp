#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "miditune/model.hpp"
#include "miditune/render.hpp"
#include "miditune/rng.hpp"
#include "miditune/scorer.hpp"
#include "miditune/tokenizer.hpp"

namespace miditune {

struct GrpoConfig {
    int prompts_per_iter = 8;
    int completions_per_prompt = 8;  // group size, >= 2
    double temperature = 1.0;
    double beta = 0.04;  // KL coefficient
    int iterations = 200;
    double lr_start = 1e-4;  // linear decay to 0 over `iterations`
    int max_new_tokens = 256;
    double audio_crop_seconds = 10.0;
    uint64_t seed = 7;
    enum class PromptSource { procedural, dataset };
    PromptSource prompt_source = PromptSource::procedural;
    int dataset_prompt_len = 16;
    double advantage_epsilon = 1e-4;
    double max_grad_norm = 1.0;  // global-norm gradient clip; 0 disables
    int checkpoint_interval = 0;  // 0 = only on completion / failure
    int max_parallel = 0;         // 0 = hardware concurrency

    void validate() const {
        if (completions_per_prompt < 2)
            throw std::invalid_argument("completions_per_prompt must be >= 2 for group statistics");
        if (prompts_per_iter < 1) throw std::invalid_argument("prompts_per_iter must be >= 1");
        if (beta < 0) throw std::invalid_argument("beta must be >= 0");
        if (iterations < 1) throw std::invalid_argument("iterations must be >= 1");
        if (max_new_tokens < 1) throw std::invalid_argument("max_new_tokens must be >= 1");
        if (audio_crop_seconds <= 0) throw std::invalid_argument("audio_crop_seconds must be > 0");
    }
};

// lr(iter) = lr_start * (1 - iter / iterations)
inline double lr_at(int iteration, const GrpoConfig& cfg) {
    if (iteration < 0 || iteration > cfg.iterations)
        throw std::invalid_argument("iteration out of schedule range");
    return cfg.lr_start * (1.0 - static_cast<double>(iteration) / cfg.iterations);
}

// [BOS, Bar, random TimeSig, random Tempo], uniform over the supported sets.
inline TokenSequence procedural_prompt(Rng& rng, const Vocab& vocab) {
    TokenSequence seq;
    seq.ids.push_back(vocab.bos_id);
    seq.ids.push_back(vocab.bar_id);
    seq.ids.push_back(vocab.time_sig_ids[static_cast<size_t>(
        rng.uniform_int(0, static_cast<int64_t>(vocab.time_sig_ids.size()) - 1))]);
    seq.ids.push_back(vocab.tempo_ids[static_cast<size_t>(
        rng.uniform_int(0, static_cast<int64_t>(vocab.tempo_ids.size()) - 1))]);
    return seq;
}

// Prefix of a uniformly chosen file's token stream (which starts on the
// BOS/Bar boundary by construction).
inline TokenSequence dataset_prompt(const TokenDataset& ds, Rng& rng, int prompt_len) {
    if (ds.records.empty()) throw std::invalid_argument("dataset_prompt: empty dataset");
    const auto& rec =
        ds.records[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(ds.records.size()) - 1))];
    TokenSequence seq;
    const size_t n = std::min(rec.ids.size(), static_cast<size_t>(std::max(1, prompt_len)));
    seq.ids.assign(rec.ids.begin(), rec.ids.begin() + static_cast<std::ptrdiff_t>(n));
    return seq;
}

// Group-normalized advantages: (r_i - mean) / (sample std + epsilon), all
// zeros when the group has no spread.
inline std::vector<double> compute_advantages(std::span<const double> rewards, double epsilon) {
    const size_t n = rewards.size();
    if (n < 2) throw std::invalid_argument("advantage groups need >= 2 rewards");
    double mean = 0;
    for (const double r : rewards) mean += r;
    mean /= static_cast<double>(n);
    double var = 0;
    for (const double r : rewards) var += (r - mean) * (r - mean);
    var /= static_cast<double>(n - 1);
    const double sd = std::sqrt(var);
    std::vector<double> adv(n, 0.0);
    if (sd > 0.0)
        for (size_t i = 0; i < n; ++i) adv[i] = (rewards[i] - mean) / (sd + epsilon);
    return adv;
}

// Nonnegative per-token KL estimator k(r) = exp(ref - pol) - (ref - pol) - 1.
inline double kl_per_token(double policy_logprob, double ref_logprob) {
    const double d = ref_logprob - policy_logprob;
    return std::exp(d) - d - 1.0;
}

// ---------------------------------------------------------------------------
// GRPO loss over a batch of rollouts:
//   L = -(1/N_tok) sum_i sum_t [ ratio_{i,t} * A_i - beta * k_{i,t} ]
// with ratio = exp(logp_theta - logp_old) (old treated as a constant) and
// N_tok the total completion-token count. Gradients flow through logp_theta.

template <typename Real>
struct GrpoSequence {
    std::vector<int32_t> ids;  // prompt followed by completion
    int prompt_len = 0;
    double advantage = 0.0;              // constant across the completion
    std::vector<Real> old_logp;          // one per completion token
    std::vector<Real> ref_logp;
};

template <typename Real>
struct GrpoLossResult {
    Real loss = 0;
    double mean_kl = 0.0;
};

template <typename Real>
GrpoLossResult<Real> grpo_loss_and_grads(const ModelParams<Real>& params,
                                         const std::vector<GrpoSequence<Real>>& batch, double beta,
                                         ModelParams<Real>& grads) {
    int64_t n_tok = 0;
    for (const auto& item : batch)
        n_tok += static_cast<int64_t>(item.ids.size()) - item.prompt_len;
    if (n_tok <= 0) throw std::invalid_argument("grpo batch has no completion tokens");
    const Real inv_n = Real(1) / static_cast<Real>(n_tok);
    const int V = params.config.vocab_size;

    GrpoLossResult<Real> res;
    for (const auto& item : batch) {
        TracedForward<Real> fwd(params, item.ids);
        const int T = static_cast<int>(item.ids.size());
        Mat<Real> dlogits(T, V);
        for (int pos = item.prompt_len; pos < T; ++pos) {
            const size_t j = static_cast<size_t>(pos - item.prompt_len);
            const int32_t tok = item.ids[static_cast<size_t>(pos)];
            const Real* row = fwd.trace.logits.row(pos - 1);
            const Real lse = logsumexp_row(row, V);
            const Real pol = row[tok] - lse;
            const Real ratio = std::exp(pol - item.old_logp[j]);
            const Real diff = item.ref_logp[j] - pol;
            const Real k = std::exp(diff) - diff - Real(1);
            res.loss -= (ratio * static_cast<Real>(item.advantage) - static_cast<Real>(beta) * k) * inv_n;
            res.mean_kl += static_cast<double>(k) * static_cast<double>(inv_n);
            const Real dpol = -(ratio * static_cast<Real>(item.advantage) -
                                static_cast<Real>(beta) * (Real(1) - std::exp(diff))) *
                              inv_n;
            Real* drow = dlogits.row(pos - 1);
            for (int v = 0; v < V; ++v) drow[v] -= dpol * std::exp(row[v] - lse);
            drow[tok] += dpol;
        }
        backward(params, fwd.trace, fwd.cache, dlogits, grads);
    }
    return res;
}

// Scales all gradients so their global L2 norm is at most max_norm; returns
// the pre-clip norm. max_norm <= 0 disables clipping.
template <typename Real>
double clip_grad_norm(ModelParams<Real>& grads, double max_norm) {
    double sq = 0.0;
    auto tensors = named_tensors(grads);
    for (auto& [name, g] : tensors)
        for (const Real v : g->a) sq += static_cast<double>(v) * static_cast<double>(v);
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const Real scale = static_cast<Real>(max_norm / norm);
        for (auto& [name, g] : tensors)
            for (Real& v : g->a) v *= scale;
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Tuning loop

struct Rollout {
    TokenSequence prompt;
    TokenSequence completion;
    std::vector<int32_t> full_ids;
    Score score;
    AudioClip audio;
    AestheticScores scores;
    double reward = 0.0;
    double advantage = 0.0;
    std::vector<float> old_logp;
    std::vector<float> ref_logp;
};

struct IterationStats {
    int iter = 0;
    double mean_reward = 0.0;
    double std_reward = 0.0;
    double mean_kl = 0.0;
    double loss = 0.0;
    double lr = 0.0;
    int64_t wall_ms = 0;
};

struct TuneResult {
    ModelParams<float> params;
    std::vector<IterationStats> log;
};

namespace detail {

// Indexed fan-out: each task owns its output slot, so results are identical
// regardless of scheduling. The first exception is preserved and rethrown.
inline void parallel_for(size_t n, int max_threads, const std::function<void(size_t)>& fn) {
    int threads = max_threads > 0 ? max_threads : static_cast<int>(std::thread::hardware_concurrency());
    threads = std::max(1, std::min<int>(threads, static_cast<int>(n)));
    if (threads == 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr first_error;
    auto worker = [&] {
        while (true) {
            const size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!first_error) first_error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

// One GRPO tuning run. Freezes a reference copy of `base`, then per
// iteration: draw prompts, sample completions_per_prompt completions each,
// decode, render, crop, score, compute group advantages, and apply a single
// Adam update at the scheduled learning rate. Deterministic for a fixed seed
// with the proxy scorer. A scorer or renderer failure aborts the run after
// handing the current weights to on_checkpoint, so it can be resumed.
inline TuneResult train(const ModelParams<float>& base, const Vocab& vocab, const GrpoConfig& cfg,
                        const RewardSpec& reward_spec, const RendererChoice& renderer,
                        int sample_rate, const ScoreFn& score_fn,
                        const TokenDataset* prompt_dataset = nullptr,
                        const std::function<void(const IterationStats&)>& on_iteration = {},
                        const std::function<void(int, const ModelParams<float>&)>& on_checkpoint = {}) {
    cfg.validate();
    if (cfg.prompt_source == GrpoConfig::PromptSource::dataset &&
        (prompt_dataset == nullptr || prompt_dataset->records.empty()))
        throw std::invalid_argument("dataset prompt source needs a non-empty dataset");

    TuneResult result;
    result.params = base;            // policy
    const ModelParams<float> ref = base;  // frozen reference
    Adam<float> adam(result.params);
    ModelParams<float> grads = make_params_shell<float>(base.config);

    const int G = cfg.prompts_per_iter;
    const int C = cfg.completions_per_prompt;
    const ScoreFn scorer = score_fn ? score_fn : ScoreFn(score_proxy);

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const auto t_start = std::chrono::steady_clock::now();
        try {
            std::vector<TokenSequence> prompts(static_cast<size_t>(G));
            for (int g = 0; g < G; ++g) {
                Rng prng(seed_combine(cfg.seed, 0x9a01, static_cast<uint64_t>(iter),
                                      static_cast<uint64_t>(g)));
                prompts[static_cast<size_t>(g)] =
                    cfg.prompt_source == GrpoConfig::PromptSource::procedural
                        ? procedural_prompt(prng, vocab)
                        : dataset_prompt(*prompt_dataset, prng, cfg.dataset_prompt_len);
            }

            std::vector<Rollout> rollouts(static_cast<size_t>(G) * C);
            const ModelParams<float>& policy = result.params;
            detail::parallel_for(rollouts.size(), cfg.max_parallel, [&](size_t idx) {
                const int g = static_cast<int>(idx) / C;
                const int c = static_cast<int>(idx) % C;
                Rollout& r = rollouts[idx];
                r.prompt = prompts[static_cast<size_t>(g)];
                Rng srng(seed_combine(cfg.seed, 0x9a02, static_cast<uint64_t>(iter),
                                      static_cast<uint64_t>(g), static_cast<uint64_t>(c)));
                SampleResult sr =
                    sample(policy, r.prompt.ids, cfg.max_new_tokens, cfg.temperature, srng);
                r.full_ids = std::move(sr.ids);
                r.old_logp = std::move(sr.logp);
                r.completion.ids.assign(r.full_ids.begin() + static_cast<std::ptrdiff_t>(r.prompt.size()),
                                        r.full_ids.end());
                r.score = decode(TokenSequence{r.full_ids}, vocab);
                r.audio = crop_audio(render(r.score, renderer, sample_rate), cfg.audio_crop_seconds);
                r.scores = scorer(r.score, r.audio);
                r.reward = reward_of(r.scores, reward_spec);
                if (!std::isfinite(r.reward)) throw std::runtime_error("scorer produced a non-finite reward");
                r.ref_logp = log_probs(ref, r.full_ids, static_cast<int>(r.prompt.size()));
            });

            for (int g = 0; g < G; ++g) {
                std::vector<double> rewards(static_cast<size_t>(C));
                for (int c = 0; c < C; ++c) rewards[static_cast<size_t>(c)] = rollouts[static_cast<size_t>(g) * C + c].reward;
                const auto adv = compute_advantages(rewards, cfg.advantage_epsilon);
                for (int c = 0; c < C; ++c) rollouts[static_cast<size_t>(g) * C + c].advantage = adv[static_cast<size_t>(c)];
            }

            std::vector<GrpoSequence<float>> batch;
            batch.reserve(rollouts.size());
            for (const auto& r : rollouts)
                batch.push_back({r.full_ids, static_cast<int>(r.prompt.size()), r.advantage,
                                 r.old_logp, r.ref_logp});
            for (auto& [name, g] : named_tensors(grads)) g->zero();
            const auto loss = grpo_loss_and_grads(result.params, batch, cfg.beta, grads);
            clip_grad_norm(grads, cfg.max_grad_norm);
            const double lr = lr_at(iter, cfg);
            adam.step(result.params, grads, lr);

            IterationStats st;
            st.iter = iter;
            double sum = 0, sumsq = 0;
            for (const auto& r : rollouts) {
                sum += r.reward;
                sumsq += r.reward * r.reward;
            }
            const double n = static_cast<double>(rollouts.size());
            st.mean_reward = sum / n;
            st.std_reward = std::sqrt(std::max(0.0, sumsq / n - st.mean_reward * st.mean_reward));
            st.mean_kl = loss.mean_kl;
            st.loss = static_cast<double>(loss.loss);
            st.lr = lr;
            st.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                             std::chrono::steady_clock::now() - t_start)
                             .count();
            result.log.push_back(st);
            if (on_iteration) on_iteration(st);
            if (on_checkpoint && cfg.checkpoint_interval > 0 &&
                (iter + 1) % cfg.checkpoint_interval == 0)
                on_checkpoint(iter, result.params);
        } catch (...) {
            if (on_checkpoint) on_checkpoint(iter - 1, result.params);
            throw;
        }
    }
    if (on_checkpoint) on_checkpoint(cfg.iterations - 1, result.params);
    return result;
}

}  // namespace miditune
