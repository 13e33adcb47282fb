// miditune: corpus ingestion, pretraining, GRPO reward tuning, generation,
// rendering, scoring, and analysis for a piano MIDI language model.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "miditune/pipeline.hpp"

using namespace miditune;

namespace {

// Splits "name:command:soundfont" into an external renderer choice.
RendererChoice parse_external_renderer(const std::string& spec) {
    const auto p1 = spec.find(':');
    const auto p2 = spec.find(':', p1 == std::string::npos ? p1 : p1 + 1);
    if (p1 == std::string::npos || p2 == std::string::npos)
        throw std::runtime_error("external renderer spec must be name:command:soundfont, got " + spec);
    RendererChoice r;
    r.kind = RendererChoice::Kind::external;
    r.name = spec.substr(0, p1);
    r.command = spec.substr(p1 + 1, p2 - p1 - 1);
    r.soundfont = spec.substr(p2 + 1);
    return r;
}

std::optional<std::string> prescan_config_path(int argc, char** argv) {
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--config" && i + 1 < argc) return std::string(argv[i + 1]);
        if (a.rfind("--config=", 0) == 0) return a.substr(9);
    }
    return std::nullopt;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"symbolic music reward-tuning toolkit"};
    app.require_subcommand(1);

    // precedence: built-in defaults < config file < environment < CLI flags
    PipelineConfig cfg;
    std::string config_path_used;
    try {
        if (const auto path = prescan_config_path(argc, argv)) {
            cfg = json::parse(read_bytes(*path)).get<PipelineConfig>();
            config_path_used = *path;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: cannot load config file: " << e.what() << "\n";
        return 1;
    }
    if (const char* url = std::getenv("MIDITUNE_SCORER_URL")) cfg.remote.base_url = url;

    std::string config_path_flag;
    std::string corpus_dir, dataset = "dataset.mtds", checkpoint, checkpoint_out, in_path;
    std::string out_dir = "out", dir_a, dir_b, iter_log, prompt_dataset, prompt_source;
    std::string reward_axis, scorer_kind, renderer_kind;
    std::vector<std::string> external_renderers;
    int n_generate = 16;
    int beats = 16, steps_per_beat = 4;

    auto add_common = [&](CLI::App* c) {
        c->add_option("--config", config_path_flag, "JSON config file (applied before flags)");
        c->add_option("--seed", cfg.seed, "global seed, propagated to every stochastic component");
        c->add_option("--sample-rate", cfg.sample_rate, "audio sample rate in Hz");
    };
    auto add_model = [&](CLI::App* c) {
        c->add_option("--n-layers", cfg.model.n_layers);
        c->add_option("--d-model", cfg.model.d_model);
        c->add_option("--n-heads", cfg.model.n_heads);
        c->add_option("--d-ff", cfg.model.d_ff);
        c->add_option("--max-seq-len", cfg.model.max_seq_len);
    };
    auto add_reward = [&](CLI::App* c) {
        c->add_option("--reward-axis", reward_axis, "content_enjoyment|content_usefulness|production_complexity|production_quality");
        c->add_option("--scorer", scorer_kind, "proxy|remote");
        c->add_option("--scorer-url", cfg.remote.base_url);
        c->add_option("--scorer-timeout-ms", cfg.remote.timeout_ms);
        c->add_option("--scorer-max-retries", cfg.remote.max_retries);
        c->add_option("--scorer-max-in-flight", cfg.remote.max_in_flight);
        c->add_option("--scorer-bearer-token", cfg.remote.bearer_token);
    };
    auto add_renderer = [&](CLI::App* c) {
        c->add_option("--renderer", renderer_kind, "builtin|external");
        c->add_option("--renderer-cmd", cfg.renderer.command,
                      "external renderer, invoked as: cmd <midi> <soundfont> <wav>");
        c->add_option("--soundfont", cfg.renderer.soundfont);
    };
    auto add_grpo = [&](CLI::App* c) {
        c->add_option("--prompts-per-iter", cfg.grpo.prompts_per_iter);
        c->add_option("--completions-per-prompt", cfg.grpo.completions_per_prompt);
        c->add_option("--temperature", cfg.grpo.temperature);
        c->add_option("--beta", cfg.grpo.beta, "KL regularization coefficient");
        c->add_option("--iterations", cfg.grpo.iterations);
        c->add_option("--lr-start", cfg.grpo.lr_start, "linear schedule start, decays to 0");
        c->add_option("--max-new-tokens", cfg.grpo.max_new_tokens);
        c->add_option("--audio-crop-seconds", cfg.grpo.audio_crop_seconds);
        c->add_option("--prompt-source", prompt_source, "procedural|dataset");
        c->add_option("--dataset-prompt-len", cfg.grpo.dataset_prompt_len);
        c->add_option("--advantage-epsilon", cfg.grpo.advantage_epsilon);
        c->add_option("--max-grad-norm", cfg.grpo.max_grad_norm);
        c->add_option("--checkpoint-interval", cfg.grpo.checkpoint_interval);
        c->add_option("--max-parallel", cfg.grpo.max_parallel);
    };

    CLI::App* c_ingest = app.add_subcommand("ingest", "filter a MIDI corpus and build the token dataset");
    c_ingest->add_option("--corpus-dir", corpus_dir, "directory of .mid files")->required();
    c_ingest->add_option("--dataset", dataset, "output dataset path");
    add_common(c_ingest);

    CLI::App* c_pretrain = app.add_subcommand("pretrain", "cross-entropy pretraining on the dataset");
    c_pretrain->add_option("--dataset", dataset)->required();
    c_pretrain->add_option("--checkpoint-out", checkpoint_out)->required();
    c_pretrain->add_option("--epochs", cfg.pretrain.epochs);
    c_pretrain->add_option("--batch-size", cfg.pretrain.batch_size);
    c_pretrain->add_option("--crop-len", cfg.pretrain.crop_len);
    c_pretrain->add_option("--lr", cfg.pretrain.lr);
    add_common(c_pretrain);
    add_model(c_pretrain);

    CLI::App* c_tune = app.add_subcommand("tune", "GRPO finetuning against the aesthetic reward");
    c_tune->add_option("--checkpoint", checkpoint)->required();
    c_tune->add_option("--checkpoint-out", checkpoint_out)->required();
    c_tune->add_option("--iter-log", iter_log, "JSONL iteration log path");
    c_tune->add_option("--prompt-dataset", prompt_dataset, "dataset for --prompt-source dataset");
    add_common(c_tune);
    add_grpo(c_tune);
    add_reward(c_tune);
    add_renderer(c_tune);

    CLI::App* c_generate = app.add_subcommand("generate", "sample MIDI files from a checkpoint");
    c_generate->add_option("--checkpoint", checkpoint)->required();
    c_generate->add_option("--n", n_generate, "number of files");
    c_generate->add_option("--out-dir", out_dir);
    c_generate->add_option("--prompt-dataset", prompt_dataset);
    add_common(c_generate);
    add_grpo(c_generate);

    CLI::App* c_render = app.add_subcommand("render", "render .mid files to .wav");
    c_render->add_option("--in", in_path, ".mid file or directory")->required();
    c_render->add_option("--out-dir", out_dir);
    add_common(c_render);
    add_renderer(c_render);

    CLI::App* c_score = app.add_subcommand("score", "render and score a directory of .mid files");
    c_score->add_option("--in", in_path)->required();
    c_score->add_option("--out-dir", out_dir);
    c_score->add_option("--external-renderer", external_renderers,
                        "additional name:command:soundfont renderer, repeatable");
    add_common(c_score);
    add_reward(c_score);
    add_renderer(c_score);
    c_score->add_option("--audio-crop-seconds", cfg.grpo.audio_crop_seconds);

    CLI::App* c_analyze = app.add_subcommand("analyze", "MIDI feature reports and histogram CSVs");
    c_analyze->add_option("--dir-a", dir_a)->required();
    c_analyze->add_option("--dir-b", dir_b, "optional second directory for side-by-side export");
    c_analyze->add_option("--out-dir", out_dir);
    add_common(c_analyze);

    CLI::App* c_diversity = app.add_subcommand("diversity", "pairwise piano-roll diversity report");
    c_diversity->add_option("--dir", dir_a)->required();
    c_diversity->add_option("--out-dir", out_dir);
    c_diversity->add_option("--beats", beats);
    c_diversity->add_option("--steps-per-beat", steps_per_beat);
    add_common(c_diversity);

    CLI::App* c_echo = app.add_subcommand("config-echo", "print the fully resolved configuration");
    add_common(c_echo);
    add_model(c_echo);
    add_grpo(c_echo);
    add_reward(c_echo);
    add_renderer(c_echo);
    c_echo->add_option("--epochs", cfg.pretrain.epochs);
    c_echo->add_option("--batch-size", cfg.pretrain.batch_size);
    c_echo->add_option("--crop-len", cfg.pretrain.crop_len);
    c_echo->add_option("--lr", cfg.pretrain.lr);

    CLI11_PARSE(app, argc, argv);

    try {
        if (!reward_axis.empty()) cfg.reward.axis = reward_axis_from_string(reward_axis);
        if (!scorer_kind.empty())
            cfg.reward.kind = scorer_kind == "remote" ? RewardSpec::Kind::remote : RewardSpec::Kind::proxy;
        if (!renderer_kind.empty()) {
            cfg.renderer.kind = renderer_kind == "external" ? RendererChoice::Kind::external
                                                            : RendererChoice::Kind::builtin;
            cfg.renderer.name = renderer_kind;
        }
        if (!prompt_source.empty())
            cfg.grpo.prompt_source = prompt_source == "dataset" ? GrpoConfig::PromptSource::dataset
                                                                : GrpoConfig::PromptSource::procedural;
        cfg.model.seed = cfg.seed;
        cfg.pretrain.seed = cfg.seed;
        cfg.grpo.seed = cfg.seed;

        if (app.got_subcommand(c_echo)) {
            std::cout << json(cfg).dump(2) << "\n";
            return 0;
        }
        if (app.got_subcommand(c_ingest)) {
            const fs::path dataset_path(dataset);
            const fs::path parent = dataset_path.has_parent_path() ? dataset_path.parent_path() : ".";
            DirLock lock(parent);
            const IngestReport report = cmd_ingest(corpus_dir, dataset_path, cfg.tokenizer);
            write_resolved_config(parent, cfg);
            int64_t rejected = 0;
            for (const auto& [k, v] : report.rejected) rejected += v;
            std::cout << "accepted " << report.accepted << ", rejected " << rejected << " -> "
                      << dataset << "\n";
            return 0;
        }
        if (app.got_subcommand(c_pretrain)) {
            const fs::path ckpt(checkpoint_out);
            const fs::path parent = ckpt.has_parent_path() ? ckpt.parent_path() : ".";
            DirLock lock(parent);
            const PretrainOutcome out = cmd_pretrain(dataset, ckpt, cfg);
            write_resolved_config(parent, cfg);
            for (const auto& e : out.epochs)
                std::cout << "epoch " << e.epoch << " train_loss " << e.train_loss << " val_loss "
                          << e.val_loss << "\n";
            std::cout << "checkpoint -> " << checkpoint_out << "\n";
            return 0;
        }
        if (app.got_subcommand(c_tune)) {
            const fs::path ckpt(checkpoint_out);
            const fs::path parent = ckpt.has_parent_path() ? ckpt.parent_path() : ".";
            DirLock lock(parent);
            if (iter_log.empty()) iter_log = checkpoint_out + ".iterations.jsonl";
            const TuneOutcome out = cmd_tune(checkpoint, ckpt, iter_log, cfg, prompt_dataset);
            write_resolved_config(parent, cfg);
            if (!out.log.empty())
                std::cout << "final mean_reward " << out.log.back().mean_reward << " over "
                          << out.log.size() << " iterations\n";
            std::cout << "checkpoint -> " << checkpoint_out << "\n";
            return 0;
        }
        if (app.got_subcommand(c_generate)) {
            DirLock lock(out_dir);
            const auto written = cmd_generate(checkpoint, n_generate, out_dir, cfg, prompt_dataset);
            write_resolved_config(out_dir, cfg);
            std::cout << "wrote " << written.size() << " files to " << out_dir << "\n";
            return 0;
        }
        if (app.got_subcommand(c_render)) {
            DirLock lock(out_dir);
            const auto written = cmd_render(in_path, out_dir, cfg);
            write_resolved_config(out_dir, cfg);
            std::cout << "wrote " << written.size() << " files to " << out_dir << "\n";
            return 0;
        }
        if (app.got_subcommand(c_score)) {
            DirLock lock(out_dir);
            std::vector<RendererChoice> renderers{cfg.renderer};
            for (const auto& spec : external_renderers)
                renderers.push_back(parse_external_renderer(spec));
            const json out = cmd_score(in_path, out_dir, cfg, renderers);
            write_resolved_config(out_dir, cfg);
            std::cout << out["renderers"].dump(2) << "\n";
            return 0;
        }
        if (app.got_subcommand(c_analyze)) {
            DirLock lock(out_dir);
            const json summary = cmd_analyze(dir_a, dir_b.empty() ? std::nullopt
                                                                  : std::optional<fs::path>(dir_b),
                                             out_dir);
            write_resolved_config(out_dir, cfg);
            std::cout << summary.dump(2) << "\n";
            return 0;
        }
        if (app.got_subcommand(c_diversity)) {
            DirLock lock(out_dir);
            const json out = cmd_diversity(dir_a, out_dir, beats, steps_per_beat);
            write_resolved_config(out_dir, cfg);
            std::cout << out.dump(2) << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "error: no subcommand executed\n";
    return 1;
}
