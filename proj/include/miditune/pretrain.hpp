#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "miditune/model.hpp"
#include "miditune/rng.hpp"
#include "miditune/tokenizer.hpp"

namespace miditune {

struct PretrainConfig {
    int epochs = 3;
    int batch_size = 8;
    int crop_len = 512;
    double lr = 3e-4;
    uint64_t seed = 1;
};

struct DatasetSplit {
    std::vector<size_t> train, validation, holdout;
};

// Deterministic split by file-id hash: records are ordered by hash, the first
// 10% become the holdout, then 10% of the remainder the validation set.
inline DatasetSplit split_dataset(const TokenDataset& ds, double holdout_frac = 0.10,
                                  double val_frac = 0.10) {
    std::vector<std::pair<uint64_t, size_t>> order;
    order.reserve(ds.records.size());
    for (size_t i = 0; i < ds.records.size(); ++i)
        order.emplace_back(fnv1a64(ds.records[i].id), i);
    std::sort(order.begin(), order.end());

    const size_t n = order.size();
    const size_t n_holdout = static_cast<size_t>(static_cast<double>(n) * holdout_frac);
    const size_t n_val = static_cast<size_t>(static_cast<double>(n - n_holdout) * val_frac);

    DatasetSplit split;
    for (size_t k = 0; k < n; ++k) {
        if (k < n_holdout)
            split.holdout.push_back(order[k].second);
        else if (k < n_holdout + n_val)
            split.validation.push_back(order[k].second);
        else
            split.train.push_back(order[k].second);
    }
    return split;
}

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

// Cross-entropy pretraining on random crops with Adam. Deterministic for a
// given seed: shuffle order, crop offsets, and reduction order are all fixed.
inline ModelParams<float> pretrain(const TokenDataset& ds, const Vocab& vocab, ModelConfig mcfg,
                                   const PretrainConfig& cfg,
                                   std::vector<EpochStats>* stats_out = nullptr,
                                   const std::function<void(const EpochStats&)>& on_epoch = {}) {
    if (ds.records.empty()) throw std::invalid_argument("pretrain: empty dataset");
    if (mcfg.vocab_size == 0) mcfg.vocab_size = vocab.size();
    mcfg.validate();

    const DatasetSplit split = split_dataset(ds);
    const auto& train_idx = split.train;
    if (train_idx.empty()) throw std::invalid_argument("pretrain: empty training split");

    ModelParams<float> params = init_params<float>(mcfg);
    Adam<float> adam(params);
    ModelParams<float> grads = make_params_shell<float>(mcfg);

    const int crop_len = std::min(cfg.crop_len, mcfg.max_seq_len);
    auto crop_of = [&](size_t rec, Rng& rng) {
        TokenSequence seq{ds.records[rec].ids};
        return random_crop(seq, crop_len, rng).ids;
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(seed_combine(cfg.seed, 0x9d70, static_cast<uint64_t>(epoch)));
        std::vector<size_t> order = train_idx;
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);

        double loss_sum = 0.0;
        int n_batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            std::vector<std::vector<int32_t>> batch;
            for (size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k)
                batch.push_back(crop_of(order[k], rng));
            for (auto& [name, g] : named_tensors(grads)) g->zero();
            loss_sum += ce_loss_and_grads(params, batch, vocab.pad_id, grads);
            adam.step(params, grads, cfg.lr);
            ++n_batches;
        }

        EpochStats st;
        st.epoch = epoch;
        st.train_loss = loss_sum / std::max(1, n_batches);

        // validation loss on deterministic prefix crops, no gradient step
        double val_sum = 0.0;
        int val_n = 0;
        for (const size_t rec : split.validation) {
            std::vector<int32_t> ids = ds.records[rec].ids;
            if (static_cast<int>(ids.size()) > crop_len) ids.resize(static_cast<size_t>(crop_len));
            if (ids.size() < 2) continue;
            val_sum += ce_loss(params, {ids}, vocab.pad_id);
            ++val_n;
        }
        st.val_loss = val_n > 0 ? val_sum / val_n : 0.0;

        if (stats_out) stats_out->push_back(st);
        if (on_epoch) on_epoch(st);
    }
    return params;
}

}  // namespace miditune
