#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "miditune/rng.hpp"

namespace miditune {

struct ModelConfig {
    int n_layers = 2;
    int d_model = 128;
    int n_heads = 4;
    int d_ff = 512;
    int vocab_size = 0;
    int max_seq_len = 512;
    uint64_t seed = 0;

    bool operator==(const ModelConfig&) const = default;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1 ||
            max_seq_len < 1)
            throw std::invalid_argument("model config fields must be positive");
        if (d_model % n_heads != 0)
            throw std::invalid_argument("d_model must be divisible by n_heads");
    }
};

template <typename Real>
struct Mat {
    int rows = 0, cols = 0;
    std::vector<Real> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, Real(0)) {}

    Real* row(int i) { return a.data() + static_cast<size_t>(i) * cols; }
    const Real* row(int i) const { return a.data() + static_cast<size_t>(i) * cols; }
    Real& at(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
    Real at(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }
    void zero() { std::fill(a.begin(), a.end(), Real(0)); }
    size_t size() const { return a.size(); }
};

namespace linalg {

// y[out] += x[in] * W[in x out]
template <typename Real>
void vecmat_acc(const Real* x, const Mat<Real>& w, Real* y) {
    for (int i = 0; i < w.rows; ++i) {
        const Real xi = x[i];
        const Real* wr = w.row(i);
        for (int j = 0; j < w.cols; ++j) y[j] += xi * wr[j];
    }
}

// y[in] += d[out] * W^T
template <typename Real>
void vecmat_t_acc(const Real* d, const Mat<Real>& w, Real* y) {
    for (int i = 0; i < w.rows; ++i) {
        const Real* wr = w.row(i);
        Real acc = 0;
        for (int j = 0; j < w.cols; ++j) acc += d[j] * wr[j];
        y[i] += acc;
    }
}

// dW[in x out] += outer(x, d)
template <typename Real>
void outer_acc(const Real* x, const Real* d, Mat<Real>& dw) {
    for (int i = 0; i < dw.rows; ++i) {
        const Real xi = x[i];
        if (xi == Real(0)) continue;
        Real* wr = dw.row(i);
        for (int j = 0; j < dw.cols; ++j) wr[j] += xi * d[j];
    }
}

template <typename Real>
Real dot(const Real* a, const Real* b, int n) {
    Real acc = 0;
    for (int i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

}  // namespace linalg

template <typename Real>
struct LayerParams {
    Mat<Real> ln1_gain, ln1_bias;
    Mat<Real> wq, wk, wv, wo;
    Mat<Real> ln2_gain, ln2_bias;
    Mat<Real> w_in, w_out;
};

template <typename Real>
struct ModelParams {
    ModelConfig config;
    Mat<Real> tok_emb;  // vocab x d_model
    Mat<Real> pos_emb;  // max_seq_len x d_model
    std::vector<LayerParams<Real>> layers;
    Mat<Real> final_gain, final_bias;
    Mat<Real> head;  // d_model x vocab
};

template <typename Real>
std::vector<std::pair<std::string, Mat<Real>*>> named_tensors(ModelParams<Real>& p) {
    std::vector<std::pair<std::string, Mat<Real>*>> out;
    out.emplace_back("tok_emb", &p.tok_emb);
    out.emplace_back("pos_emb", &p.pos_emb);
    for (size_t l = 0; l < p.layers.size(); ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        auto& lp = p.layers[l];
        out.emplace_back(pre + "ln1.gain", &lp.ln1_gain);
        out.emplace_back(pre + "ln1.bias", &lp.ln1_bias);
        out.emplace_back(pre + "attn.wq", &lp.wq);
        out.emplace_back(pre + "attn.wk", &lp.wk);
        out.emplace_back(pre + "attn.wv", &lp.wv);
        out.emplace_back(pre + "attn.wo", &lp.wo);
        out.emplace_back(pre + "ln2.gain", &lp.ln2_gain);
        out.emplace_back(pre + "ln2.bias", &lp.ln2_bias);
        out.emplace_back(pre + "mlp.w_in", &lp.w_in);
        out.emplace_back(pre + "mlp.w_out", &lp.w_out);
    }
    out.emplace_back("final_norm.gain", &p.final_gain);
    out.emplace_back("final_norm.bias", &p.final_bias);
    out.emplace_back("head", &p.head);
    return out;
}

template <typename Real>
ModelParams<Real> make_params_shell(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams<Real> p;
    p.config = cfg;
    p.tok_emb = Mat<Real>(cfg.vocab_size, cfg.d_model);
    p.pos_emb = Mat<Real>(cfg.max_seq_len, cfg.d_model);
    p.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& lp : p.layers) {
        lp.ln1_gain = Mat<Real>(1, cfg.d_model);
        lp.ln1_bias = Mat<Real>(1, cfg.d_model);
        lp.wq = Mat<Real>(cfg.d_model, cfg.d_model);
        lp.wk = Mat<Real>(cfg.d_model, cfg.d_model);
        lp.wv = Mat<Real>(cfg.d_model, cfg.d_model);
        lp.wo = Mat<Real>(cfg.d_model, cfg.d_model);
        lp.ln2_gain = Mat<Real>(1, cfg.d_model);
        lp.ln2_bias = Mat<Real>(1, cfg.d_model);
        lp.w_in = Mat<Real>(cfg.d_model, cfg.d_ff);
        lp.w_out = Mat<Real>(cfg.d_ff, cfg.d_model);
    }
    p.final_gain = Mat<Real>(1, cfg.d_model);
    p.final_bias = Mat<Real>(1, cfg.d_model);
    p.head = Mat<Real>(cfg.d_model, cfg.vocab_size);
    return p;
}

// Deterministic initialization: weights N(0, 0.02^2), norm gains 1, biases 0.
template <typename Real = float>
ModelParams<Real> init_params(const ModelConfig& cfg) {
    ModelParams<Real> p = make_params_shell<Real>(cfg);
    Rng rng(cfg.seed);
    for (auto& [name, m] : named_tensors(p)) {
        const bool is_gain = name.ends_with("gain");
        const bool is_bias = name.ends_with("bias");
        for (auto& w : m->a) {
            if (is_gain)
                w = Real(1);
            else if (is_bias)
                w = Real(0);
            else
                w = static_cast<Real>(rng.normal() * 0.02);
        }
    }
    return p;
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& src) {
    ModelParams<To> dst = make_params_shell<To>(src.config);
    auto st = named_tensors(const_cast<ModelParams<From>&>(src));
    auto dt = named_tensors(dst);
    for (size_t i = 0; i < st.size(); ++i)
        for (size_t k = 0; k < st[i].second->a.size(); ++k)
            dt[i].second->a[k] = static_cast<To>(st[i].second->a[k]);
    return dst;
}

// ---------------------------------------------------------------------------
// Forward pass. The sequence is processed position by position over a growing
// key/value cache, so incremental sampling and the full training forward are
// the same computation and produce bit-identical logits.

inline constexpr double kLayerNormEps = 1e-5;

template <typename Real>
struct ForwardTrace {
    std::vector<int32_t> ids;
    int T = 0;
    Mat<Real> emb;  // T x d, input to layer 0
    struct Layer {
        Mat<Real> n1, q;                // T x d (k, v live in the cache)
        std::vector<Real> mu1, rs1;     // per-position LayerNorm stats
        std::vector<Mat<Real>> probs;   // per head, T x T lower-triangular
        Mat<Real> att_concat, x1, n2;   // T x d
        std::vector<Real> mu2, rs2;
        Mat<Real> hpre, hact;  // T x d_ff
        Mat<Real> x2;          // T x d, input to the next layer
    };
    std::vector<Layer> layers;
    Mat<Real> nf;  // T x d
    std::vector<Real> muf, rsf;
    Mat<Real> logits;  // T x vocab
};

// Growing per-layer key/value cache for autoregressive use.
template <typename Real>
struct KvCache {
    std::vector<Mat<Real>> k, v;
    int t = 0;

    KvCache(const ModelConfig& cfg, int capacity) {
        for (int l = 0; l < cfg.n_layers; ++l) {
            k.emplace_back(capacity, cfg.d_model);
            v.emplace_back(capacity, cfg.d_model);
        }
    }
};

namespace detail {

template <typename Real>
void layernorm_row(const Real* x, const Real* gain, const Real* bias, int d, Real* y, Real* mu_out,
                   Real* rstd_out) {
    Real mu = 0;
    for (int i = 0; i < d; ++i) mu += x[i];
    mu /= d;
    Real var = 0;
    for (int i = 0; i < d; ++i) {
        const Real c = x[i] - mu;
        var += c * c;
    }
    var /= d;
    const Real rstd = Real(1) / std::sqrt(var + static_cast<Real>(kLayerNormEps));
    for (int i = 0; i < d; ++i) y[i] = (x[i] - mu) * rstd * gain[i] + bias[i];
    *mu_out = mu;
    *rstd_out = rstd;
}

template <typename Real>
Real silu(Real x) {
    return x / (Real(1) + std::exp(-x));
}

template <typename Real>
Real silu_grad(Real x) {
    const Real s = Real(1) / (Real(1) + std::exp(-x));
    return s * (Real(1) + x * (Real(1) - s));
}

}  // namespace detail

// Advances the cache by one token at position cache.t; writes logits for that
// position into logits_row (size vocab). When trace is non-null all
// activations needed for the backward pass are recorded.
template <typename Real>
void forward_step(const ModelParams<Real>& p, KvCache<Real>& cache, int32_t token,
                  Real* logits_row, ForwardTrace<Real>* trace) {
    const auto& cfg = p.config;
    const int d = cfg.d_model;
    const int dh = cfg.head_dim();
    const int t = cache.t;
    if (t >= cfg.max_seq_len) throw std::invalid_argument("sequence too long for model");
    if (token < 0 || token >= cfg.vocab_size) throw std::invalid_argument("token id out of range");
    const Real inv_sqrt_dh = Real(1) / std::sqrt(static_cast<Real>(dh));

    std::vector<Real> x(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) x[i] = p.tok_emb.at(token, i) + p.pos_emb.at(t, i);
    if (trace)
        for (int i = 0; i < d; ++i) trace->emb.at(t, i) = x[i];

    std::vector<Real> n1(d), q(d), att(d), out(d), x1(d), n2(d), hpre(cfg.d_ff), hact(cfg.d_ff),
        mlp(d), scores(static_cast<size_t>(t) + 1);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& lp = p.layers[static_cast<size_t>(l)];
        Real mu, rstd;
        detail::layernorm_row(x.data(), lp.ln1_gain.row(0), lp.ln1_bias.row(0), d, n1.data(), &mu,
                              &rstd);
        Real* krow = cache.k[static_cast<size_t>(l)].row(t);
        Real* vrow = cache.v[static_cast<size_t>(l)].row(t);
        std::fill(q.begin(), q.end(), Real(0));
        std::fill(krow, krow + d, Real(0));
        std::fill(vrow, vrow + d, Real(0));
        linalg::vecmat_acc(n1.data(), lp.wq, q.data());
        linalg::vecmat_acc(n1.data(), lp.wk, krow);
        linalg::vecmat_acc(n1.data(), lp.wv, vrow);

        std::fill(att.begin(), att.end(), Real(0));
        for (int h = 0; h < cfg.n_heads; ++h) {
            const int o = h * dh;
            Real m = -std::numeric_limits<Real>::infinity();
            for (int u = 0; u <= t; ++u) {
                scores[static_cast<size_t>(u)] =
                    linalg::dot(q.data() + o, cache.k[static_cast<size_t>(l)].row(u) + o, dh) *
                    inv_sqrt_dh;
                m = std::max(m, scores[static_cast<size_t>(u)]);
            }
            Real z = 0;
            for (int u = 0; u <= t; ++u) {
                scores[static_cast<size_t>(u)] = std::exp(scores[static_cast<size_t>(u)] - m);
                z += scores[static_cast<size_t>(u)];
            }
            for (int u = 0; u <= t; ++u) {
                const Real prob = scores[static_cast<size_t>(u)] / z;
                const Real* vu = cache.v[static_cast<size_t>(l)].row(u) + o;
                for (int i = 0; i < dh; ++i) att[static_cast<size_t>(o + i)] += prob * vu[i];
                if (trace) trace->layers[static_cast<size_t>(l)].probs[static_cast<size_t>(h)].at(t, u) = prob;
            }
        }

        std::fill(out.begin(), out.end(), Real(0));
        linalg::vecmat_acc(att.data(), lp.wo, out.data());
        for (int i = 0; i < d; ++i) x1[static_cast<size_t>(i)] = x[static_cast<size_t>(i)] + out[static_cast<size_t>(i)];

        Real mu2, rstd2;
        detail::layernorm_row(x1.data(), lp.ln2_gain.row(0), lp.ln2_bias.row(0), d, n2.data(), &mu2,
                              &rstd2);
        std::fill(hpre.begin(), hpre.end(), Real(0));
        linalg::vecmat_acc(n2.data(), lp.w_in, hpre.data());
        for (int i = 0; i < cfg.d_ff; ++i) hact[static_cast<size_t>(i)] = detail::silu(hpre[static_cast<size_t>(i)]);
        std::fill(mlp.begin(), mlp.end(), Real(0));
        linalg::vecmat_acc(hact.data(), lp.w_out, mlp.data());

        if (trace) {
            auto& tl = trace->layers[static_cast<size_t>(l)];
            for (int i = 0; i < d; ++i) {
                tl.n1.at(t, i) = n1[static_cast<size_t>(i)];
                tl.q.at(t, i) = q[static_cast<size_t>(i)];
                tl.att_concat.at(t, i) = att[static_cast<size_t>(i)];
                tl.x1.at(t, i) = x1[static_cast<size_t>(i)];
                tl.n2.at(t, i) = n2[static_cast<size_t>(i)];
            }
            for (int i = 0; i < cfg.d_ff; ++i) {
                tl.hpre.at(t, i) = hpre[static_cast<size_t>(i)];
                tl.hact.at(t, i) = hact[static_cast<size_t>(i)];
            }
            tl.mu1[static_cast<size_t>(t)] = mu;
            tl.rs1[static_cast<size_t>(t)] = rstd;
            tl.mu2[static_cast<size_t>(t)] = mu2;
            tl.rs2[static_cast<size_t>(t)] = rstd2;
        }

        for (int i = 0; i < d; ++i) x[static_cast<size_t>(i)] = x1[static_cast<size_t>(i)] + mlp[static_cast<size_t>(i)];
        if (trace)
            for (int i = 0; i < d; ++i) trace->layers[static_cast<size_t>(l)].x2.at(t, i) = x[static_cast<size_t>(i)];
    }

    Real muf, rsf;
    std::vector<Real> nf(static_cast<size_t>(d));
    detail::layernorm_row(x.data(), p.final_gain.row(0), p.final_bias.row(0), d, nf.data(), &muf,
                          &rsf);
    std::fill(logits_row, logits_row + cfg.vocab_size, Real(0));
    linalg::vecmat_acc(nf.data(), p.head, logits_row);
    if (trace) {
        for (int i = 0; i < d; ++i) trace->nf.at(t, i) = nf[static_cast<size_t>(i)];
        trace->muf[static_cast<size_t>(t)] = muf;
        trace->rsf[static_cast<size_t>(t)] = rsf;
        for (int j = 0; j < cfg.vocab_size; ++j) trace->logits.at(t, j) = logits_row[j];
    }
    ++cache.t;
}

template <typename Real>
ForwardTrace<Real> make_trace(const ModelConfig& cfg, int T) {
    ForwardTrace<Real> tr;
    tr.T = T;
    tr.emb = Mat<Real>(T, cfg.d_model);
    tr.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& l : tr.layers) {
        l.n1 = Mat<Real>(T, cfg.d_model);
        l.q = Mat<Real>(T, cfg.d_model);
        l.mu1.resize(static_cast<size_t>(T));
        l.rs1.resize(static_cast<size_t>(T));
        l.probs.assign(static_cast<size_t>(cfg.n_heads), Mat<Real>(T, T));
        l.att_concat = Mat<Real>(T, cfg.d_model);
        l.x1 = Mat<Real>(T, cfg.d_model);
        l.n2 = Mat<Real>(T, cfg.d_model);
        l.mu2.resize(static_cast<size_t>(T));
        l.rs2.resize(static_cast<size_t>(T));
        l.hpre = Mat<Real>(T, cfg.d_ff);
        l.hact = Mat<Real>(T, cfg.d_ff);
        l.x2 = Mat<Real>(T, cfg.d_model);
    }
    tr.nf = Mat<Real>(T, cfg.d_model);
    tr.muf.resize(static_cast<size_t>(T));
    tr.rsf.resize(static_cast<size_t>(T));
    tr.logits = Mat<Real>(T, cfg.vocab_size);
    return tr;
}

// Forward without trace; returns the T x vocab logits.
template <typename Real>
Mat<Real> forward_logits(const ModelParams<Real>& p, const std::vector<int32_t>& ids) {
    const int T = static_cast<int>(ids.size());
    if (T < 1) throw std::invalid_argument("empty sequence");
    Mat<Real> logits(T, p.config.vocab_size);
    KvCache<Real> cache(p.config, T);
    for (int t = 0; t < T; ++t)
        forward_step<Real>(p, cache, ids[static_cast<size_t>(t)], logits.row(t), nullptr);
    return logits;
}

// ---------------------------------------------------------------------------
// Backward pass: exact reverse-mode gradients given dL/dlogits.

namespace detail {

// Backward of y = gain * (x - mu) * rstd + bias for one row.
template <typename Real>
void layernorm_backward_row(const Real* x, const Real* gain, Real mu, Real rstd, const Real* dy,
                            int d, Real* dx_acc, Real* dgain_acc, Real* dbias_acc) {
    Real mean_dxhat = 0, mean_dxhat_xhat = 0;
    for (int i = 0; i < d; ++i) {
        const Real xhat = (x[i] - mu) * rstd;
        const Real dxhat = dy[i] * gain[i];
        mean_dxhat += dxhat;
        mean_dxhat_xhat += dxhat * xhat;
        dgain_acc[i] += dy[i] * xhat;
        dbias_acc[i] += dy[i];
    }
    mean_dxhat /= d;
    mean_dxhat_xhat /= d;
    for (int i = 0; i < d; ++i) {
        const Real xhat = (x[i] - mu) * rstd;
        const Real dxhat = dy[i] * gain[i];
        dx_acc[i] += rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
    }
}

}  // namespace detail

template <typename Real>
void backward(const ModelParams<Real>& p, const ForwardTrace<Real>& tr, const KvCache<Real>& cache,
              const Mat<Real>& dlogits, ModelParams<Real>& grads) {
    const auto& cfg = p.config;
    const int d = cfg.d_model;
    const int dh = cfg.head_dim();
    const int T = tr.T;
    const Real inv_sqrt_dh = Real(1) / std::sqrt(static_cast<Real>(dh));

    Mat<Real> dx(T, d);  // gradient flowing into the residual stream
    Mat<Real> dnf(T, d);
    for (int t = 0; t < T; ++t) {
        linalg::outer_acc(tr.nf.row(t), dlogits.row(t), grads.head);
        linalg::vecmat_t_acc(dlogits.row(t), p.head, dnf.row(t));
    }
    {
        const Mat<Real>& xf = cfg.n_layers > 0 ? tr.layers.back().x2 : tr.emb;
        for (int t = 0; t < T; ++t)
            detail::layernorm_backward_row(xf.row(t), p.final_gain.row(0), tr.muf[static_cast<size_t>(t)],
                                           tr.rsf[static_cast<size_t>(t)], dnf.row(t), d, dx.row(t),
                                           grads.final_gain.row(0), grads.final_bias.row(0));
    }

    Mat<Real> dx1(T, d), dn2(T, d), dhact(T, cfg.d_ff), dhpre(T, cfg.d_ff), datt(T, d), dq(T, d),
        dk(T, d), dv(T, d), dn1(T, d), dx_next(T, d);
    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const auto& lp = p.layers[static_cast<size_t>(l)];
        auto& gl = grads.layers[static_cast<size_t>(l)];
        const auto& tl = tr.layers[static_cast<size_t>(l)];
        const Mat<Real>& layer_in = (l == 0) ? tr.emb : tr.layers[static_cast<size_t>(l - 1)].x2;

        dx1.zero();
        dn2.zero();
        dhact.zero();
        dhpre.zero();
        datt.zero();
        dq.zero();
        dk.zero();
        dv.zero();
        dn1.zero();
        dx_next.zero();

        // MLP branch: x2 = x1 + silu(n2 W_in) W_out
        for (int t = 0; t < T; ++t) {
            linalg::outer_acc(tl.hact.row(t), dx.row(t), gl.w_out);
            linalg::vecmat_t_acc(dx.row(t), lp.w_out, dhact.row(t));
            for (int i = 0; i < cfg.d_ff; ++i)
                dhpre.at(t, i) = dhact.at(t, i) * detail::silu_grad(tl.hpre.at(t, i));
            linalg::outer_acc(tl.n2.row(t), dhpre.row(t), gl.w_in);
            linalg::vecmat_t_acc(dhpre.row(t), lp.w_in, dn2.row(t));
            detail::layernorm_backward_row(tl.x1.row(t), lp.ln2_gain.row(0), tl.mu2[static_cast<size_t>(t)],
                                           tl.rs2[static_cast<size_t>(t)], dn2.row(t), d, dx1.row(t),
                                           gl.ln2_gain.row(0), gl.ln2_bias.row(0));
            for (int i = 0; i < d; ++i) dx1.at(t, i) += dx.at(t, i);  // residual
        }

        // Attention branch: x1 = in + (concat_h softmax(q k / sqrt(dh)) v) W_o
        for (int t = 0; t < T; ++t) {
            linalg::outer_acc(tl.att_concat.row(t), dx1.row(t), gl.wo);
            linalg::vecmat_t_acc(dx1.row(t), lp.wo, datt.row(t));
        }
        std::vector<Real> dprob(static_cast<size_t>(T));
        for (int h = 0; h < cfg.n_heads; ++h) {
            const int o = h * dh;
            const Mat<Real>& probs = tl.probs[static_cast<size_t>(h)];
            for (int t = 0; t < T; ++t) {
                const Real* do_h = datt.row(t) + o;
                Real sum_p_dp = 0;
                for (int u = 0; u <= t; ++u) {
                    const Real prob = probs.at(t, u);
                    const Real dp = linalg::dot(do_h, cache.v[static_cast<size_t>(l)].row(u) + o, dh);
                    dprob[static_cast<size_t>(u)] = dp;
                    sum_p_dp += prob * dp;
                    Real* dvu = dv.row(u) + o;
                    for (int i = 0; i < dh; ++i) dvu[i] += prob * do_h[i];
                }
                const Real* q_t = tl.q.row(t) + o;
                Real* dq_t = dq.row(t) + o;
                for (int u = 0; u <= t; ++u) {
                    const Real prob = probs.at(t, u);
                    const Real dscore = prob * (dprob[static_cast<size_t>(u)] - sum_p_dp) * inv_sqrt_dh;
                    const Real* k_u = cache.k[static_cast<size_t>(l)].row(u) + o;
                    Real* dk_u = dk.row(u) + o;
                    for (int i = 0; i < dh; ++i) {
                        dq_t[i] += dscore * k_u[i];
                        dk_u[i] += dscore * q_t[i];
                    }
                }
            }
        }
        for (int t = 0; t < T; ++t) {
            linalg::outer_acc(tl.n1.row(t), dq.row(t), gl.wq);
            linalg::outer_acc(tl.n1.row(t), dk.row(t), gl.wk);
            linalg::outer_acc(tl.n1.row(t), dv.row(t), gl.wv);
            linalg::vecmat_t_acc(dq.row(t), lp.wq, dn1.row(t));
            linalg::vecmat_t_acc(dk.row(t), lp.wk, dn1.row(t));
            linalg::vecmat_t_acc(dv.row(t), lp.wv, dn1.row(t));
            detail::layernorm_backward_row(layer_in.row(t), lp.ln1_gain.row(0), tl.mu1[static_cast<size_t>(t)],
                                           tl.rs1[static_cast<size_t>(t)], dn1.row(t), d, dx_next.row(t),
                                           gl.ln1_gain.row(0), gl.ln1_bias.row(0));
            for (int i = 0; i < d; ++i) dx_next.at(t, i) += dx1.at(t, i);  // residual
        }
        std::swap(dx, dx_next);
    }

    for (int t = 0; t < T; ++t) {
        const int32_t tok = tr.ids[static_cast<size_t>(t)];
        Real* gtok = grads.tok_emb.row(tok);
        Real* gpos = grads.pos_emb.row(t);
        const Real* dxt = dx.row(t);
        for (int i = 0; i < d; ++i) {
            gtok[i] += dxt[i];
            gpos[i] += dxt[i];
        }
    }
}

// Forward with trace retaining the KV cache, for callers that need backward.
template <typename Real>
struct TracedForward {
    ForwardTrace<Real> trace;
    KvCache<Real> cache;

    TracedForward(const ModelParams<Real>& p, const std::vector<int32_t>& ids)
        : trace(make_trace<Real>(p.config, static_cast<int>(ids.size()))),
          cache(p.config, static_cast<int>(ids.size())) {
        trace.ids = ids;
        std::vector<Real> row(static_cast<size_t>(p.config.vocab_size));
        for (size_t t = 0; t < ids.size(); ++t) forward_step(p, cache, ids[t], row.data(), &trace);
    }
};

// ---------------------------------------------------------------------------
// Losses, log-probabilities, sampling

template <typename Real>
Real logsumexp_row(const Real* x, int n) {
    Real m = x[0];
    for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
    Real z = 0;
    for (int i = 0; i < n; ++i) z += std::exp(x[i] - m);
    return m + std::log(z);
}

// Mean next-token cross entropy over non-PAD target positions, with exact
// gradients accumulated into `grads`.
template <typename Real>
Real ce_loss_and_grads(const ModelParams<Real>& p, const std::vector<std::vector<int32_t>>& batch,
                       int32_t pad_id, ModelParams<Real>& grads) {
    int64_t n_targets = 0;
    for (const auto& ids : batch)
        for (size_t t = 0; t + 1 < ids.size(); ++t)
            if (ids[t + 1] != pad_id) ++n_targets;
    if (n_targets == 0) throw std::invalid_argument("batch has no non-PAD targets");

    const Real inv_n = Real(1) / static_cast<Real>(n_targets);
    Real loss = 0;
    for (const auto& ids : batch) {
        TracedForward<Real> fwd(p, ids);
        const int T = static_cast<int>(ids.size());
        Mat<Real> dlogits(T, p.config.vocab_size);
        for (int t = 0; t + 1 < T; ++t) {
            const int32_t y = ids[static_cast<size_t>(t) + 1];
            if (y == pad_id) continue;
            const Real* row = fwd.trace.logits.row(t);
            const Real lse = logsumexp_row(row, p.config.vocab_size);
            loss += (lse - row[y]) * inv_n;
            Real* drow = dlogits.row(t);
            for (int j = 0; j < p.config.vocab_size; ++j) drow[j] = std::exp(row[j] - lse) * inv_n;
            drow[y] -= inv_n;
        }
        backward(p, fwd.trace, fwd.cache, dlogits, grads);
    }
    return loss;
}

// Forward-only variant of the cross entropy above.
template <typename Real>
Real ce_loss(const ModelParams<Real>& p, const std::vector<std::vector<int32_t>>& batch,
             int32_t pad_id) {
    int64_t n_targets = 0;
    for (const auto& ids : batch)
        for (size_t t = 0; t + 1 < ids.size(); ++t)
            if (ids[t + 1] != pad_id) ++n_targets;
    if (n_targets == 0) throw std::invalid_argument("batch has no non-PAD targets");
    Real loss = 0;
    for (const auto& ids : batch) {
        const Mat<Real> logits = forward_logits(p, ids);
        for (size_t t = 0; t + 1 < ids.size(); ++t) {
            const int32_t y = ids[t + 1];
            if (y == pad_id) continue;
            const Real* row = logits.row(static_cast<int>(t));
            loss += (logsumexp_row(row, p.config.vocab_size) - row[y]) / static_cast<Real>(n_targets);
        }
    }
    return loss;
}

// Log-probability of each realized completion token (positions >= prompt_len).
template <typename Real>
std::vector<Real> log_probs(const ModelParams<Real>& p, const std::vector<int32_t>& ids,
                            int prompt_len) {
    if (prompt_len < 1 || prompt_len >= static_cast<int>(ids.size()))
        throw std::invalid_argument("prompt_len must be in [1, len)");
    const Mat<Real> logits = forward_logits(p, ids);
    std::vector<Real> out;
    out.reserve(ids.size() - static_cast<size_t>(prompt_len));
    for (size_t t = static_cast<size_t>(prompt_len); t < ids.size(); ++t) {
        const Real* row = logits.row(static_cast<int>(t) - 1);
        out.push_back(row[ids[t]] - logsumexp_row(row, p.config.vocab_size));
    }
    return out;
}

struct SampleResult {
    std::vector<int32_t> ids;       // prompt followed by completion
    std::vector<float> logp;        // model (temperature-1) log-prob per completion token
};

// Ancestral sampling from softmax(logits / temperature); temperature 0 is
// greedy argmax. Deterministic for a given rng seed.
template <typename Real>
SampleResult sample(const ModelParams<Real>& p, const std::vector<int32_t>& prompt,
                    int max_new_tokens, double temperature, Rng& rng) {
    if (prompt.empty()) throw std::invalid_argument("prompt must not be empty");
    if (temperature < 0) throw std::invalid_argument("temperature must be >= 0");
    SampleResult res;
    res.ids = prompt;
    const int total = static_cast<int>(prompt.size()) + max_new_tokens;
    KvCache<Real> cache(p.config, total);
    const int V = p.config.vocab_size;
    std::vector<Real> row(static_cast<size_t>(V));
    for (size_t t = 0; t < prompt.size(); ++t) forward_step<Real>(p, cache, prompt[t], row.data(), nullptr);

    std::vector<Real> probs(static_cast<size_t>(V));
    for (int i = 0; i < max_new_tokens; ++i) {
        int32_t chosen = 0;
        if (temperature == 0.0) {
            for (int j = 1; j < V; ++j)
                if (row[static_cast<size_t>(j)] > row[static_cast<size_t>(chosen)]) chosen = j;
        } else {
            Real m = row[0];
            for (int j = 1; j < V; ++j) m = std::max(m, row[static_cast<size_t>(j)]);
            Real z = 0;
            for (int j = 0; j < V; ++j) {
                probs[static_cast<size_t>(j)] =
                    std::exp((row[static_cast<size_t>(j)] - m) / static_cast<Real>(temperature));
                z += probs[static_cast<size_t>(j)];
            }
            const Real target = static_cast<Real>(rng.next_double()) * z;
            Real acc = 0;
            chosen = V - 1;
            for (int j = 0; j < V; ++j) {
                acc += probs[static_cast<size_t>(j)];
                if (acc > target) {
                    chosen = j;
                    break;
                }
            }
        }
        res.logp.push_back(static_cast<float>(row[static_cast<size_t>(chosen)] -
                                              logsumexp_row(row.data(), V)));
        res.ids.push_back(chosen);
        if (i + 1 < max_new_tokens) forward_step<Real>(p, cache, chosen, row.data(), nullptr);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Adam optimizer (decoupled from the schedule; lr passed per step)

template <typename Real>
class Adam {
public:
    Adam(const ModelParams<Real>& p, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {
        auto tensors = named_tensors(const_cast<ModelParams<Real>&>(p));
        for (auto& [name, m] : tensors) {
            m_.emplace_back(m->rows, m->cols);
            v_.emplace_back(m->rows, m->cols);
        }
    }

    void step(ModelParams<Real>& p, const ModelParams<Real>& grads, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        auto pt = named_tensors(p);
        auto gt = named_tensors(const_cast<ModelParams<Real>&>(grads));
        for (size_t i = 0; i < pt.size(); ++i) {
            auto& w = pt[i].second->a;
            const auto& g = gt[i].second->a;
            auto& m = m_[i].a;
            auto& v = v_[i].a;
            for (size_t k = 0; k < w.size(); ++k) {
                m[k] = static_cast<Real>(beta1_ * m[k] + (1.0 - beta1_) * g[k]);
                v[k] = static_cast<Real>(beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k]);
                const double mhat = m[k] / bc1;
                const double vhat = v[k] / bc2;
                w[k] -= static_cast<Real>(lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

private:
    double beta1_, beta2_, eps_;
    int t_ = 0;
    std::vector<Mat<Real>> m_, v_;
};

}  // namespace miditune
