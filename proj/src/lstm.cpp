#include "trpfuse/lstm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "fmt/format.h"

namespace trpfuse {
namespace {

constexpr double kProbFloor = 1e-7;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void check_finite(double v, const char* layer) {
    if (!std::isfinite(v))
        throw std::runtime_error(
            fmt::format("non-finite intermediate in {}", layer));
}

// C += A * B
void matmul_acc(const Mat& A, const Mat& B, Mat& C) {
    for (std::size_t i = 0; i < A.rows; ++i)
        for (std::size_t k = 0; k < A.cols; ++k) {
            const double a = A(i, k);
            if (a == 0.0) continue;
            const double* brow = &B.d[k * B.cols];
            double* crow = &C.d[i * C.cols];
            for (std::size_t j = 0; j < B.cols; ++j) crow[j] += a * brow[j];
        }
}

// C += A * B^T
void matmul_nt_acc(const Mat& A, const Mat& B, Mat& C) {
    for (std::size_t i = 0; i < A.rows; ++i)
        for (std::size_t j = 0; j < B.rows; ++j) {
            const double* arow = &A.d[i * A.cols];
            const double* brow = &B.d[j * B.cols];
            double s = 0.0;
            for (std::size_t k = 0; k < A.cols; ++k) s += arow[k] * brow[k];
            C(i, j) += s;
        }
}

// C += A^T * B
void matmul_tn_acc(const Mat& A, const Mat& B, Mat& C) {
    for (std::size_t k = 0; k < A.rows; ++k)
        for (std::size_t i = 0; i < A.cols; ++i) {
            const double a = A(k, i);
            if (a == 0.0) continue;
            const double* brow = &B.d[k * B.cols];
            double* crow = &C.d[i * C.cols];
            for (std::size_t j = 0; j < B.cols; ++j) crow[j] += a * brow[j];
        }
}

struct CellCache {
    Mat gi, gf, gg, go;  // T x H gate activations
    Mat c, tanhc, h;     // T x H
};

// One directional pass; cache rows are indexed by input time t.
void run_cell(const LstmCellWeights& w, const Mat& X, bool reverse,
              CellCache& cache) {
    const std::size_t T = X.rows;
    const std::size_t H = w.wh.cols;
    cache.gi = Mat(T, H);
    cache.gf = Mat(T, H);
    cache.gg = Mat(T, H);
    cache.go = Mat(T, H);
    cache.c = Mat(T, H);
    cache.tanhc = Mat(T, H);
    cache.h = Mat(T, H);

    Vec h_prev(H, 0.0), c_prev(H, 0.0), pre(4 * H);
    for (std::size_t s = 0; s < T; ++s) {
        const std::size_t t = reverse ? T - 1 - s : s;
        const double* x = &X.d[t * X.cols];
        for (std::size_t r = 0; r < 4 * H; ++r) {
            double z = w.b[r];
            const double* wx = &w.wx.d[r * w.wx.cols];
            for (std::size_t k = 0; k < X.cols; ++k) z += wx[k] * x[k];
            const double* wh = &w.wh.d[r * H];
            for (std::size_t k = 0; k < H; ++k) z += wh[k] * h_prev[k];
            pre[r] = z;
        }
        for (std::size_t j = 0; j < H; ++j) {
            const double i = sigmoid(pre[j]);
            const double f = sigmoid(pre[H + j]);
            const double g = std::tanh(pre[2 * H + j]);
            const double o = sigmoid(pre[3 * H + j]);
            const double c = f * c_prev[j] + i * g;
            check_finite(c, "lstm cell");
            const double tc = std::tanh(c);
            cache.gi(t, j) = i;
            cache.gf(t, j) = f;
            cache.gg(t, j) = g;
            cache.go(t, j) = o;
            cache.c(t, j) = c;
            cache.tanhc(t, j) = tc;
            cache.h(t, j) = o * tc;
        }
        for (std::size_t j = 0; j < H; ++j) {
            h_prev[j] = cache.h(t, j);
            c_prev[j] = cache.c(t, j);
        }
    }
}

// dH holds d(loss)/d(h_t) for this direction; accumulates weight grads
// into gw and input grads into dX.
void cell_backward(const LstmCellWeights& w, const Mat& X, bool reverse,
                   const CellCache& cache, const Mat& dH, LstmCellWeights& gw,
                   Mat& dX) {
    const std::size_t T = X.rows;
    const std::size_t H = w.wh.cols;
    Vec dh_carry(H, 0.0), dc_carry(H, 0.0), dpre(4 * H);
    for (std::size_t s = T; s-- > 0;) {
        const std::size_t t = reverse ? T - 1 - s : s;
        const std::size_t t_prev = reverse ? t + 1 : t - 1;  // valid iff s > 0
        for (std::size_t j = 0; j < H; ++j) {
            const double dh = dH(t, j) + dh_carry[j];
            const double o = cache.go(t, j);
            const double tc = cache.tanhc(t, j);
            const double dc = dc_carry[j] + dh * o * (1.0 - tc * tc);
            const double i = cache.gi(t, j);
            const double f = cache.gf(t, j);
            const double g = cache.gg(t, j);
            const double c_prev = s > 0 ? cache.c(t_prev, j) : 0.0;
            dpre[j] = dc * g * i * (1.0 - i);
            dpre[H + j] = dc * c_prev * f * (1.0 - f);
            dpre[2 * H + j] = dc * i * (1.0 - g * g);
            dpre[3 * H + j] = dh * tc * o * (1.0 - o);
            dc_carry[j] = dc * f;
        }
        const double* x = &X.d[t * X.cols];
        const double* h_prev = s > 0 ? &cache.h.d[t_prev * H] : nullptr;
        std::fill(dh_carry.begin(), dh_carry.end(), 0.0);
        for (std::size_t r = 0; r < 4 * H; ++r) {
            const double dp = dpre[r];
            gw.b[r] += dp;
            double* gwx = &gw.wx.d[r * w.wx.cols];
            for (std::size_t k = 0; k < X.cols; ++k) gwx[k] += dp * x[k];
            if (h_prev) {
                double* gwh = &gw.wh.d[r * H];
                for (std::size_t k = 0; k < H; ++k) gwh[k] += dp * h_prev[k];
            }
            const double* wx = &w.wx.d[r * w.wx.cols];
            double* dxrow = &dX.d[t * dX.cols];
            for (std::size_t k = 0; k < X.cols; ++k) dxrow[k] += dp * wx[k];
            const double* wh = &w.wh.d[r * H];
            for (std::size_t k = 0; k < H; ++k) dh_carry[k] += dp * wh[k];
        }
    }
}

struct MhaCache {
    Mat Q, K, V;             // T x D
    std::vector<Mat> attn;   // per head, T x T softmax rows
    Mat concat;              // T x D
};

Mat add_bias(Mat m, const Vec& b) {
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) m(i, j) += b[j];
    return m;
}

Mat mha_forward_cached(const LstmModel& model, const Mat& X, MhaCache& cache) {
    const std::size_t T = X.rows;
    const std::size_t D = model.dims.model_dim();
    const std::size_t heads = model.dims.heads;
    const std::size_t dh = model.dims.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    cache.Q = Mat(T, D);
    cache.K = Mat(T, D);
    cache.V = Mat(T, D);
    matmul_acc(X, model.wq, cache.Q);
    matmul_acc(X, model.wk, cache.K);
    matmul_acc(X, model.wv, cache.V);
    cache.Q = add_bias(std::move(cache.Q), model.bq);
    cache.K = add_bias(std::move(cache.K), model.bk);
    cache.V = add_bias(std::move(cache.V), model.bv);

    cache.attn.assign(heads, Mat(T, T));
    cache.concat = Mat(T, D);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        Mat& A = cache.attn[h];
        for (std::size_t a = 0; a < T; ++a) {
            double mx = -1e300;
            for (std::size_t b = 0; b < T; ++b) {
                double s = 0.0;
                for (std::size_t k = 0; k < dh; ++k)
                    s += cache.Q(a, off + k) * cache.K(b, off + k);
                s *= scale;
                check_finite(s, "attention scores");
                A(a, b) = s;
                mx = std::max(mx, s);
            }
            double sum = 0.0;
            for (std::size_t b = 0; b < T; ++b) {
                A(a, b) = std::exp(A(a, b) - mx);
                sum += A(a, b);
            }
            for (std::size_t b = 0; b < T; ++b) A(a, b) /= sum;
            for (std::size_t b = 0; b < T; ++b)
                for (std::size_t k = 0; k < dh; ++k)
                    cache.concat(a, off + k) += A(a, b) * cache.V(b, off + k);
        }
    }

    Mat out(T, D);
    matmul_acc(cache.concat, model.wo, out);
    return add_bias(std::move(out), model.bo);
}

// Accumulates parameter grads into g; returns dX.
Mat mha_backward(const LstmModel& model, const Mat& X, const MhaCache& cache,
                 const Mat& dOut, LstmModel& g) {
    const std::size_t T = X.rows;
    const std::size_t D = model.dims.model_dim();
    const std::size_t heads = model.dims.heads;
    const std::size_t dh = model.dims.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // out = concat * wo + bo
    Mat dConcat(T, D);
    matmul_nt_acc(dOut, model.wo, dConcat);
    matmul_tn_acc(cache.concat, dOut, g.wo);
    for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < D; ++j) g.bo[j] += dOut(i, j);

    Mat dQ(T, D), dK(T, D), dV(T, D);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        const Mat& A = cache.attn[h];
        Mat dA(T, T);
        for (std::size_t a = 0; a < T; ++a)
            for (std::size_t b = 0; b < T; ++b) {
                double s = 0.0;
                for (std::size_t k = 0; k < dh; ++k)
                    s += dConcat(a, off + k) * cache.V(b, off + k);
                dA(a, b) = s;
            }
        for (std::size_t b = 0; b < T; ++b)
            for (std::size_t k = 0; k < dh; ++k) {
                double s = 0.0;
                for (std::size_t a = 0; a < T; ++a)
                    s += A(a, b) * dConcat(a, off + k);
                dV(b, off + k) += s;
            }
        // softmax rows
        Mat dS(T, T);
        for (std::size_t a = 0; a < T; ++a) {
            double dot = 0.0;
            for (std::size_t b = 0; b < T; ++b) dot += dA(a, b) * A(a, b);
            for (std::size_t b = 0; b < T; ++b)
                dS(a, b) = A(a, b) * (dA(a, b) - dot);
        }
        for (std::size_t a = 0; a < T; ++a)
            for (std::size_t b = 0; b < T; ++b) {
                const double ds = dS(a, b) * scale;
                if (ds == 0.0) continue;
                for (std::size_t k = 0; k < dh; ++k) {
                    dQ(a, off + k) += ds * cache.K(b, off + k);
                    dK(b, off + k) += ds * cache.Q(a, off + k);
                }
            }
    }

    Mat dX(T, D);
    matmul_nt_acc(dQ, model.wq, dX);
    matmul_nt_acc(dK, model.wk, dX);
    matmul_nt_acc(dV, model.wv, dX);
    matmul_tn_acc(X, dQ, g.wq);
    matmul_tn_acc(X, dK, g.wk);
    matmul_tn_acc(X, dV, g.wv);
    for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < D; ++j) {
            g.bq[j] += dQ(i, j);
            g.bk[j] += dK(i, j);
            g.bv[j] += dV(i, j);
        }
    return dX;
}

struct SeqCache {
    CellCache l0[2], l1[2];
    Mat x1, x2;           // layer outputs, T x 2H
    MhaCache mha;
    Mat attn_out;         // T x D, pre-dropout
    Mat mask;             // dropout mask (already scaled), T x D
    Mat dropped;          // T x D
    Vec logits, probs;    // T
};

void forward_sequence(const LstmModel& model, const Mat& inputs, bool training,
                      SplitMix64& dropout_rng, SeqCache& cache) {
    const std::size_t T = inputs.rows;
    const std::size_t H = model.dims.hidden;
    const std::size_t D = model.dims.model_dim();

    run_cell(model.cells[0][0], inputs, false, cache.l0[0]);
    run_cell(model.cells[0][1], inputs, true, cache.l0[1]);
    cache.x1 = Mat(T, D);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < H; ++j) {
            cache.x1(t, j) = cache.l0[0].h(t, j);
            cache.x1(t, H + j) = cache.l0[1].h(t, j);
        }

    run_cell(model.cells[1][0], cache.x1, false, cache.l1[0]);
    run_cell(model.cells[1][1], cache.x1, true, cache.l1[1]);
    cache.x2 = Mat(T, D);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < H; ++j) {
            cache.x2(t, j) = cache.l1[0].h(t, j);
            cache.x2(t, H + j) = cache.l1[1].h(t, j);
        }

    // residual around attention: without it the attention average drowns
    // the per-frame signal and the head sees a near-constant input
    cache.attn_out = mha_forward_cached(model, cache.x2, cache.mha);
    for (std::size_t i = 0; i < cache.attn_out.d.size(); ++i)
        cache.attn_out.d[i] += cache.x2.d[i];

    // inverted dropout, training only
    cache.mask = Mat(T, D);
    const double rate = training ? model.dropout_rate : 0.0;
    const double keep = 1.0 - rate;
    for (double& m : cache.mask.d)
        m = (rate == 0.0 || dropout_rng.uniform() >= rate) ? 1.0 / keep : 0.0;
    cache.dropped = Mat(T, D);
    for (std::size_t i = 0; i < cache.dropped.d.size(); ++i)
        cache.dropped.d[i] = cache.attn_out.d[i] * cache.mask.d[i];

    cache.logits.resize(T);
    cache.probs.resize(T);
    for (std::size_t t = 0; t < T; ++t) {
        double z = model.head_b[0];
        for (std::size_t j = 0; j < D; ++j)
            z += model.head_w[j] * cache.dropped(t, j);
        check_finite(z, "output head");
        cache.logits[t] = z;
        cache.probs[t] = sigmoid(z);
    }
}

LstmModel zeros_like(const LstmModel& model) {
    LstmModel z = init_lstm(model.dims, 0, model.dropout_rate);
    z.for_each_tensor([](const std::string&, Vec& t) {
        std::fill(t.begin(), t.end(), 0.0);
    });
    return z;
}

// d(mean focal)/d(logit) for one element, given the clamped probability.
double focal_dlogit(double p_raw, bool y, double gamma, double alpha) {
    const double p = std::clamp(p_raw, kProbFloor, 1.0 - kProbFloor);
    if (p != p_raw) return 0.0;  // clamp is flat
    const double pt = y ? p : 1.0 - p;
    const double at = y ? alpha : 1.0 - alpha;
    const double one_m = 1.0 - pt;
    // dL/dpt = -at * (-gamma (1-pt)^(g-1) log pt + (1-pt)^g / pt)
    double dpt;
    if (gamma == 0.0) {
        dpt = -at / pt;
    } else {
        dpt = -at * (-gamma * std::pow(one_m, gamma - 1.0) * std::log(pt) +
                     std::pow(one_m, gamma) / pt);
    }
    const double dp_dz = p_raw * (1.0 - p_raw);
    return dpt * (y ? dp_dz : -dp_dz);
}

}  // namespace

void LstmModel::for_each_tensor(
    const std::function<void(const std::string&, Vec&)>& fn) {
    for (int l = 0; l < 2; ++l)
        for (int d = 0; d < 2; ++d) {
            const std::string base = fmt::format("l{}{}", l, d ? "b" : "f");
            fn(base + ".wx", cells[l][d].wx.d);
            fn(base + ".wh", cells[l][d].wh.d);
            fn(base + ".b", cells[l][d].b);
        }
    fn("attn.wq", wq.d);
    fn("attn.bq", bq);
    fn("attn.wk", wk.d);
    fn("attn.bk", bk);
    fn("attn.wv", wv.d);
    fn("attn.bv", bv);
    fn("attn.wo", wo.d);
    fn("attn.bo", bo);
    fn("head.w", head_w);
    fn("head.b", head_b);
}

void LstmModel::for_each_tensor(
    const std::function<void(const std::string&, const Vec&)>& fn) const {
    const_cast<LstmModel*>(this)->for_each_tensor(
        [&fn](const std::string& name, Vec& t) { fn(name, t); });
}

LstmModel init_lstm(const LstmDims& dims, std::uint64_t seed,
                    double dropout_rate) {
    if (dims.model_dim() % dims.heads != 0)
        throw std::invalid_argument("model dim not divisible by head count");
    LstmModel m;
    m.dims = dims;
    m.dropout_rate = dropout_rate;
    SplitMix64 rng(seed);
    const std::size_t H = dims.hidden;
    const std::size_t D = dims.model_dim();

    auto fill = [&rng](Vec& t, std::size_t fan_in) {
        const double k = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (double& v : t) v = rng.uniform(-k, k);
    };

    for (int l = 0; l < 2; ++l) {
        const std::size_t in = l == 0 ? dims.input : D;
        for (int d = 0; d < 2; ++d) {
            auto& cell = m.cells[l][d];
            cell.wx = Mat(4 * H, in);
            cell.wh = Mat(4 * H, H);
            cell.b.assign(4 * H, 0.0);
            fill(cell.wx.d, in);
            fill(cell.wh.d, H);
            fill(cell.b, H);
            for (std::size_t j = 0; j < H; ++j) cell.b[H + j] += 1.0;  // forget gate
        }
    }
    m.wq = Mat(D, D);
    m.wk = Mat(D, D);
    m.wv = Mat(D, D);
    m.wo = Mat(D, D);
    m.bq.assign(D, 0.0);
    m.bk.assign(D, 0.0);
    m.bv.assign(D, 0.0);
    m.bo.assign(D, 0.0);
    fill(m.wq.d, D);
    fill(m.bq, D);
    fill(m.wk.d, D);
    fill(m.bk, D);
    fill(m.wv.d, D);
    fill(m.bv, D);
    fill(m.wo.d, D);
    fill(m.bo, D);
    m.head_w.assign(D, 0.0);
    fill(m.head_w, D);
    m.head_b.assign(1, 0.0);
    return m;
}

void lstm_cell_forward(const Vec& x, const Vec& h, const Vec& c,
                       const LstmCellWeights& w, Vec& h_out, Vec& c_out) {
    const std::size_t H = w.wh.cols;
    if (x.size() != w.wx.cols || h.size() != H || c.size() != H)
        throw std::invalid_argument("lstm_cell_forward: shape mismatch");
    h_out.resize(H);
    c_out.resize(H);
    for (std::size_t j = 0; j < H; ++j) {
        double pre[4];
        for (int gate = 0; gate < 4; ++gate) {
            const std::size_t r = static_cast<std::size_t>(gate) * H + j;
            double z = w.b[r];
            for (std::size_t k = 0; k < x.size(); ++k) z += w.wx(r, k) * x[k];
            for (std::size_t k = 0; k < H; ++k) z += w.wh(r, k) * h[k];
            pre[gate] = z;
        }
        const double i = sigmoid(pre[0]);
        const double f = sigmoid(pre[1]);
        const double g = std::tanh(pre[2]);
        const double o = sigmoid(pre[3]);
        c_out[j] = f * c[j] + i * g;
        h_out[j] = o * std::tanh(c_out[j]);
    }
}

Mat bilstm_forward(const LstmModel& model, const Mat& seq) {
    if (seq.rows == 0) throw std::invalid_argument("bilstm_forward: empty sequence");
    if (seq.cols != model.dims.input)
        throw std::invalid_argument("bilstm_forward: input dim mismatch");
    CellCache l0f, l0b, l1f, l1b;
    run_cell(model.cells[0][0], seq, false, l0f);
    run_cell(model.cells[0][1], seq, true, l0b);
    const std::size_t H = model.dims.hidden;
    Mat x1(seq.rows, 2 * H);
    for (std::size_t t = 0; t < seq.rows; ++t)
        for (std::size_t j = 0; j < H; ++j) {
            x1(t, j) = l0f.h(t, j);
            x1(t, H + j) = l0b.h(t, j);
        }
    run_cell(model.cells[1][0], x1, false, l1f);
    run_cell(model.cells[1][1], x1, true, l1b);
    Mat x2(seq.rows, 2 * H);
    for (std::size_t t = 0; t < seq.rows; ++t)
        for (std::size_t j = 0; j < H; ++j) {
            x2(t, j) = l1f.h(t, j);
            x2(t, H + j) = l1b.h(t, j);
        }
    return x2;
}

Mat mha_forward(const LstmModel& model, const Mat& X) {
    if (X.cols != model.dims.model_dim())
        throw std::invalid_argument("mha_forward: dim mismatch");
    MhaCache cache;
    return mha_forward_cached(model, X, cache);
}

double focal_loss(const Vec& p, const std::vector<std::uint8_t>& y, double gamma,
                  double alpha) {
    if (p.size() != y.size())
        throw std::invalid_argument("focal_loss: length mismatch");
    if (p.empty()) throw std::invalid_argument("focal_loss: empty input");
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double pc = std::clamp(p[i], kProbFloor, 1.0 - kProbFloor);
        const double pt = y[i] ? pc : 1.0 - pc;
        const double at = y[i] ? alpha : 1.0 - alpha;
        sum += -at * std::pow(1.0 - pt, gamma) * std::log(pt);
    }
    return sum / static_cast<double>(p.size());
}

void adamw_step(Vec& theta, const Vec& grad, Vec& m, Vec& v, std::int64_t t,
                const AdamWConfig& cfg) {
    if (theta.size() != grad.size() || theta.size() != m.size() ||
        theta.size() != v.size())
        throw std::invalid_argument("adamw_step: shape mismatch");
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        theta[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon) +
                    cfg.learning_rate * cfg.weight_decay * theta[i];
    }
}

double lstm_loss(const LstmModel& model, const std::vector<TrainSequence>& batch,
                 double gamma, double alpha, bool training,
                 std::uint64_t dropout_seed) {
    SplitMix64 dropout_rng(dropout_seed);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& seq : batch) {
        SeqCache cache;
        forward_sequence(model, seq.inputs, training, dropout_rng, cache);
        for (std::size_t t = 0; t < cache.probs.size(); ++t) {
            const double pc =
                std::clamp(cache.probs[t], kProbFloor, 1.0 - kProbFloor);
            const double pt = seq.labels[t] ? pc : 1.0 - pc;
            const double at = seq.labels[t] ? alpha : 1.0 - alpha;
            sum += -at * std::pow(1.0 - pt, gamma) * std::log(pt);
        }
        n += cache.probs.size();
    }
    return sum / static_cast<double>(n);
}

std::pair<double, LstmGradients> compute_gradients(
    const LstmModel& model, const std::vector<TrainSequence>& batch, double gamma,
    double alpha, bool training, std::uint64_t dropout_seed) {
    const std::size_t H = model.dims.hidden;
    const std::size_t D = model.dims.model_dim();
    std::size_t total = 0;
    for (const auto& seq : batch) total += seq.inputs.rows;
    if (total == 0) throw std::invalid_argument("compute_gradients: empty batch");

    LstmGradients grads{zeros_like(model)};
    LstmModel& g = grads.g;
    SplitMix64 dropout_rng(dropout_seed);
    double loss = 0.0;

    for (const auto& seq : batch) {
        const std::size_t T = seq.inputs.rows;
        if (seq.labels.size() != T)
            throw std::invalid_argument("label length mismatch");
        SeqCache cache;
        forward_sequence(model, seq.inputs, training, dropout_rng, cache);

        Vec dlogit(T);
        for (std::size_t t = 0; t < T; ++t) {
            const double pc =
                std::clamp(cache.probs[t], kProbFloor, 1.0 - kProbFloor);
            const double pt = seq.labels[t] ? pc : 1.0 - pc;
            const double at = seq.labels[t] ? alpha : 1.0 - alpha;
            loss += -at * std::pow(1.0 - pt, gamma) * std::log(pt);
            dlogit[t] = focal_dlogit(cache.probs[t], seq.labels[t] != 0, gamma,
                                     alpha) /
                        static_cast<double>(total);
        }

        // head
        Mat dDropped(T, D);
        for (std::size_t t = 0; t < T; ++t) {
            g.head_b[0] += dlogit[t];
            for (std::size_t j = 0; j < D; ++j) {
                g.head_w[j] += dlogit[t] * cache.dropped(t, j);
                dDropped(t, j) = dlogit[t] * model.head_w[j];
            }
        }
        // dropout mask
        Mat dAttnOut(T, D);
        for (std::size_t i = 0; i < dAttnOut.d.size(); ++i)
            dAttnOut.d[i] = dDropped.d[i] * cache.mask.d[i];

        Mat dX2 = mha_backward(model, cache.x2, cache.mha, dAttnOut, g);
        for (std::size_t i = 0; i < dX2.d.size(); ++i)
            dX2.d[i] += dAttnOut.d[i];  // residual branch

        // split into layer-1 direction blocks
        Mat dH1f(T, H), dH1b(T, H);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t j = 0; j < H; ++j) {
                dH1f(t, j) = dX2(t, j);
                dH1b(t, j) = dX2(t, H + j);
            }
        Mat dX1(T, D);
        cell_backward(model.cells[1][0], cache.x1, false, cache.l1[0], dH1f,
                      g.cells[1][0], dX1);
        cell_backward(model.cells[1][1], cache.x1, true, cache.l1[1], dH1b,
                      g.cells[1][1], dX1);

        Mat dH0f(T, H), dH0b(T, H);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t j = 0; j < H; ++j) {
                dH0f(t, j) = dX1(t, j);
                dH0b(t, j) = dX1(t, H + j);
            }
        Mat dX0(T, model.dims.input);
        cell_backward(model.cells[0][0], seq.inputs, false, cache.l0[0], dH0f,
                      g.cells[0][0], dX0);
        cell_backward(model.cells[0][1], seq.inputs, true, cache.l0[1], dH0b,
                      g.cells[0][1], dX0);
    }
    return {loss / static_cast<double>(total), std::move(grads)};
}

namespace {

std::vector<TrainSequence> chunk_recordings(
    const std::vector<TrainSequence>& recordings, std::size_t seq_len) {
    std::vector<TrainSequence> chunks;
    for (const auto& rec : recordings) {
        for (std::size_t start = 0; start < rec.inputs.rows; start += seq_len) {
            const std::size_t len = std::min(seq_len, rec.inputs.rows - start);
            TrainSequence chunk;
            chunk.inputs = Mat(len, rec.inputs.cols);
            for (std::size_t t = 0; t < len; ++t)
                for (std::size_t j = 0; j < rec.inputs.cols; ++j)
                    chunk.inputs(t, j) = rec.inputs(start + t, j);
            chunk.labels.assign(rec.labels.begin() + static_cast<long>(start),
                                rec.labels.begin() + static_cast<long>(start + len));
            chunks.push_back(std::move(chunk));
        }
    }
    return chunks;
}

}  // namespace

std::pair<LstmModel, std::vector<EpochStats>> train_lstm(
    const std::vector<TrainSequence>& recordings, const TrainConfig& cfg,
    const LstmDims& dims) {
    if (recordings.empty())
        throw std::invalid_argument("train_lstm: no training sequences");
    bool any_pos = false;
    for (const auto& rec : recordings)
        for (std::uint8_t y : rec.labels) any_pos |= (y != 0);
    if (!any_pos)
        throw std::invalid_argument("train_lstm: no positive labels in training data");

    LstmModel model = init_lstm(dims, cfg.seed, cfg.dropout_rate);
    std::vector<EpochStats> history;
    if (cfg.epochs == 0) return {std::move(model), std::move(history)};

    auto chunks = chunk_recordings(recordings, cfg.seq_len);
    SplitMix64 split_rng(cfg.seed ^ 0x5eedu);
    std::vector<std::size_t> order(chunks.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle(order, split_rng);
    const auto n_val = static_cast<std::size_t>(
        cfg.val_fraction * static_cast<double>(chunks.size()));
    std::vector<std::size_t> val_idx(order.begin(),
                                     order.begin() + static_cast<long>(n_val));
    std::vector<std::size_t> train_idx(order.begin() + static_cast<long>(n_val),
                                       order.end());
    if (train_idx.empty()) throw std::invalid_argument("train_lstm: no train chunks");
    // with nothing held out, the history's val columns mirror train
    if (val_idx.empty()) val_idx = train_idx;

    AdamWState state{zeros_like(model), zeros_like(model), 0};
    AdamWConfig opt{cfg.learning_rate, cfg.weight_decay, cfg.beta1, cfg.beta2,
                    cfg.epsilon};

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        SplitMix64 epoch_rng(cfg.seed + 0x9e37u * static_cast<std::uint64_t>(epoch + 1));
        shuffle(train_idx, epoch_rng);

        double loss_sum = 0.0;
        std::size_t frame_sum = 0;
        for (std::size_t begin = 0; begin < train_idx.size();
             begin += cfg.batch_size) {
            const std::size_t end =
                std::min(begin + cfg.batch_size, train_idx.size());
            std::vector<TrainSequence> batch;
            std::size_t batch_frames = 0;
            for (std::size_t i = begin; i < end; ++i) {
                batch.push_back(chunks[train_idx[i]]);
                batch_frames += batch.back().inputs.rows;
            }
            const std::uint64_t dropout_seed = epoch_rng.next();
            auto [loss, grads] = compute_gradients(model, batch, cfg.gamma,
                                                   cfg.alpha, true, dropout_seed);
            loss_sum += loss * static_cast<double>(batch_frames);
            frame_sum += batch_frames;

            ++state.t;
            std::vector<Vec*> params, gvecs, ms, vs;
            model.for_each_tensor([&params](const std::string&, Vec& t) {
                params.push_back(&t);
            });
            grads.g.for_each_tensor([&gvecs](const std::string&, Vec& t) {
                gvecs.push_back(&t);
            });
            state.m.for_each_tensor([&ms](const std::string&, Vec& t) {
                ms.push_back(&t);
            });
            state.v.for_each_tensor([&vs](const std::string&, Vec& t) {
                vs.push_back(&t);
            });
            for (std::size_t i = 0; i < params.size(); ++i)
                adamw_step(*params[i], *gvecs[i], *ms[i], *vs[i], state.t, opt);
        }

        // validation pass, dropout disabled
        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = loss_sum / static_cast<double>(frame_sum);
        double val_loss_sum = 0.0;
        std::size_t val_frames = 0, tp = 0, fp = 0, tn = 0, fn = 0, pos_pred = 0;
        for (std::size_t idx : val_idx) {
            const auto& seq = chunks[idx];
            SplitMix64 no_dropout(0);
            SeqCache cache;
            forward_sequence(model, seq.inputs, false, no_dropout, cache);
            for (std::size_t t = 0; t < cache.probs.size(); ++t) {
                const double pc =
                    std::clamp(cache.probs[t], kProbFloor, 1.0 - kProbFloor);
                const double pt = seq.labels[t] ? pc : 1.0 - pc;
                const double at = seq.labels[t] ? cfg.alpha : 1.0 - cfg.alpha;
                val_loss_sum += -at * std::pow(1.0 - pt, cfg.gamma) * std::log(pt);
                const bool pred = cache.probs[t] >= 0.5;
                pos_pred += pred;
                if (seq.labels[t]) (pred ? tp : fn)++;
                else (pred ? fp : tn)++;
            }
            val_frames += cache.probs.size();
        }
        stats.val_loss = val_loss_sum / static_cast<double>(val_frames);
        stats.sensitivity = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
        stats.specificity = tn + fp > 0 ? static_cast<double>(tn) / (tn + fp) : 0.0;
        stats.balanced_acc = 0.5 * (stats.sensitivity + stats.specificity);
        stats.pos_ratio = static_cast<double>(pos_pred) / val_frames;
        history.push_back(stats);
    }
    return {std::move(model), std::move(history)};
}

FrameStream predict_lstm(const LstmModel& model, const FrameStream& vap,
                         const FrameStream& llm, std::size_t seq_len) {
    if (vap.values.size() != llm.values.size())
        throw std::invalid_argument("predict_lstm: stream length mismatch");
    FrameStream out;
    out.source_id = "lstm";
    const std::size_t n = vap.values.size();
    out.values.resize(n);
    SplitMix64 no_dropout(0);
    for (std::size_t start = 0; start < n; start += seq_len) {
        const std::size_t len = std::min(seq_len, n - start);
        Mat inputs(len, 2);
        for (std::size_t t = 0; t < len; ++t) {
            inputs(t, 0) = vap.values[start + t];
            inputs(t, 1) = llm.values[start + t];
        }
        SeqCache cache;
        forward_sequence(model, inputs, false, no_dropout, cache);
        for (std::size_t t = 0; t < len; ++t) out.values[start + t] = cache.probs[t];
    }
    return out;
}

namespace {

template <typename T>
void write_pod(std::ofstream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    return value;
}

}  // namespace

void save_lstm(const LstmModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", path));
    out.write("LSTMv1", 6);
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(model.dims.input));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(model.dims.hidden));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(model.dims.heads));
    write_pod<double>(out, model.dropout_rate);

    std::vector<std::pair<std::string, const Vec*>> tensors;
    model.for_each_tensor([&tensors](const std::string& name, const Vec& t) {
        tensors.emplace_back(name, &t);
    });
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<long>(name.size()));
        write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(t->size()));
    }
    for (const auto& [name, t] : tensors)
        out.write(reinterpret_cast<const char*>(t->data()),
                  static_cast<long>(t->size() * sizeof(double)));
}

LstmModel load_lstm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(fmt::format("cannot open {}", path));
    char magic[6];
    in.read(magic, 6);
    if (std::memcmp(magic, "LSTMv1", 6) != 0)
        throw std::runtime_error(fmt::format("{}: not an LSTMv1 file", path));
    LstmDims dims;
    dims.input = read_pod<std::uint32_t>(in);
    dims.hidden = read_pod<std::uint32_t>(in);
    dims.heads = read_pod<std::uint32_t>(in);
    const double dropout = read_pod<double>(in);
    LstmModel model = init_lstm(dims, 0, dropout);

    const auto n = read_pod<std::uint32_t>(in);
    std::vector<std::pair<std::string, std::uint64_t>> table;
    for (std::uint32_t i = 0; i < n; ++i) {
        const auto len = read_pod<std::uint32_t>(in);
        std::string name(len, '\0');
        in.read(name.data(), len);
        table.emplace_back(std::move(name), read_pod<std::uint64_t>(in));
    }

    std::vector<std::pair<std::string, Vec*>> tensors;
    model.for_each_tensor([&tensors](const std::string& name, Vec& t) {
        tensors.emplace_back(name, &t);
    });
    if (tensors.size() != table.size())
        throw std::runtime_error(fmt::format("{}: tensor count mismatch", path));
    for (std::size_t i = 0; i < table.size(); ++i) {
        if (table[i].first != tensors[i].first ||
            table[i].second != tensors[i].second->size())
            throw std::runtime_error(
                fmt::format("{}: shape table mismatch at {}", path, table[i].first));
        in.read(reinterpret_cast<char*>(tensors[i].second->data()),
                static_cast<long>(table[i].second * sizeof(double)));
    }
    if (!in) throw std::runtime_error(fmt::format("{}: truncated file", path));
    return model;
}

void save_history(const std::vector<EpochStats>& history, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", path));
    out << "epoch,train_loss,val_loss,balanced_acc,sensitivity,specificity,pos_ratio\n";
    for (const auto& e : history)
        out << fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n",
                           e.epoch, e.train_loss, e.val_loss, e.balanced_acc,
                           e.sensitivity, e.specificity, e.pos_ratio);
}

}  // namespace trpfuse
