#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "trpfuse/lstm.hpp"
#include "trpfuse/rng.hpp"

using namespace trpfuse;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

LstmCellWeights zero_cell(std::size_t hidden, std::size_t input) {
    LstmCellWeights w;
    w.wx = Mat(4 * hidden, input);
    w.wh = Mat(4 * hidden, hidden);
    w.b.assign(4 * hidden, 0.0);
    return w;
}

void zero_all(LstmModel& model) {
    model.for_each_tensor([](const std::string&, Vec& t) {
        std::fill(t.begin(), t.end(), 0.0);
    });
}

void set_identity(Mat& m) {
    std::fill(m.d.begin(), m.d.end(), 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) m(i, i) = 1.0;
}

Mat random_seq(std::size_t T, std::size_t cols, SplitMix64& rng) {
    Mat seq(T, cols);
    for (double& v : seq.d) v = rng.uniform(-1.0, 1.0);
    return seq;
}

// label=1 iff both streams exceed 0.8 somewhere within +/- 5 frames;
// inputs keep a margin gap around the threshold so the task is clean
std::vector<TrainSequence> and_task(std::size_t n_rec, std::size_t frames,
                                    std::uint64_t seed) {
    SplitMix64 rng(seed);
    std::vector<TrainSequence> recs;
    for (std::size_t r = 0; r < n_rec; ++r) {
        TrainSequence rec;
        rec.inputs = Mat(frames, 2);
        for (double& v : rec.inputs.d) {
            v = rng.uniform();
            if (v > 0.7 && v < 0.9) v += v < 0.8 ? -0.2 : 0.1;
        }
        rec.labels.assign(frames, 0);
        for (std::size_t t = 0; t < frames; ++t) {
            const std::size_t lo = t >= 5 ? t - 5 : 0;
            const std::size_t hi = std::min(frames - 1, t + 5);
            for (std::size_t s = lo; s <= hi; ++s)
                if (rec.inputs(s, 0) > 0.8 && rec.inputs(s, 1) > 0.8) {
                    rec.labels[t] = 1;
                    break;
                }
        }
        recs.push_back(std::move(rec));
    }
    return recs;
}

}  // namespace

TEST_CASE("lstm cell zero fixed point") {
    const auto w = zero_cell(3, 2);
    Vec x(2, 0.0), h(3, 0.0), c(3, 0.0), h2, c2;
    lstm_cell_forward(x, h, c, w, h2, c2);
    for (double v : h2) CHECK(v == 0.0);
    for (double v : c2) CHECK(v == 0.0);
}

TEST_CASE("scalar toy cell matches the hand-evaluated gate equations") {
    auto w = zero_cell(1, 1);
    w.b[0] = 100.0;  // i
    w.b[1] = 100.0;  // f
    w.b[2] = 1.0;    // g preactivation, so g = tanh(1)
    w.b[3] = 100.0;  // o
    Vec x(1, 0.0), h(1, 0.0), c(1, 0.0), h2, c2;
    lstm_cell_forward(x, h, c, w, h2, c2);
    CHECK(c2[0] == doctest::Approx(std::tanh(1.0)).epsilon(1e-9));
    CHECK(h2[0] == doctest::Approx(std::tanh(std::tanh(1.0))).epsilon(1e-9));
    CHECK(c2[0] == doctest::Approx(0.7616).epsilon(1e-4));
    CHECK(h2[0] == doctest::Approx(0.6420).epsilon(1e-4));
}

TEST_CASE("cell output shapes follow the hidden size") {
    const auto model = init_lstm({}, 1);
    Vec x(2, 0.1), h(128, 0.0), c(128, 0.0), h2, c2;
    lstm_cell_forward(x, h, c, model.cells[0][0], h2, c2);
    CHECK(h2.size() == 128);
    CHECK(c2.size() == 128);
    CHECK_THROWS_AS(lstm_cell_forward(Vec(3, 0.0), h, c, model.cells[0][0], h2, c2),
                    std::invalid_argument);
}

TEST_CASE("bilstm output shape and zero propagation") {
    auto model = init_lstm({}, 2);
    Mat seq(1, 2);
    seq(0, 0) = 0.3;
    seq(0, 1) = 0.7;
    auto out = bilstm_forward(model, seq);
    CHECK(out.rows == 1);
    CHECK(out.cols == 256);

    zero_all(model);
    SplitMix64 rng(3);
    auto zout = bilstm_forward(model, random_seq(4, 2, rng));
    for (double v : zout.d) CHECK(v == 0.0);

    CHECK_THROWS_AS(bilstm_forward(model, Mat(0, 2)), std::invalid_argument);
}

TEST_CASE("bilstm time reversal with swapped direction blocks") {
    const LstmDims dims{2, 5, 2};
    const auto model = init_lstm(dims, 11);
    SplitMix64 rng(13);
    const auto seq = random_seq(3, 2, rng);
    const auto fwd = bilstm_forward(model, seq);

    // swap fwd/bwd cells; layer 2 also needs its wx column blocks swapped
    // because its concatenated input swaps halves under reversal
    auto swapped = model;
    for (int l = 0; l < 2; ++l)
        std::swap(swapped.cells[l][0], swapped.cells[l][1]);
    const std::size_t H = dims.hidden;
    for (int d = 0; d < 2; ++d) {
        auto& wx = swapped.cells[1][d].wx;
        for (std::size_t r = 0; r < wx.rows; ++r)
            for (std::size_t j = 0; j < H; ++j) std::swap(wx(r, j), wx(r, H + j));
    }
    Mat rev(seq.rows, seq.cols);
    for (std::size_t t = 0; t < seq.rows; ++t)
        for (std::size_t j = 0; j < seq.cols; ++j)
            rev(t, j) = seq(seq.rows - 1 - t, j);
    const auto back = bilstm_forward(swapped, rev);
    for (std::size_t t = 0; t < seq.rows; ++t)
        for (std::size_t j = 0; j < 2 * H; ++j) {
            const std::size_t jj = j < H ? j + H : j - H;
            CHECK(back(t, j) ==
                  doctest::Approx(fwd(seq.rows - 1 - t, jj)).epsilon(1e-12));
        }
}

TEST_CASE("single-key attention reduces to the projected value row") {
    const LstmDims dims{2, 4, 2};  // D = 8
    auto model = init_lstm(dims, 5);
    set_identity(model.wo);
    std::fill(model.bo.begin(), model.bo.end(), 0.0);
    std::fill(model.wv.d.begin(), model.wv.d.end(), 0.0);
    for (std::size_t i = 0; i < 8; ++i) model.wv(i, i) = 0.5 + 0.1 * i;
    for (std::size_t i = 0; i < 8; ++i) model.bv[i] = 0.01 * i;

    SplitMix64 rng(7);
    Mat X = random_seq(1, 8, rng);
    const auto out = mha_forward(model, X);
    REQUIRE(out.rows == 1);
    for (std::size_t j = 0; j < 8; ++j)
        CHECK(out(0, j) ==
              doctest::Approx(X(0, j) * (0.5 + 0.1 * j) + 0.01 * j).epsilon(1e-12));
}

TEST_CASE("zero queries and keys give uniform attention") {
    const LstmDims dims{2, 4, 2};
    auto model = init_lstm(dims, 5);
    std::fill(model.wq.d.begin(), model.wq.d.end(), 0.0);
    std::fill(model.wk.d.begin(), model.wk.d.end(), 0.0);
    set_identity(model.wv);
    std::fill(model.bv.begin(), model.bv.end(), 0.0);
    set_identity(model.wo);
    std::fill(model.bo.begin(), model.bo.end(), 0.0);

    SplitMix64 rng(9);
    Mat X = random_seq(6, 8, rng);
    const auto out = mha_forward(model, X);
    for (std::size_t j = 0; j < 8; ++j) {
        double mean = 0.0;
        for (std::size_t t = 0; t < 6; ++t) mean += X(t, j);
        mean /= 6.0;
        for (std::size_t t = 0; t < 6; ++t)
            CHECK(out(t, j) == doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("attention rows are normalized: a constant value column passes through") {
    const LstmDims dims{2, 4, 2};
    auto model = init_lstm(dims, 17);  // random Q and K stay in place
    set_identity(model.wv);
    std::fill(model.bv.begin(), model.bv.end(), 0.0);
    set_identity(model.wo);
    std::fill(model.bo.begin(), model.bo.end(), 0.0);

    SplitMix64 rng(19);
    Mat X = random_seq(7, 8, rng);
    for (std::size_t t = 0; t < 7; ++t) X(t, 3) = 3.5;
    const auto out = mha_forward(model, X);
    for (std::size_t t = 0; t < 7; ++t)
        CHECK(out(t, 3) == doctest::Approx(3.5).epsilon(1e-12));

    CHECK_THROWS_AS(mha_forward(model, Mat(2, 7)), std::invalid_argument);
}

TEST_CASE("focal loss hand-evaluated values") {
    CHECK(focal_loss({0.5}, {1}) ==
          doctest::Approx(0.75 * 0.125 * std::log(2.0)).epsilon(1e-12));
    CHECK(focal_loss({0.5}, {1}) == doctest::Approx(0.064983).epsilon(1e-4));
    CHECK(focal_loss({1.0}, {1}) == doctest::Approx(0.0).epsilon(1e-5));
    CHECK_THROWS_AS(focal_loss({0.5}, {1, 0}), std::invalid_argument);
    CHECK_THROWS_AS(focal_loss({}, {}), std::invalid_argument);
}

TEST_CASE("focal loss with gamma 0 alpha 0.5 is half the cross-entropy") {
    SplitMix64 rng(21);
    for (int i = 0; i < 1000; ++i) {
        const double p = rng.uniform(0.01, 0.99);
        const std::uint8_t y = rng.below(2) ? 1 : 0;
        const double bce = y ? -std::log(p) : -std::log(1.0 - p);
        CHECK(focal_loss({p}, {y}, 0.0, 0.5) ==
              doctest::Approx(0.5 * bce).epsilon(1e-12));
    }
}

TEST_CASE("focal loss is non-negative and decreasing in p_t") {
    double prev = 1e300;
    for (double p = 0.05; p < 1.0; p += 0.05) {
        const double loss = focal_loss({p}, {1});
        CHECK(loss >= 0.0);
        CHECK(loss < prev);
        prev = loss;
    }
}

TEST_CASE("adamw single step matches the hand evaluation") {
    Vec theta{1.0}, grad{1.0}, m{0.0}, v{0.0};
    adamw_step(theta, grad, m, v, 1, {});
    // m_hat = v_hat = 1: theta' = 1 - lr/(1+eps) - lr*wd
    CHECK(theta[0] == doctest::Approx(0.998990).epsilon(1e-6));

    Vec t0{0.0}, g0{0.0}, m0{0.0}, v0{0.0};
    adamw_step(t0, g0, m0, v0, 1, {});
    CHECK(t0[0] == 0.0);
}

TEST_CASE("adamw with zero weight decay is plain adam") {
    SplitMix64 rng(23);
    Vec theta(8), grad(8), m(8, 0.0), v(8, 0.0);
    for (auto* vec : {&theta, &grad})
        for (double& x : *vec) x = rng.uniform(-2.0, 2.0);
    auto theta2 = theta;
    auto m2 = m, v2 = v;
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    adamw_step(theta2, grad, m2, v2, 3, cfg);
    for (std::size_t i = 0; i < 8; ++i) {
        const double mm = (1 - cfg.beta1) * grad[i];
        const double vv = (1 - cfg.beta2) * grad[i] * grad[i];
        const double mh = mm / (1 - std::pow(cfg.beta1, 3));
        const double vh = vv / (1 - std::pow(cfg.beta2, 3));
        const double want = theta[i] - cfg.learning_rate * mh / (std::sqrt(vh) + cfg.epsilon);
        CHECK(theta2[i] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("adamw with beta1=beta2=0 is a sign-like step") {
    Vec theta{2.0}, grad{-0.4}, m{0.0}, v{0.0};
    AdamWConfig cfg;
    cfg.beta1 = 0.0;
    cfg.beta2 = 0.0;
    cfg.weight_decay = 0.0;
    adamw_step(theta, grad, m, v, 1, cfg);
    const double want = 2.0 + cfg.learning_rate * 0.4 / (0.4 + cfg.epsilon);
    CHECK(theta[0] == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("analytic gradients match central finite differences") {
    for (std::uint64_t seed : {41ull, 42ull}) {
        auto model = init_lstm({2, 4, 2}, seed);
        SplitMix64 rng(seed + 100);
        std::vector<TrainSequence> batch;
        for (int s = 0; s < 2; ++s) {
            TrainSequence seq;
            seq.inputs = random_seq(5, 2, rng);
            seq.labels.assign(5, 0);
            for (auto& l : seq.labels) l = rng.below(2) ? 1 : 0;
            batch.push_back(std::move(seq));
        }
        const std::uint64_t drop_seed = seed * 7 + 1;
        auto [loss, grads] =
            compute_gradients(model, batch, 3.0, 0.75, true, drop_seed);
        CHECK(std::isfinite(loss));

        std::vector<Vec*> params, analytic;
        model.for_each_tensor(
            [&params](const std::string&, Vec& t) { params.push_back(&t); });
        grads.g.for_each_tensor(
            [&analytic](const std::string&, Vec& t) { analytic.push_back(&t); });
        REQUIRE(params.size() == analytic.size());

        const double h = 1e-4;
        for (std::size_t p = 0; p < params.size(); ++p) {
            Vec& tensor = *params[p];
            for (std::size_t i = 0; i < tensor.size(); ++i) {
                const double saved = tensor[i];
                tensor[i] = saved + h;
                const double up = lstm_loss(model, batch, 3.0, 0.75, true, drop_seed);
                tensor[i] = saved - h;
                const double dn = lstm_loss(model, batch, 3.0, 0.75, true, drop_seed);
                tensor[i] = saved;
                const double fd = (up - dn) / (2.0 * h);
                const double an = (*analytic[p])[i];
                CHECK(std::fabs(an - fd) <=
                      1e-4 * std::max({std::fabs(an), std::fabs(fd), 1e-4}));
            }
        }
    }
}

TEST_CASE("gradient of a duplicated batch equals the single-batch gradient") {
    auto model = init_lstm({2, 4, 2}, 51);
    SplitMix64 rng(52);
    TrainSequence seq;
    seq.inputs = random_seq(6, 2, rng);
    seq.labels = {0, 1, 0, 0, 1, 1};
    auto [l1, g1] = compute_gradients(model, {seq}, 3.0, 0.75, false, 0);
    auto [l2, g2] = compute_gradients(model, {seq, seq}, 3.0, 0.75, false, 0);
    CHECK(l1 == doctest::Approx(l2).epsilon(1e-12));
    std::vector<const Vec*> a, b;
    g1.g.for_each_tensor([&a](const std::string&, const Vec& t) { a.push_back(&t); });
    g2.g.for_each_tensor([&b](const std::string&, const Vec& t) { b.push_back(&t); });
    for (std::size_t p = 0; p < a.size(); ++p)
        for (std::size_t i = 0; i < a[p]->size(); ++i)
            CHECK((*a[p])[i] == doctest::Approx((*b[p])[i]).epsilon(1e-12));
}

TEST_CASE("dropout at rate zero is the identity") {
    auto model = init_lstm({2, 4, 2}, 61, 0.0);
    SplitMix64 rng(62);
    TrainSequence seq;
    seq.inputs = random_seq(8, 2, rng);
    seq.labels.assign(8, 0);
    seq.labels[3] = 1;
    const double train_loss = lstm_loss(model, {seq}, 3.0, 0.75, true, 99);
    const double infer_loss = lstm_loss(model, {seq}, 3.0, 0.75, false, 0);
    CHECK(train_loss == infer_loss);
}

TEST_CASE("training is deterministic per seed") {
    const auto recs = and_task(2, 300, 71);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.seed = 7;
    cfg.batch_size = 2;
    cfg.seq_len = 50;
    const LstmDims dims{2, 4, 2};
    auto [m1, h1] = train_lstm(recs, cfg, dims);
    auto [m2, h2] = train_lstm(recs, cfg, dims);
    std::vector<const Vec*> a, b;
    m1.for_each_tensor([&a](const std::string&, const Vec& t) { a.push_back(&t); });
    m2.for_each_tensor([&b](const std::string&, const Vec& t) { b.push_back(&t); });
    for (std::size_t p = 0; p < a.size(); ++p) CHECK(*a[p] == *b[p]);
    REQUIRE(h1.size() == h2.size());
    for (std::size_t e = 0; e < h1.size(); ++e)
        CHECK(h1[e].train_loss == h2[e].train_loss);
}

TEST_CASE("zero epochs returns the initial model with empty history") {
    const auto recs = and_task(1, 200, 73);
    TrainConfig cfg;
    cfg.epochs = 0;
    auto [model, history] = train_lstm(recs, cfg, {2, 4, 2});
    CHECK(history.empty());
    auto fresh = init_lstm({2, 4, 2}, cfg.seed);
    std::vector<const Vec*> a, b;
    model.for_each_tensor([&a](const std::string&, const Vec& t) { a.push_back(&t); });
    fresh.for_each_tensor([&b](const std::string&, const Vec& t) { b.push_back(&t); });
    for (std::size_t p = 0; p < a.size(); ++p) CHECK(*a[p] == *b[p]);
}

TEST_CASE("training rejects data without positive labels") {
    TrainSequence seq;
    seq.inputs = Mat(50, 2);
    seq.labels.assign(50, 0);
    TrainConfig cfg;
    cfg.epochs = 1;
    CHECK_THROWS_AS(train_lstm({seq}, cfg, {2, 4, 2}), std::invalid_argument);
    CHECK_THROWS_AS(train_lstm({}, cfg, {2, 4, 2}), std::invalid_argument);
}

TEST_CASE("the conjunction task is learnable within 20 epochs") {
    const auto recs = and_task(4, 2500, 81);
    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.seed = 5;
    cfg.batch_size = 4;
    cfg.learning_rate = 0.01;
    const LstmDims dims{2, 16, 2};
    auto [model, history] = train_lstm(recs, cfg, dims);
    REQUIRE(history.size() == 20);
    double best = 0.0;
    for (const auto& e : history) best = std::max(best, e.balanced_acc);
    CHECK(best > 0.9);

    // held-out data from the same generator, scored frame-wise at 0.5
    const auto held = and_task(1, 1500, 97);
    FrameStream vap, llm;
    for (std::size_t t = 0; t < 1500; ++t) {
        vap.values.push_back(held[0].inputs(t, 0));
        llm.values.push_back(held[0].inputs(t, 1));
    }
    auto pred = predict_lstm(model, vap, llm, cfg.seq_len);
    std::size_t tp = 0, tn = 0, np = 0, nn = 0;
    for (std::size_t t = 0; t < 1500; ++t) {
        if (held[0].labels[t]) {
            ++np;
            if (pred.values[t] >= 0.5) ++tp;
        } else {
            ++nn;
            if (pred.values[t] < 0.5) ++tn;
        }
    }
    const double bal = 0.5 * (double(tp) / double(np) + double(tn) / double(nn));
    CHECK(bal > 0.9);
}

TEST_CASE("predict_lstm output length, range, and repeatability") {
    auto model = init_lstm({2, 4, 2}, 91);
    SplitMix64 rng(92);
    FrameStream vap, llm;
    for (int i = 0; i < 237; ++i) {
        vap.values.push_back(rng.uniform());
        llm.values.push_back(rng.uniform());
    }
    auto p1 = predict_lstm(model, vap, llm);
    CHECK(p1.values.size() == 237);
    for (double v : p1.values) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    auto p2 = predict_lstm(model, vap, llm);
    CHECK(p1.values == p2.values);  // no dropout at inference

    FrameStream shorter = llm;
    shorter.values.pop_back();
    CHECK_THROWS_AS(predict_lstm(model, vap, shorter), std::invalid_argument);
}

TEST_CASE("a zeroed output head predicts 0.5 everywhere") {
    auto model = init_lstm({2, 4, 2}, 93);
    std::fill(model.head_w.begin(), model.head_w.end(), 0.0);
    model.head_b[0] = 0.0;
    FrameStream vap, llm;
    vap.values.assign(30, 0.4);
    llm.values.assign(30, 0.6);
    auto pred = predict_lstm(model, vap, llm);
    for (double v : pred.values) CHECK(v == 0.5);
}

TEST_CASE("model file round-trips bitwise") {
    auto model = init_lstm({2, 6, 3}, 95, 0.25);
    const auto path = tmp_path("trpfuse_lstm.bin");
    save_lstm(model, path);
    auto loaded = load_lstm(path);
    CHECK(loaded.dims.hidden == 6);
    CHECK(loaded.dims.heads == 3);
    CHECK(loaded.dropout_rate == 0.25);
    std::vector<const Vec*> a, b;
    model.for_each_tensor([&a](const std::string&, const Vec& t) { a.push_back(&t); });
    loaded.for_each_tensor([&b](const std::string&, const Vec& t) { b.push_back(&t); });
    REQUIRE(a.size() == b.size());
    for (std::size_t p = 0; p < a.size(); ++p) CHECK(*a[p] == *b[p]);

    std::ofstream(path, std::ios::binary) << "NOTLSTM";
    CHECK_THROWS_AS(load_lstm(path), std::runtime_error);
}

TEST_CASE("history CSV carries the panel columns") {
    std::vector<EpochStats> history = {{1, 0.5, 0.6, 0.7, 0.8, 0.6, 0.3}};
    const auto path = tmp_path("trpfuse_history.csv");
    save_history(history, path);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header ==
          "epoch,train_loss,val_loss,balanced_acc,sensitivity,specificity,pos_ratio");
    std::string row;
    std::getline(in, row);
    CHECK(row.substr(0, 2) == "1,");
}
