#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "trpfuse/rng.hpp"
#include "trpfuse/timeline.hpp"

namespace trpfuse {

using Vec = std::vector<double>;

// Row-major dense matrix; all training math is 64-bit.
struct Mat {
    std::size_t rows = 0, cols = 0;
    Vec d;

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), d(r * c, 0.0) {}
    double& operator()(std::size_t i, std::size_t j) { return d[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return d[i * cols + j]; }
};

struct LstmDims {
    std::size_t input = 2;
    std::size_t hidden = 128;
    std::size_t heads = 4;

    std::size_t model_dim() const { return 2 * hidden; }  // fwd + bwd concat
    std::size_t head_dim() const { return model_dim() / heads; }
};

// Gate layout in the 4H dimension: [i, f, g, o].
struct LstmCellWeights {
    Mat wx;  // 4H x In
    Mat wh;  // 4H x H
    Vec b;   // 4H
};

struct LstmModel {
    LstmDims dims;
    double dropout_rate = 0.3;
    LstmCellWeights cells[2][2];  // [layer][direction], direction 0=fwd 1=bwd
    Mat wq, wk, wv, wo;           // D x D attention projections
    Vec bq, bk, bv, bo;           // D
    Vec head_w;                   // D
    Vec head_b;                   // 1

    // Applies fn(name, tensor) to every parameter tensor, in a fixed order.
    void for_each_tensor(const std::function<void(const std::string&, Vec&)>& fn);
    void for_each_tensor(
        const std::function<void(const std::string&, const Vec&)>& fn) const;
};

struct TrainConfig {
    double gamma = 3.0;
    double alpha = 0.75;
    double learning_rate = 1e-3;
    double weight_decay = 0.01;
    std::size_t batch_size = 32;
    std::size_t seq_len = 100;
    int epochs = 10;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double dropout_rate = 0.3;
    double val_fraction = 0.2;  // chunks held out for the history's val columns
};

struct AdamWState {
    LstmModel m;  // first moments, shaped like the model
    LstmModel v;  // second moments
    std::int64_t t = 0;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double balanced_acc = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
    double pos_ratio = 0.0;
};

// One training chunk: per-frame (vap, llm) inputs with binary labels.
struct TrainSequence {
    Mat inputs;                     // T x 2
    std::vector<std::uint8_t> labels;  // T
};

struct LstmGradients {
    LstmModel g;  // same shapes as the model, holding d(loss)/d(param)
};

// uniform(-k, k) with k = 1/sqrt(fan_in); forget-gate bias +1
LstmModel init_lstm(const LstmDims& dims, std::uint64_t seed,
                    double dropout_rate = 0.3);

// Standard cell equations: i,f,o = sigmoid, g = tanh, c' = f.c + i.g,
// h' = o.tanh(c').
void lstm_cell_forward(const Vec& x, const Vec& h, const Vec& c,
                       const LstmCellWeights& w, Vec& h_out, Vec& c_out);

// Two stacked bidirectional layers; output T x 2H.
Mat bilstm_forward(const LstmModel& model, const Mat& seq);

// Non-causal self-attention over the full window.
Mat mha_forward(const LstmModel& model, const Mat& X);

double focal_loss(const Vec& p, const std::vector<std::uint8_t>& y,
                  double gamma = 3.0, double alpha = 0.75);

struct AdamWConfig {
    double learning_rate = 1e-3;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Decoupled weight decay update for one tensor; t is the 1-based step.
void adamw_step(Vec& theta, const Vec& grad, Vec& m, Vec& v, std::int64_t t,
                const AdamWConfig& cfg);

// Mean focal loss over all frames of the batch.  When training is true,
// inverted dropout after attention with a mask drawn from dropout_seed.
double lstm_loss(const LstmModel& model, const std::vector<TrainSequence>& batch,
                 double gamma, double alpha, bool training,
                 std::uint64_t dropout_seed);

// Exact gradients of the batch-mean focal loss via backpropagation.
std::pair<double, LstmGradients> compute_gradients(
    const LstmModel& model, const std::vector<TrainSequence>& batch, double gamma,
    double alpha, bool training, std::uint64_t dropout_seed);

std::pair<LstmModel, std::vector<EpochStats>> train_lstm(
    const std::vector<TrainSequence>& recordings, const TrainConfig& cfg,
    const LstmDims& dims = {});

FrameStream predict_lstm(const LstmModel& model, const FrameStream& vap,
                         const FrameStream& llm, std::size_t seq_len = 100);

// Versioned binary container, magic `LSTMv1`, shape table first.
void save_lstm(const LstmModel& model, const std::string& path);
LstmModel load_lstm(const std::string& path);

void save_history(const std::vector<EpochStats>& history, const std::string& path);

}  // namespace trpfuse
