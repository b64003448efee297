#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "trpfuse/features.hpp"
#include "trpfuse/timeline.hpp"

namespace trpfuse {

struct LogisticConfig {
    double learning_rate = 0.1;
    int epochs = 500;
    double l2 = 1e-4;
    std::uint64_t seed = 0;
};

// Per-column standardizer captured at fit time.  Constant columns are
// flagged and contribute 0 after centering.
struct Standardizer {
    std::vector<double> mean;
    std::vector<double> stddev;       // 1.0 where constant
    std::vector<std::uint8_t> constant;

    void fit(const FeatureMatrix& X);
    double apply(std::size_t col, double x) const {
        if (constant[col]) return 0.0;
        return (x - mean[col]) / stddev[col];
    }
};

struct LogisticModel {
    std::vector<double> weights;
    double bias = 0.0;
    Standardizer standardizer;
    double final_loss = 0.0;
};

// Full-batch gradient descent on L2-regularized log loss over
// standardized columns; zero init, step halving on loss increase.
LogisticModel fit_logistic(const FeatureMatrix& X,
                           const std::vector<std::uint8_t>& y,
                           const LogisticConfig& cfg = {});

FrameStream predict_logistic(const LogisticModel& model, const FeatureMatrix& X);

// Regularized mean log loss at the given parameters (used by training
// and by the finite-difference gradient tests).
double logistic_loss(const LogisticModel& model, const FeatureMatrix& X,
                     const std::vector<std::uint8_t>& y, double l2);

// Versioned text format `lr-model v1` for exact reload.
void save_logistic(const LogisticModel& model, const std::string& path);
LogisticModel load_logistic(const std::string& path);

}  // namespace trpfuse
