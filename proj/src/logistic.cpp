#include "trpfuse/logistic.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "fmt/format.h"

namespace trpfuse {
namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Standardized copy of X per the fitted standardizer.
std::vector<double> standardize(const Standardizer& s, const FeatureMatrix& X) {
    std::vector<double> out(X.values.size());
    for (std::size_t f = 0; f < X.n_frames; ++f)
        for (std::size_t c = 0; c < X.n_features; ++c)
            out[f * X.n_features + c] = s.apply(c, X.at(f, c));
    return out;
}

double loss_at(const std::vector<double>& Xs, std::size_t n, std::size_t k,
               const std::vector<double>& w, double b,
               const std::vector<std::uint8_t>& y, double l2) {
    double loss = 0.0;
    for (std::size_t f = 0; f < n; ++f) {
        double z = b;
        for (std::size_t c = 0; c < k; ++c) z += w[c] * Xs[f * k + c];
        // log(1+exp) with the stable branch
        const double soft = z > 0 ? z + std::log1p(std::exp(-z))
                                  : std::log1p(std::exp(z));
        loss += soft - (y[f] ? z : 0.0);
    }
    loss /= static_cast<double>(n);
    double reg = 0.0;
    for (double wc : w) reg += wc * wc;
    return loss + 0.5 * l2 * reg;
}

}  // namespace

void Standardizer::fit(const FeatureMatrix& X) {
    const std::size_t k = X.n_features;
    mean.assign(k, 0.0);
    stddev.assign(k, 1.0);
    constant.assign(k, 0);
    if (X.n_frames == 0) return;
    for (std::size_t f = 0; f < X.n_frames; ++f)
        for (std::size_t c = 0; c < k; ++c) mean[c] += X.at(f, c);
    for (std::size_t c = 0; c < k; ++c) mean[c] /= static_cast<double>(X.n_frames);
    std::vector<double> var(k, 0.0);
    for (std::size_t f = 0; f < X.n_frames; ++f)
        for (std::size_t c = 0; c < k; ++c) {
            const double d = X.at(f, c) - mean[c];
            var[c] += d * d;
        }
    for (std::size_t c = 0; c < k; ++c) {
        const double sd = std::sqrt(var[c] / static_cast<double>(X.n_frames));
        // rounding noise on a genuinely constant column still counts as constant
        if (sd > 1e-12 * std::max(1.0, std::fabs(mean[c])))
            stddev[c] = sd;
        else
            constant[c] = 1;
    }
}

LogisticModel fit_logistic(const FeatureMatrix& X,
                           const std::vector<std::uint8_t>& y,
                           const LogisticConfig& cfg) {
    if (y.size() != X.n_frames)
        throw std::invalid_argument("label count does not match frame count");
    bool any_pos = false, any_neg = false;
    for (std::uint8_t label : y) (label ? any_pos : any_neg) = true;
    if (!any_pos || !any_neg)
        throw std::invalid_argument("training labels contain a single class");
    for (double v : X.values)
        if (!std::isfinite(v))
            throw std::invalid_argument("non-finite value in feature matrix");

    LogisticModel model;
    model.standardizer.fit(X);
    const std::size_t n = X.n_frames;
    const std::size_t k = X.n_features;
    model.weights.assign(k, 0.0);

    const auto Xs = standardize(model.standardizer, X);
    double lr = cfg.learning_rate;
    double loss = loss_at(Xs, n, k, model.weights, model.bias, y, cfg.l2);

    std::vector<double> grad(k);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double grad_b = 0.0;
        for (std::size_t f = 0; f < n; ++f) {
            double z = model.bias;
            for (std::size_t c = 0; c < k; ++c) z += model.weights[c] * Xs[f * k + c];
            const double err = sigmoid(z) - (y[f] ? 1.0 : 0.0);
            for (std::size_t c = 0; c < k; ++c) grad[c] += err * Xs[f * k + c];
            grad_b += err;
        }
        for (std::size_t c = 0; c < k; ++c)
            grad[c] = grad[c] / static_cast<double>(n) + cfg.l2 * model.weights[c];
        grad_b /= static_cast<double>(n);

        // step halving on loss increase
        while (lr > 1e-12) {
            std::vector<double> w_try(k);
            for (std::size_t c = 0; c < k; ++c)
                w_try[c] = model.weights[c] - lr * grad[c];
            const double b_try = model.bias - lr * grad_b;
            const double loss_try = loss_at(Xs, n, k, w_try, b_try, y, cfg.l2);
            if (loss_try <= loss) {
                model.weights = std::move(w_try);
                model.bias = b_try;
                loss = loss_try;
                break;
            }
            lr *= 0.5;
        }
    }
    model.final_loss = loss;
    return model;
}

FrameStream predict_logistic(const LogisticModel& model, const FeatureMatrix& X) {
    if (X.n_features != model.weights.size())
        throw std::invalid_argument(
            fmt::format("feature count {} does not match model ({})",
                        X.n_features, model.weights.size()));
    FrameStream out;
    out.source_id = "lr";
    out.values.resize(X.n_frames);
    for (std::size_t f = 0; f < X.n_frames; ++f) {
        double z = model.bias;
        for (std::size_t c = 0; c < X.n_features; ++c)
            z += model.weights[c] * model.standardizer.apply(c, X.at(f, c));
        out.values[f] = sigmoid(z);
    }
    return out;
}

double logistic_loss(const LogisticModel& model, const FeatureMatrix& X,
                     const std::vector<std::uint8_t>& y, double l2) {
    const auto Xs = standardize(model.standardizer, X);
    return loss_at(Xs, X.n_frames, X.n_features, model.weights, model.bias, y, l2);
}

void save_logistic(const LogisticModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", path));
    out << "lr-model v1\n";
    out << "n_features " << model.weights.size() << '\n';
    out << fmt::format("bias {:.17g}\n", model.bias);
    out << fmt::format("final_loss {:.17g}\n", model.final_loss);
    auto write_vec = [&out](const char* name, const std::vector<double>& v) {
        out << name;
        for (double x : v) out << fmt::format(" {:.17g}", x);
        out << '\n';
    };
    write_vec("weights", model.weights);
    write_vec("mean", model.standardizer.mean);
    write_vec("stddev", model.standardizer.stddev);
    out << "constant";
    for (std::uint8_t c : model.standardizer.constant)
        out << ' ' << static_cast<int>(c);
    out << '\n';
}

LogisticModel load_logistic(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(fmt::format("cannot open {}", path));
    std::string line;
    if (!std::getline(in, line) || line != "lr-model v1")
        throw std::runtime_error(fmt::format("{}: not an lr-model v1 file", path));

    LogisticModel model;
    std::size_t n_features = 0;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "n_features") {
            ls >> n_features;
        } else if (key == "bias") {
            ls >> model.bias;
        } else if (key == "final_loss") {
            ls >> model.final_loss;
        } else if (key == "weights" || key == "mean" || key == "stddev") {
            std::vector<double> v;
            double x;
            while (ls >> x) v.push_back(x);
            if (key == "weights") model.weights = std::move(v);
            else if (key == "mean") model.standardizer.mean = std::move(v);
            else model.standardizer.stddev = std::move(v);
        } else if (key == "constant") {
            int c;
            while (ls >> c)
                model.standardizer.constant.push_back(static_cast<std::uint8_t>(c));
        }
    }
    if (model.weights.size() != n_features ||
        model.standardizer.mean.size() != n_features ||
        model.standardizer.stddev.size() != n_features ||
        model.standardizer.constant.size() != n_features)
        throw std::runtime_error(fmt::format("{}: inconsistent model file", path));
    return model;
}

}  // namespace trpfuse
