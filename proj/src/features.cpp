#include "trpfuse/features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "fmt/format.h"

namespace trpfuse {

void FeatureMatrix::to_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", path));
    for (std::size_t c = 0; c < column_names.size(); ++c)
        out << (c ? "," : "") << column_names[c];
    out << '\n';
    for (std::size_t f = 0; f < n_frames; ++f) {
        for (std::size_t c = 0; c < n_features; ++c)
            out << (c ? "," : "") << fmt::format("{:.17g}", at(f, c));
        out << '\n';
    }
}

RollingStats rolling_stats(const FrameStream& stream, std::size_t window) {
    if (stream.values.empty())
        throw std::invalid_argument("rolling_stats: empty stream");
    if (window == 0) throw std::invalid_argument("rolling_stats: zero window");

    const std::size_t n = stream.values.size();
    RollingStats out;
    out.mean.resize(n);
    out.stddev.resize(n);
    out.max.resize(n);
    out.min.resize(n);
    for (std::size_t f = 0; f < n; ++f) {
        const std::size_t count = std::min(window, f + 1);
        const std::size_t begin = f + 1 - count;
        double sum = 0, mx = stream.values[begin], mn = stream.values[begin];
        for (std::size_t i = begin; i <= f; ++i) {
            sum += stream.values[i];
            mx = std::max(mx, stream.values[i]);
            mn = std::min(mn, stream.values[i]);
        }
        const double mean = sum / count;
        double var = 0;
        for (std::size_t i = begin; i <= f; ++i)
            var += (stream.values[i] - mean) * (stream.values[i] - mean);
        out.mean[f] = mean;
        out.stddev[f] = std::sqrt(var / count);
        out.max[f] = mx;
        out.min[f] = mn;
    }
    return out;
}

Interaction interaction(double p_vap, double p_llm) {
    return {p_vap * p_llm, std::max(p_vap, p_llm), std::min(p_vap, p_llm)};
}

FeatureMatrix build_feature_matrix(const FrameStream& vap, const FrameStream& llm) {
    if (vap.values.size() != llm.values.size())
        throw std::invalid_argument(
            fmt::format("stream length mismatch: {} vs {}", vap.values.size(),
                        llm.values.size()));

    FeatureMatrix m;
    m.column_names = {"vap", "llm"};
    for (const char* stream : {"vap", "llm"})
        for (std::size_t w : kDefaultWindows)
            for (const char* stat : {"mean", "std", "max", "min"})
                m.column_names.push_back(fmt::format("{}_{}{}", stream, stat, w));
    m.column_names.insert(m.column_names.end(),
                          {"inter_prod", "inter_max", "inter_min"});

    m.n_frames = vap.values.size();
    m.n_features = m.column_names.size();
    m.values.resize(m.n_frames * m.n_features);
    if (m.n_frames == 0) return m;

    std::vector<RollingStats> stats;  // vap windows then llm windows
    for (std::size_t w : kDefaultWindows) stats.push_back(rolling_stats(vap, w));
    for (std::size_t w : kDefaultWindows) stats.push_back(rolling_stats(llm, w));

    for (std::size_t f = 0; f < m.n_frames; ++f) {
        double* row = &m.values[f * m.n_features];
        std::size_t c = 0;
        row[c++] = vap.values[f];
        row[c++] = llm.values[f];
        for (const auto& s : stats) {
            row[c++] = s.mean[f];
            row[c++] = s.stddev[f];
            row[c++] = s.max[f];
            row[c++] = s.min[f];
        }
        const auto inter = interaction(vap.values[f], llm.values[f]);
        row[c++] = inter.product;
        row[c++] = inter.maximum;
        row[c++] = inter.minimum;
    }
    return m;
}

}  // namespace trpfuse
