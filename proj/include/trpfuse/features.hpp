#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "trpfuse/timeline.hpp"

namespace trpfuse {

// Per-frame engineered feature vectors, row-major.
struct FeatureMatrix {
    std::size_t n_frames = 0;
    std::size_t n_features = 0;
    std::vector<double> values;  // n_frames * n_features
    std::vector<std::string> column_names;

    double at(std::size_t frame, std::size_t col) const {
        return values[frame * n_features + col];
    }
    void to_csv(const std::string& path) const;
};

struct RollingStats {
    // one entry per frame, trailing window shrunk at the prefix
    std::vector<double> mean, stddev, max, min;
};

// Trailing-window statistics over the available prefix; population std.
RollingStats rolling_stats(const FrameStream& stream, std::size_t window);

struct Interaction {
    double product, maximum, minimum;
};

Interaction interaction(double p_vap, double p_llm);

inline constexpr std::size_t kDefaultWindows[] = {5, 10, 20};

// 2 raw + 2 streams x 3 windows x 4 stats + 3 interaction = 29 columns.
FeatureMatrix build_feature_matrix(const FrameStream& vap, const FrameStream& llm);

}  // namespace trpfuse
