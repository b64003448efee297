#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace trpfuse {

inline constexpr int kFrameRate = 50;  // frames per second, global clock

// Fixed-rate sequence of probabilities in [0,1] from one predictor.
struct FrameStream {
    int frame_rate = kFrameRate;
    std::vector<double> values;
    std::string source_id;

    std::size_t size() const { return values.size(); }
};

// Frame-indexed TRP event positions for one recording.
struct GroundTruth {
    std::vector<std::int64_t> events;  // strictly increasing
    std::int64_t total_frames = 0;

    void validate() const;
};

struct EvalConfig {
    std::int64_t window_frames = 75;
    int frame_rate = kFrameRate;
    std::vector<double> threshold_grid;  // in (0,1), strictly increasing
    bool allow_flip = true;
};

// 0.05, 0.10, ..., 0.95
std::vector<double> default_threshold_grid();

// One utterance-level prediction span: [start_s, end_s) at probability prob.
struct PredictionSpan {
    double start_s = 0.0;
    double end_s = 0.0;
    double prob = 0.0;
};

// Frame f takes the prob of the span containing time f/frame_rate;
// uncovered frames fill with 0.0.  Overlapping spans are rejected.
FrameStream expand_utterance_predictions(std::vector<PredictionSpan> spans,
                                         std::int64_t total_frames,
                                         int frame_rate = kFrameRate);

// Per-frame effective labels: frame f is 1 iff some event e has
// |f - e| <= window_frames.
std::vector<std::uint8_t> dilate_events(const GroundTruth& truth,
                                        std::int64_t window_frames);

// Trim both streams to min length.  Frame rates must match.
std::pair<FrameStream, FrameStream> align_streams(const FrameStream& a,
                                                  const FrameStream& b);

// Shift events by offset_frames, clamping into [0, total_frames) and
// merging duplicates produced by clamping.
GroundTruth shift_events(const GroundTruth& truth, std::int64_t offset_frames);

}  // namespace trpfuse
