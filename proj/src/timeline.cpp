#include "trpfuse/timeline.hpp"

#include <algorithm>
#include <cmath>

#include "fmt/format.h"

namespace trpfuse {

void GroundTruth::validate() const {
    if (total_frames < 0)
        throw std::invalid_argument("GroundTruth: negative total_frames");
    std::int64_t prev = -1;
    for (std::int64_t e : events) {
        if (e <= prev)
            throw std::invalid_argument(
                fmt::format("GroundTruth: events not strictly increasing at {}", e));
        if (e < 0 || e >= total_frames)
            throw std::invalid_argument(
                fmt::format("GroundTruth: event {} outside [0, {})", e, total_frames));
        prev = e;
    }
}

std::vector<double> default_threshold_grid() {
    std::vector<double> grid;
    for (int i = 1; i <= 19; ++i) grid.push_back(i * 0.05);
    return grid;
}

FrameStream expand_utterance_predictions(std::vector<PredictionSpan> spans,
                                         std::int64_t total_frames,
                                         int frame_rate) {
    for (const auto& s : spans) {
        if (!(s.start_s < s.end_s))
            throw std::invalid_argument(
                fmt::format("span [{}, {}) is empty or reversed", s.start_s, s.end_s));
        if (s.prob < 0.0 || s.prob > 1.0)
            throw std::invalid_argument(
                fmt::format("span prob {} outside [0,1]", s.prob));
    }
    std::sort(spans.begin(), spans.end(),
              [](const PredictionSpan& a, const PredictionSpan& b) {
                  return a.start_s < b.start_s;
              });
    for (std::size_t i = 1; i < spans.size(); ++i) {
        if (spans[i].start_s < spans[i - 1].end_s)
            throw std::invalid_argument(fmt::format(
                "overlapping spans: [{}, {}) and [{}, {})", spans[i - 1].start_s,
                spans[i - 1].end_s, spans[i].start_s, spans[i].end_s));
    }

    FrameStream out;
    out.frame_rate = frame_rate;
    out.values.assign(static_cast<std::size_t>(total_frames), 0.0);
    for (const auto& s : spans) {
        // frame f covers time f/rate; half-open span [start, end); the
        // epsilon absorbs representation error in start_s * rate
        auto first =
            static_cast<std::int64_t>(std::ceil(s.start_s * frame_rate - 1e-9));
        auto last =
            static_cast<std::int64_t>(std::ceil(s.end_s * frame_rate - 1e-9)) - 1;
        first = std::max<std::int64_t>(first, 0);
        last = std::min(last, total_frames - 1);
        for (std::int64_t f = first; f <= last; ++f)
            out.values[static_cast<std::size_t>(f)] = s.prob;
    }
    return out;
}

std::vector<std::uint8_t> dilate_events(const GroundTruth& truth,
                                        std::int64_t window_frames) {
    truth.validate();
    std::vector<std::uint8_t> labels(static_cast<std::size_t>(truth.total_frames), 0);
    for (std::int64_t e : truth.events) {
        const std::int64_t lo = std::max<std::int64_t>(0, e - window_frames);
        const std::int64_t hi = std::min(truth.total_frames - 1, e + window_frames);
        for (std::int64_t f = lo; f <= hi; ++f)
            labels[static_cast<std::size_t>(f)] = 1;
    }
    return labels;
}

std::pair<FrameStream, FrameStream> align_streams(const FrameStream& a,
                                                  const FrameStream& b) {
    if (a.frame_rate != b.frame_rate)
        throw std::invalid_argument(fmt::format("frame rate mismatch: {} vs {}",
                                                a.frame_rate, b.frame_rate));
    const std::size_t n = std::min(a.values.size(), b.values.size());
    FrameStream ta = a;
    FrameStream tb = b;
    ta.values.resize(n);
    tb.values.resize(n);
    return {std::move(ta), std::move(tb)};
}

GroundTruth shift_events(const GroundTruth& truth, std::int64_t offset_frames) {
    truth.validate();
    GroundTruth out;
    out.total_frames = truth.total_frames;
    for (std::int64_t e : truth.events) {
        const std::int64_t shifted =
            std::clamp<std::int64_t>(e + offset_frames, 0, truth.total_frames - 1);
        if (out.events.empty() || out.events.back() != shifted)
            out.events.push_back(shifted);
    }
    return out;
}

}  // namespace trpfuse
