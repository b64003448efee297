#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "trpfuse/timeline.hpp"

namespace trpfuse {

enum class Speaker { kUser, kAssistant };

struct Utterance {
    Speaker speaker = Speaker::kUser;
    std::string text;
};

struct Dialog {
    std::string id;
    std::vector<Utterance> utterances;
};

struct TimelineConfig {
    double gap_s = 2.0;         // artificial silence between turns
    double words_per_s = 2.5;   // synthetic speech rate
    int frame_rate = kFrameRate;
};

struct ParticipantResponses {
    int n_participants = 0;
    // per-participant response frame indices
    std::vector<std::vector<std::int64_t>> responses;
};

// One laid-out turn on the synthetic timeline.
struct TurnSpan {
    double start_s = 0.0;
    double end_s = 0.0;
    Speaker speaker = Speaker::kUser;
    std::string text;
};

// Parse the public CCPE data.json schema (conversationId,
// utterances[].speaker, utterances[].text).  Annotations are ignored.
std::vector<Dialog> parse_ccpe(const std::string& json_bytes);
std::vector<Dialog> parse_ccpe_file(const std::string& path);

// Lay turns out sequentially with gap_s silence between them; one TRP
// event at the final frame of each turn.  A turn is a maximal run of
// consecutive utterances by the same speaker.
std::pair<GroundTruth, std::vector<TurnSpan>> build_ccpe_timeline(
    const Dialog& dialog, const TimelineConfig& cfg);

// Dilate each participant's responses by +/- smear_frames, then emit one
// event at the center of each maximal run where distinct-participant
// coverage reaches ceil(agreement * n_participants).
GroundTruth aggregate_icc_labels(const ParticipantResponses& resp,
                                 std::int64_t total_frames,
                                 double agreement = 0.30,
                                 std::int64_t smear_frames = 37);

// Per-frame distinct-participant coverage after smearing.
std::vector<std::int64_t> icc_coverage(const ParticipantResponses& resp,
                                       std::int64_t total_frames,
                                       std::int64_t smear_frames = 37);

// CSV `participant_id,response_frame`
ParticipantResponses load_icc_responses(const std::string& path);

// CSV with header `frame,prob`, dense frame indices from 0.
FrameStream load_prediction_stream(const std::string& path);
void store_prediction_stream(const FrameStream& stream, const std::string& path);

// CSV with header `event_frame`; sidecar `<path>.meta` carries
// total_frames=<n> as key=value lines.
GroundTruth load_ground_truth(const std::string& path);
void store_ground_truth(const GroundTruth& truth, const std::string& path);

// CSV `start_s,end_s,speaker,text` (text quoted)
void store_turn_spans(const std::vector<TurnSpan>& spans, const std::string& path);
std::vector<TurnSpan> load_turn_spans(const std::string& path);

}  // namespace trpfuse
