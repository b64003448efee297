#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "trpfuse/timeline.hpp"

namespace trpfuse {

struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::int64_t total() const { return tp + fp + tn + fn; }
    ConfusionCounts& operator+=(const ConfusionCounts& other);
};

struct MetricReport {
    double accuracy = 0.0;
    double balanced_accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::optional<double> rtf;
};

enum class SweepObjective { kBalancedAccuracy, kF1 };

struct SweepEntry {
    double threshold = 0.0;
    bool flipped = false;
    double objective = 0.0;
};

struct SweepResult {
    double best_threshold = 0.0;
    bool flipped = false;
    MetricReport report;
    std::vector<SweepEntry> grid;
};

// positive iff p >= threshold; flipped replaces p with 1-p first
std::vector<std::uint8_t> binarize(const FrameStream& stream, double threshold,
                                   bool flipped);

// Frame-level comparison against dilated effective labels.
ConfusionCounts windowed_confusion(const std::vector<std::uint8_t>& pred,
                                   const GroundTruth& truth,
                                   std::int64_t window = 75);

// 0/0 terms are defined as 0 throughout.
MetricReport metrics(const ConfusionCounts& conf);

double rtf(double processing_s, double audio_s);

SweepResult threshold_sweep(const FrameStream& probs, const GroundTruth& truth,
                            const EvalConfig& cfg,
                            SweepObjective objective = SweepObjective::kBalancedAccuracy);

// Disjoint folds of sizes differing by at most 1, shuffled by seed.
std::vector<std::vector<std::size_t>> kfold_split(std::size_t n_items,
                                                  std::size_t k, std::uint64_t seed);
std::vector<std::vector<std::size_t>> loo_split(std::size_t n_items);

struct Recording {
    std::string id;
    FrameStream vap;
    FrameStream llm;
    GroundTruth truth;
};

enum class EnsembleKind {
    kPassthroughVap,
    kPassthroughLlm,
    kLogisticRegression,
    kLstm,
};

struct RunOptions {
    EnsembleKind kind = EnsembleKind::kPassthroughVap;
    EvalConfig eval;
    std::uint64_t seed = 0;
    // lr training knobs
    double lr_learning_rate = 0.1;
    int lr_epochs = 500;
    double lr_l2 = 1e-4;
    // lstm training knobs
    int lstm_epochs = 10;
    std::size_t lstm_hidden = 128;
    std::size_t lstm_heads = 4;
    double lstm_learning_rate = 1e-3;
    std::size_t lstm_batch_size = 32;
    SweepObjective objective = SweepObjective::kBalancedAccuracy;
};

struct FoldResult {
    std::size_t fold = 0;
    std::vector<std::size_t> test_items;
    SweepResult sweep;         // threshold frozen on the train folds
    ConfusionCounts confusion; // test folds under the frozen threshold
    MetricReport report;
    bool skipped = false;
    std::string skip_reason;
};

struct RunResult {
    std::vector<FoldResult> folds;
    ConfusionCounts pooled;
    MetricReport aggregate;      // pooled confusion across folds
    double rtf_prediction = 0.0; // single-threaded wall clock / audio time
};

// Per-recording prediction traces for the frozen threshold.
struct Trace {
    std::string recording_id;
    std::vector<std::uint8_t> truth_event;      // 1 at labeled TRP frames
    std::vector<std::uint8_t> effective_label;  // dilated
    std::vector<std::uint8_t> pred_binary;
    std::vector<double> prob;
};

RunResult evaluate_run(const std::vector<Recording>& recordings,
                       const std::vector<std::vector<std::size_t>>& folds,
                       const RunOptions& options,
                       std::vector<Trace>* traces = nullptr);

// Table-2-shaped CSV row writer.
struct ReportRow {
    std::string dataset, model, prompt;
    double threshold = 0.0;
    bool flipped = false;
    MetricReport report;
};

void write_report_csv(const std::vector<ReportRow>& rows, const std::string& path);
void write_trace_csv(const Trace& trace, const std::string& path);

}  // namespace trpfuse
