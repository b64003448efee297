#include "trpfuse/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <memory>
#include <stdexcept>

#include "fmt/format.h"
#include "trpfuse/features.hpp"
#include "trpfuse/logistic.hpp"
#include "trpfuse/lstm.hpp"
#include "trpfuse/rng.hpp"

namespace trpfuse {
namespace {

double ratio0(std::int64_t num, std::int64_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

double objective_of(const MetricReport& r, SweepObjective obj) {
    return obj == SweepObjective::kBalancedAccuracy ? r.balanced_accuracy : r.f1;
}

// Concatenate per-recording probability streams and ground truths into a
// single pooled instance (events offset by the running frame count).
std::pair<FrameStream, GroundTruth> pool_streams(
    const std::vector<FrameStream>& probs, const std::vector<const GroundTruth*>& truths) {
    FrameStream stream;
    GroundTruth truth;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const std::int64_t offset = truth.total_frames;
        stream.values.insert(stream.values.end(), probs[i].values.begin(),
                             probs[i].values.end());
        for (std::int64_t e : truths[i]->events) truth.events.push_back(e + offset);
        truth.total_frames += truths[i]->total_frames;
    }
    return {std::move(stream), std::move(truth)};
}

}  // namespace

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& other) {
    tp += other.tp;
    fp += other.fp;
    tn += other.tn;
    fn += other.fn;
    return *this;
}

std::vector<std::uint8_t> binarize(const FrameStream& stream, double threshold,
                                   bool flipped) {
    std::vector<std::uint8_t> out(stream.values.size());
    for (std::size_t f = 0; f < out.size(); ++f) {
        const double p = flipped ? 1.0 - stream.values[f] : stream.values[f];
        out[f] = p >= threshold ? 1 : 0;
    }
    return out;
}

ConfusionCounts windowed_confusion(const std::vector<std::uint8_t>& pred,
                                   const GroundTruth& truth,
                                   std::int64_t window) {
    if (static_cast<std::int64_t>(pred.size()) != truth.total_frames)
        throw std::invalid_argument(
            fmt::format("prediction length {} != total_frames {}", pred.size(),
                        truth.total_frames));
    const auto effective = dilate_events(truth, window);
    ConfusionCounts conf;
    for (std::size_t f = 0; f < pred.size(); ++f) {
        if (pred[f] && effective[f]) ++conf.tp;
        else if (pred[f] && !effective[f]) ++conf.fp;
        else if (!pred[f] && effective[f]) ++conf.fn;
        else ++conf.tn;
    }
    return conf;
}

MetricReport metrics(const ConfusionCounts& conf) {
    if (conf.total() == 0) throw std::invalid_argument("empty confusion counts");
    MetricReport r;
    r.accuracy = ratio0(conf.tp + conf.tn, conf.total());
    r.balanced_accuracy = 0.5 * (ratio0(conf.tp, conf.tp + conf.fn) +
                                 ratio0(conf.tn, conf.tn + conf.fp));
    r.precision = ratio0(conf.tp, conf.tp + conf.fp);
    r.recall = ratio0(conf.tp, conf.tp + conf.fn);
    r.f1 = (r.precision + r.recall) == 0.0
               ? 0.0
               : 2.0 * r.precision * r.recall / (r.precision + r.recall);
    return r;
}

double rtf(double processing_s, double audio_s) {
    if (audio_s <= 0.0) throw std::invalid_argument("audio duration must be positive");
    return processing_s / audio_s;
}

SweepResult threshold_sweep(const FrameStream& probs, const GroundTruth& truth,
                            const EvalConfig& cfg, SweepObjective objective) {
    auto grid = cfg.threshold_grid.empty() ? default_threshold_grid()
                                           : cfg.threshold_grid;
    SweepResult result;
    bool have_best = false;
    // tie-break: unflipped first, then lowest threshold
    for (const bool flipped : {false, true}) {
        if (flipped && !cfg.allow_flip) break;
        for (double threshold : grid) {
            const auto pred = binarize(probs, threshold, flipped);
            const auto conf = windowed_confusion(pred, truth, cfg.window_frames);
            const auto report = metrics(conf);
            const double value = objective_of(report, objective);
            result.grid.push_back({threshold, flipped, value});
            if (!have_best || value > objective_of(result.report, objective)) {
                have_best = true;
                result.best_threshold = threshold;
                result.flipped = flipped;
                result.report = report;
            }
        }
    }
    return result;
}

std::vector<std::vector<std::size_t>> kfold_split(std::size_t n_items,
                                                  std::size_t k,
                                                  std::uint64_t seed) {
    if (k == 0 || k > n_items)
        throw std::invalid_argument(
            fmt::format("cannot split {} items into {} folds", n_items, k));
    std::vector<std::size_t> order(n_items);
    for (std::size_t i = 0; i < n_items; ++i) order[i] = i;
    SplitMix64 rng(seed);
    shuffle(order, rng);
    std::vector<std::vector<std::size_t>> folds(k);
    for (std::size_t i = 0; i < n_items; ++i) folds[i % k].push_back(order[i]);
    for (auto& fold : folds) std::sort(fold.begin(), fold.end());
    return folds;
}

std::vector<std::vector<std::size_t>> loo_split(std::size_t n_items) {
    if (n_items < 2)
        throw std::invalid_argument("leave-one-out needs at least 2 items");
    std::vector<std::vector<std::size_t>> folds(n_items);
    for (std::size_t i = 0; i < n_items; ++i) folds[i] = {i};
    return folds;
}

namespace {

// A fold-local predictor mapping one recording to a probability stream.
using Predictor = std::function<FrameStream(const Recording&)>;

std::vector<std::uint8_t> dilated_labels(const Recording& rec,
                                         std::int64_t window) {
    return dilate_events(rec.truth, window);
}

Predictor make_predictor(const std::vector<Recording>& recordings,
                         const std::vector<std::size_t>& train_items,
                         const RunOptions& options, std::string* skip_reason) {
    switch (options.kind) {
        case EnsembleKind::kPassthroughVap:
            return [](const Recording& r) { return r.vap; };
        case EnsembleKind::kPassthroughLlm:
            return [](const Recording& r) { return r.llm; };
        case EnsembleKind::kLogisticRegression: {
            FrameStream vap_all, llm_all;
            std::vector<std::uint8_t> labels;
            for (std::size_t i : train_items) {
                const auto& r = recordings[i];
                vap_all.values.insert(vap_all.values.end(), r.vap.values.begin(),
                                      r.vap.values.end());
                llm_all.values.insert(llm_all.values.end(), r.llm.values.begin(),
                                      r.llm.values.end());
                const auto y = dilated_labels(r, options.eval.window_frames);
                labels.insert(labels.end(), y.begin(), y.end());
            }
            const auto X = build_feature_matrix(vap_all, llm_all);
            LogisticConfig cfg;
            cfg.learning_rate = options.lr_learning_rate;
            cfg.epochs = options.lr_epochs;
            cfg.l2 = options.lr_l2;
            cfg.seed = options.seed;
            std::shared_ptr<LogisticModel> model;
            try {
                model = std::make_shared<LogisticModel>(fit_logistic(X, labels, cfg));
            } catch (const std::exception& e) {
                *skip_reason = e.what();
                return nullptr;
            }
            return [model](const Recording& r) {
                return predict_logistic(*model, build_feature_matrix(r.vap, r.llm));
            };
        }
        case EnsembleKind::kLstm: {
            std::vector<TrainSequence> seqs;
            for (std::size_t i : train_items) {
                const auto& r = recordings[i];
                TrainSequence seq;
                const std::size_t T = r.vap.values.size();
                seq.inputs = Mat(T, 2);
                for (std::size_t t = 0; t < T; ++t) {
                    seq.inputs(t, 0) = r.vap.values[t];
                    seq.inputs(t, 1) = r.llm.values[t];
                }
                seq.labels = dilated_labels(r, options.eval.window_frames);
                seqs.push_back(std::move(seq));
            }
            TrainConfig cfg;
            cfg.epochs = options.lstm_epochs;
            cfg.seed = options.seed;
            cfg.learning_rate = options.lstm_learning_rate;
            cfg.batch_size = options.lstm_batch_size;
            LstmDims dims;
            dims.hidden = options.lstm_hidden;
            dims.heads = options.lstm_heads;
            std::shared_ptr<LstmModel> model;
            try {
                model = std::make_shared<LstmModel>(
                    train_lstm(seqs, cfg, dims).first);
            } catch (const std::exception& e) {
                *skip_reason = e.what();
                return nullptr;
            }
            return [model](const Recording& r) {
                return predict_lstm(*model, r.vap, r.llm);
            };
        }
    }
    throw std::logic_error("unknown ensemble kind");
}

}  // namespace

RunResult evaluate_run(const std::vector<Recording>& recordings,
                       const std::vector<std::vector<std::size_t>>& folds,
                       const RunOptions& options, std::vector<Trace>* traces) {
    RunResult result;
    double pred_seconds = 0.0;
    double audio_seconds = 0.0;

    for (std::size_t f = 0; f < folds.size(); ++f) {
        FoldResult fold;
        fold.fold = f;
        fold.test_items = folds[f];

        std::vector<std::size_t> train_items;
        for (std::size_t i = 0; i < recordings.size(); ++i)
            if (std::find(folds[f].begin(), folds[f].end(), i) == folds[f].end())
                train_items.push_back(i);
        if (train_items.empty()) train_items = fold.test_items;  // degenerate 1-fold

        std::string skip_reason;
        Predictor predict = make_predictor(recordings, train_items, options,
                                           &skip_reason);
        if (!predict) {
            fold.skipped = true;
            fold.skip_reason = skip_reason;
            result.folds.push_back(std::move(fold));
            continue;
        }

        // freeze threshold on the train folds
        std::vector<FrameStream> train_probs;
        std::vector<const GroundTruth*> train_truths;
        for (std::size_t i : train_items) {
            train_probs.push_back(predict(recordings[i]));
            train_truths.push_back(&recordings[i].truth);
        }
        auto [pooled_probs, pooled_truth] = pool_streams(train_probs, train_truths);
        fold.sweep = threshold_sweep(pooled_probs, pooled_truth, options.eval,
                                     options.objective);

        for (std::size_t i : fold.test_items) {
            const auto& rec = recordings[i];
            const auto start = std::chrono::steady_clock::now();
            const auto probs = predict(rec);
            const auto stop = std::chrono::steady_clock::now();
            pred_seconds += std::chrono::duration<double>(stop - start).count();
            audio_seconds += static_cast<double>(rec.truth.total_frames) /
                             options.eval.frame_rate;

            const auto pred = binarize(probs, fold.sweep.best_threshold,
                                       fold.sweep.flipped);
            fold.confusion +=
                windowed_confusion(pred, rec.truth, options.eval.window_frames);

            if (traces) {
                Trace trace;
                trace.recording_id = rec.id;
                trace.truth_event.assign(
                    static_cast<std::size_t>(rec.truth.total_frames), 0);
                for (std::int64_t e : rec.truth.events)
                    trace.truth_event[static_cast<std::size_t>(e)] = 1;
                trace.effective_label =
                    dilate_events(rec.truth, options.eval.window_frames);
                trace.pred_binary = pred;
                trace.prob = probs.values;
                traces->push_back(std::move(trace));
            }
        }
        fold.report = metrics(fold.confusion);
        result.pooled += fold.confusion;
        result.folds.push_back(std::move(fold));
    }

    if (result.pooled.total() == 0)
        throw std::runtime_error("all folds were skipped");
    result.aggregate = metrics(result.pooled);
    result.rtf_prediction = rtf(pred_seconds, audio_seconds);
    result.aggregate.rtf = result.rtf_prediction;
    return result;
}

void write_report_csv(const std::vector<ReportRow>& rows, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", path));
    out << "dataset,model,prompt,threshold,flipped,accuracy,balanced_acc,"
           "precision,recall,f1,rtf\n";
    for (const auto& row : rows) {
        out << fmt::format(
            "{},{},{},{:g},{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{}\n", row.dataset,
            row.model, row.prompt, row.threshold, row.flipped ? "flip" : "no_flip",
            row.report.accuracy, row.report.balanced_accuracy,
            row.report.precision, row.report.recall, row.report.f1,
            row.report.rtf ? fmt::format("{:.6f}", *row.report.rtf) : "NA");
    }
}

void write_trace_csv(const Trace& trace, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", path));
    out << "frame,truth_event,effective_label,pred_binary,prob\n";
    for (std::size_t f = 0; f < trace.prob.size(); ++f)
        out << fmt::format("{},{},{},{},{:.17g}\n", f, int(trace.truth_event[f]),
                           int(trace.effective_label[f]), int(trace.pred_binary[f]),
                           trace.prob[f]);
    }

}  // namespace trpfuse
