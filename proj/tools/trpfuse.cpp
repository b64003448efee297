// trpfuse: turn-taking prediction fusion toolkit.
//
// Subcommands: prepare, train, evaluate, sweep, report.
// Exit codes: 0 success, 1 user/data error, 2 internal error.
// TRPFUSE_LOG=quiet|info|debug controls stderr verbosity.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fmt/format.h"

#include "trpfuse/eval.hpp"
#include "trpfuse/features.hpp"
#include "trpfuse/ingest.hpp"
#include "trpfuse/logistic.hpp"
#include "trpfuse/lstm.hpp"
#include "trpfuse/prompt.hpp"
#include "trpfuse/timeline.hpp"

namespace {

using namespace trpfuse;

int log_level() {
    const char* env = std::getenv("TRPFUSE_LOG");
    if (!env) return 1;
    const std::string v = env;
    if (v == "quiet") return 0;
    if (v == "debug") return 2;
    return 1;
}

template <typename... Args>
void log_info(fmt::format_string<Args...> f, Args&&... args) {
    if (log_level() >= 1)
        fmt::print(stderr, "{}\n", fmt::format(f, std::forward<Args>(args)...));
}

template <typename... Args>
void log_debug(fmt::format_string<Args...> f, Args&&... args) {
    if (log_level() >= 2)
        fmt::print(stderr, "{}\n", fmt::format(f, std::forward<Args>(args)...));
}

struct PrepareArgs {
    std::string kind = "ccpe";
    std::string input;
    std::string out_dir;
    double gap_s = 2.0;
    double words_per_s = 2.5;
    double agreement = 0.3;
    std::int64_t smear_frames = 37;
    std::int64_t total_frames = 0;
};

int cmd_prepare(const PrepareArgs& a) {
    std::filesystem::create_directories(a.out_dir);
    if (a.kind == "ccpe") {
        const auto dialogs = parse_ccpe_file(a.input);
        if (dialogs.empty()) throw std::runtime_error("no dialogs in input");
        TimelineConfig cfg;
        cfg.gap_s = a.gap_s;
        cfg.words_per_s = a.words_per_s;
        std::size_t events = 0;
        for (const auto& d : dialogs) {
            auto [truth, spans] = build_ccpe_timeline(d, cfg);
            events += truth.events.size();
            store_ground_truth(truth, a.out_dir + "/" + d.id + ".truth.csv");
            store_turn_spans(spans, a.out_dir + "/" + d.id + ".spans.csv");
            log_debug("dialog {}: {} events, {} frames", d.id,
                      truth.events.size(), truth.total_frames);
        }
        fmt::print("prepared {} dialogs, {} events\n", dialogs.size(), events);
    } else {
        if (a.total_frames <= 0)
            throw std::runtime_error("--total-frames is required for icc input");
        const auto resp = load_icc_responses(a.input);
        const auto truth = aggregate_icc_labels(resp, a.total_frames, a.agreement,
                                                a.smear_frames);
        store_ground_truth(truth, a.out_dir + "/icc.truth.csv");
        fmt::print("prepared 1 recording, {} events from {} participants\n",
                   truth.events.size(), resp.n_participants);
    }
    return 0;
}

struct RecordingArgs {
    std::vector<std::string> vap, llm, truth;

    std::vector<Recording> load() const {
        if (vap.size() != llm.size() || vap.size() != truth.size())
            throw std::runtime_error(
                "--vap, --llm and --truth must be given once per recording");
        if (vap.empty()) throw std::runtime_error("no recordings given");
        std::vector<Recording> recs;
        for (std::size_t i = 0; i < vap.size(); ++i) {
            Recording r;
            r.id = std::filesystem::path(truth[i]).stem().string();
            auto [v, l] = align_streams(load_prediction_stream(vap[i]),
                                        load_prediction_stream(llm[i]));
            r.vap = std::move(v);
            r.llm = std::move(l);
            r.truth = load_ground_truth(truth[i]);
            recs.push_back(std::move(r));
        }
        return recs;
    }
};

struct TrainArgs {
    std::string model;
    RecordingArgs data;
    std::string out;
    std::string history;
    std::int64_t window = 75;
    std::uint64_t seed = 0;
    int epochs = -1;           // -1 = per-model default
    double learning_rate = -1; // -1 = per-model default
    double l2 = 1e-4;
    std::size_t hidden = 128;
    std::size_t heads = 4;
    std::size_t batch_size = 32;
    std::size_t seq_len = 100;
    double dropout = 0.3;
};

int cmd_train(const TrainArgs& a) {
    const auto recs = a.data.load();
    if (a.model == "lr") {
        // pooled frames across recordings
        FeatureMatrix X;
        std::vector<std::uint8_t> y;
        for (const auto& r : recs) {
            const auto xi = build_feature_matrix(r.vap, r.llm);
            const auto labels = dilate_events(r.truth, a.window);
            X.n_features = xi.n_features;
            X.column_names = xi.column_names;
            X.values.insert(X.values.end(), xi.values.begin(), xi.values.end());
            X.n_frames += xi.n_frames;
            const auto n = std::min<std::size_t>(xi.n_frames, labels.size());
            y.insert(y.end(), labels.begin(), labels.begin() + static_cast<long>(n));
            y.resize(X.n_frames, 0);
        }
        LogisticConfig cfg;
        cfg.epochs = a.epochs < 0 ? 500 : a.epochs;
        cfg.learning_rate = a.learning_rate < 0 ? 0.1 : a.learning_rate;
        cfg.l2 = a.l2;
        cfg.seed = a.seed;
        const auto model = fit_logistic(X, y, cfg);
        save_logistic(model, a.out);
        fmt::print("trained lr on {} frames, final loss {:.6g}\n", X.n_frames,
                   model.final_loss);
    } else {
        std::vector<TrainSequence> seqs;
        for (const auto& r : recs) {
            TrainSequence seq;
            seq.inputs = Mat(r.vap.size(), 2);
            for (std::size_t t = 0; t < r.vap.size(); ++t) {
                seq.inputs(t, 0) = r.vap.values[t];
                seq.inputs(t, 1) = r.llm.values[t];
            }
            seq.labels = dilate_events(r.truth, a.window);
            seq.labels.resize(r.vap.size(), 0);
            seqs.push_back(std::move(seq));
        }
        TrainConfig cfg;
        cfg.epochs = a.epochs < 0 ? 10 : a.epochs;
        cfg.learning_rate = a.learning_rate < 0 ? 1e-3 : a.learning_rate;
        cfg.seed = a.seed;
        cfg.batch_size = a.batch_size;
        cfg.seq_len = a.seq_len;
        cfg.dropout_rate = a.dropout;
        LstmDims dims;
        dims.hidden = a.hidden;
        dims.heads = a.heads;
        auto [model, hist] = train_lstm(seqs, cfg, dims);
        save_lstm(model, a.out);
        if (!a.history.empty()) save_history(hist, a.history);
        fmt::print("trained lstm for {} epochs, final train loss {:.6g}\n",
                   hist.size(), hist.empty() ? 0.0 : hist.back().train_loss);
    }
    return 0;
}

EnsembleKind parse_kind(const std::string& s) {
    if (s == "passthrough-vap") return EnsembleKind::kPassthroughVap;
    if (s == "passthrough-llm") return EnsembleKind::kPassthroughLlm;
    if (s == "lr") return EnsembleKind::kLogisticRegression;
    if (s == "lstm") return EnsembleKind::kLstm;
    throw std::runtime_error(fmt::format("unknown model kind '{}'", s));
}

struct EvaluateArgs {
    std::string model = "passthrough-vap";
    std::string model_file;
    std::string spans;        // prompt ensemble transcript
    std::string replay;       // prompt ensemble replay CSV
    std::vector<std::string> llm_cmd;  // prompt ensemble live worker
    RecordingArgs data;
    std::string dataset = "synthetic";
    double threshold = 0.5;
    bool flip = false;
    bool measure_rtf = false;
    std::int64_t window = 75;
    std::string out;
    std::string trace_dir;
};

FrameStream predict_recording(const EvaluateArgs& a, const Recording& r) {
    if (a.model == "passthrough-vap") return r.vap;
    if (a.model == "passthrough-llm") return r.llm;
    if (a.model == "lr") {
        const auto model = load_logistic(a.model_file);
        return predict_logistic(model, build_feature_matrix(r.vap, r.llm));
    }
    if (a.model == "lstm") {
        const auto model = load_lstm(a.model_file);
        return predict_lstm(model, r.vap, r.llm);
    }
    // prompt ensemble over the transcript, VAP stream as fallback signal
    const auto spans = load_turn_spans(a.spans);
    if (!a.replay.empty()) {
        ReplayLlmClient client(a.replay);
        return prompt_ensemble_predict(spans, r.vap, client, {});
    }
    if (a.llm_cmd.empty())
        throw std::runtime_error("prompt model needs --replay or --llm-cmd");
    SubprocessLlmClient client(a.llm_cmd);
    return prompt_ensemble_predict(spans, r.vap, client, {});
}

int cmd_evaluate(const EvaluateArgs& a) {
    if ((a.model == "lr" || a.model == "lstm") && a.model_file.empty())
        throw std::runtime_error(
            fmt::format("--model-file is required for model '{}'", a.model));
    if (a.model == "prompt" && a.spans.empty())
        throw std::runtime_error("--spans is required for the prompt model");
    const auto recs = a.data.load();

    ConfusionCounts pooled;
    double processing_s = 0.0, audio_s = 0.0;
    std::vector<Trace> traces;
    for (const auto& r : recs) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto probs = predict_recording(a, r);
        const auto pred = binarize(probs, a.threshold, a.flip);
        const std::chrono::duration<double> dt =
            std::chrono::steady_clock::now() - t0;
        processing_s += dt.count();
        audio_s += static_cast<double>(r.truth.total_frames) / kFrameRate;
        pooled += windowed_confusion(pred, r.truth, a.window);
        if (!a.trace_dir.empty()) {
            Trace trace;
            trace.recording_id = r.id;
            trace.truth_event.assign(static_cast<std::size_t>(r.truth.total_frames), 0);
            for (std::int64_t e : r.truth.events)
                trace.truth_event[static_cast<std::size_t>(e)] = 1;
            trace.effective_label = dilate_events(r.truth, a.window);
            trace.pred_binary = pred;
            trace.prob = probs.values;
            traces.push_back(std::move(trace));
        }
        log_debug("recording {}: {} frames evaluated", r.id,
                  r.truth.total_frames);
    }

    ReportRow row;
    row.dataset = a.dataset;
    row.model = a.model;
    row.prompt = a.model == "prompt" ? "prompt-2" : "-";
    row.threshold = a.threshold;
    row.flipped = a.flip;
    row.report = metrics(pooled);
    // timing is only written on request so default outputs stay byte-stable
    if (a.measure_rtf) row.report.rtf = rtf(processing_s, audio_s);
    write_report_csv({row}, a.out);
    if (!a.trace_dir.empty()) {
        std::filesystem::create_directories(a.trace_dir);
        for (const auto& trace : traces)
            write_trace_csv(trace, a.trace_dir + "/" + trace.recording_id + ".csv");
    }
    if (row.report.rtf)
        fmt::print("balanced_acc {:.4f} rtf {:.4f}\n",
                   row.report.balanced_accuracy, *row.report.rtf);
    else
        fmt::print("balanced_acc {:.4f}\n", row.report.balanced_accuracy);
    return 0;
}

struct SweepArgs {
    std::string pred;
    std::string truth;
    std::int64_t window = 75;
    bool no_flip = false;
    std::string out;
};

int cmd_sweep(const SweepArgs& a) {
    const auto stream = load_prediction_stream(a.pred);
    const auto truth = load_ground_truth(a.truth);
    EvalConfig cfg;
    cfg.window_frames = a.window;
    cfg.threshold_grid = default_threshold_grid();
    cfg.allow_flip = !a.no_flip;
    const auto result = threshold_sweep(stream, truth, cfg);

    std::ofstream out(a.out, std::ios::binary);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", a.out));
    out << "threshold,flipped,balanced_acc\n";
    for (const auto& e : result.grid)
        out << fmt::format("{:.17g},{},{:.17g}\n", e.threshold,
                           e.flipped ? 1 : 0, e.objective);
    fmt::print("best threshold {:.2f} flipped {} balanced_acc {:.4f}\n",
               result.best_threshold, result.flipped ? "yes" : "no",
               result.report.balanced_accuracy);
    return 0;
}

struct ReportArgs {
    std::string dataset = "synthetic";
    std::string model = "passthrough-vap";
    RecordingArgs data;
    std::size_t folds = 5;
    bool loo = false;
    std::uint64_t seed = 0;
    std::int64_t window = 75;
    int epochs = -1;
    std::size_t hidden = 128;
    std::size_t heads = 4;
    int jobs = 1;
    bool measure_rtf = false;
    std::string out;
    std::string trace_dir;
};

int cmd_report(const ReportArgs& a) {
    const auto recs = a.data.load();
    if (a.jobs > 1)
        log_info("--jobs {}: folds evaluate serially in this build", a.jobs);

    RunOptions opts;
    opts.kind = parse_kind(a.model);
    opts.eval.window_frames = a.window;
    opts.eval.threshold_grid = default_threshold_grid();
    opts.seed = a.seed;
    if (a.epochs >= 0) {
        opts.lstm_epochs = a.epochs;
        opts.lr_epochs = a.epochs;
    }
    opts.lstm_hidden = a.hidden;
    opts.lstm_heads = a.heads;

    const auto folds = a.loo ? loo_split(recs.size())
                             : kfold_split(recs.size(), a.folds, a.seed);
    std::vector<Trace> traces;
    const auto result =
        evaluate_run(recs, folds, opts, a.trace_dir.empty() ? nullptr : &traces);

    std::vector<ReportRow> rows;
    for (const auto& fold : result.folds) {
        ReportRow row;
        row.dataset = fmt::format("{}/fold{}", a.dataset, fold.fold);
        row.model = a.model;
        row.prompt = "-";
        row.threshold = fold.sweep.best_threshold;
        row.flipped = fold.sweep.flipped;
        row.report = fold.report;
        if (fold.skipped)
            log_info("fold {} skipped: {}", fold.fold, fold.skip_reason);
        rows.push_back(row);
    }
    ReportRow agg;
    agg.dataset = fmt::format("{}/aggregate", a.dataset);
    agg.model = a.model;
    agg.prompt = "-";
    agg.report = result.aggregate;
    if (a.measure_rtf) agg.report.rtf = result.rtf_prediction;
    rows.push_back(agg);
    write_report_csv(rows, a.out);
    if (!a.trace_dir.empty()) {
        std::filesystem::create_directories(a.trace_dir);
        for (const auto& trace : traces)
            write_trace_csv(trace, a.trace_dir + "/" + trace.recording_id + ".csv");
    }
    fmt::print("aggregate balanced_acc {:.4f} rtf {:.4f}\n",
               result.aggregate.balanced_accuracy, result.rtf_prediction);
    return 0;
}

void add_recording_flags(CLI::App* cmd, RecordingArgs& data) {
    cmd->add_option("--vap", data.vap, "VAP stream CSV, once per recording")
        ->required();
    cmd->add_option("--llm", data.llm, "LLM stream CSV, once per recording")
        ->required();
    cmd->add_option("--truth", data.truth, "ground truth CSV, once per recording")
        ->required();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"turn-taking prediction fusion toolkit"};
    app.require_subcommand(1);
    app.set_config("--config", "", "key=value config file; flags win");
    app.get_config_ptr()->configurable(false);

    PrepareArgs prep;
    auto* prepare = app.add_subcommand("prepare", "build ground truth from raw data");
    prepare->add_option("--kind", prep.kind, "input kind")
        ->check(CLI::IsMember({"ccpe", "icc"}))
        ->capture_default_str();
    prepare->add_option("--input", prep.input, "CCPE data.json or ICC response CSV")
        ->required();
    prepare->add_option("--out", prep.out_dir, "output directory")->required();
    prepare->add_option("--gap-s", prep.gap_s, "silence between turns, seconds")
        ->capture_default_str();
    prepare->add_option("--words-per-s", prep.words_per_s, "synthetic speech rate")
        ->capture_default_str();
    prepare->add_option("--agreement", prep.agreement, "ICC agreement fraction")
        ->capture_default_str();
    prepare->add_option("--smear-frames", prep.smear_frames, "ICC response smear")
        ->capture_default_str();
    prepare->add_option("--total-frames", prep.total_frames,
                        "ICC recording length in frames")
        ->capture_default_str();

    TrainArgs tr;
    auto* train = app.add_subcommand("train", "fit an ensemble model");
    train->add_option("--model", tr.model, "ensemble kind")
        ->check(CLI::IsMember({"lr", "lstm"}))
        ->required();
    add_recording_flags(train, tr.data);
    train->add_option("--out", tr.out, "model output path")->required();
    train->add_option("--history", tr.history, "training history CSV (lstm)")
        ->capture_default_str();
    train->add_option("--window", tr.window, "label dilation, frames")
        ->capture_default_str();
    train->add_option("--seed", tr.seed, "training seed")->capture_default_str();
    train->add_option("--epochs", tr.epochs, "epochs (-1 = model default)")
        ->capture_default_str();
    train->add_option("--learning-rate", tr.learning_rate,
                      "learning rate (-1 = model default)")
        ->capture_default_str();
    train->add_option("--l2", tr.l2, "lr L2 strength")->capture_default_str();
    train->add_option("--hidden", tr.hidden, "lstm hidden size")
        ->capture_default_str();
    train->add_option("--heads", tr.heads, "lstm attention heads")
        ->capture_default_str();
    train->add_option("--batch-size", tr.batch_size, "lstm batch size")
        ->capture_default_str();
    train->add_option("--seq-len", tr.seq_len, "lstm chunk length")
        ->capture_default_str();
    train->add_option("--dropout", tr.dropout, "lstm dropout rate")
        ->capture_default_str();

    EvaluateArgs ev;
    auto* evaluate = app.add_subcommand("evaluate", "score predictions at a threshold");
    evaluate->add_option("--model", ev.model, "ensemble kind")
        ->check(CLI::IsMember(
            {"passthrough-vap", "passthrough-llm", "lr", "lstm", "prompt"}))
        ->capture_default_str();
    evaluate->add_option("--model-file", ev.model_file, "trained model (lr/lstm)")
        ->capture_default_str();
    evaluate->add_option("--spans", ev.spans, "turn-span CSV (prompt)")
        ->capture_default_str();
    evaluate->add_option("--replay", ev.replay, "LLM replay CSV (prompt)")
        ->capture_default_str();
    evaluate->add_option("--llm-cmd", ev.llm_cmd, "LLM worker argv (prompt)")
        ->capture_default_str();
    add_recording_flags(evaluate, ev.data);
    evaluate->add_option("--dataset", ev.dataset, "dataset label for the report")
        ->capture_default_str();
    evaluate->add_option("--threshold", ev.threshold, "decision threshold")
        ->capture_default_str();
    evaluate->add_flag("--flip", ev.flip, "invert predictions before thresholding");
    evaluate->add_flag("--measure-rtf", ev.measure_rtf,
                       "time prediction and fill the rtf column");
    evaluate->add_option("--window", ev.window, "evaluation window, frames")
        ->capture_default_str();
    evaluate->add_option("--out", ev.out, "report CSV path")->required();
    evaluate->add_option("--trace-dir", ev.trace_dir, "per-recording trace CSVs")
        ->capture_default_str();

    SweepArgs sw;
    auto* sweep = app.add_subcommand("sweep", "threshold sweep with inversion");
    sweep->add_option("--pred", sw.pred, "prediction stream CSV")->required();
    sweep->add_option("--truth", sw.truth, "ground truth CSV")->required();
    sweep->add_option("--window", sw.window, "evaluation window, frames")
        ->capture_default_str();
    sweep->add_flag("--no-flip", sw.no_flip, "skip inverted predictions");
    sweep->add_option("--out", sw.out, "grid CSV path")->required();

    ReportArgs rp;
    auto* report = app.add_subcommand("report", "cross-validated evaluation report");
    report->add_option("--dataset", rp.dataset, "dataset label")
        ->capture_default_str();
    report->add_option("--model", rp.model, "ensemble kind")
        ->check(CLI::IsMember({"passthrough-vap", "passthrough-llm", "lr", "lstm"}))
        ->capture_default_str();
    add_recording_flags(report, rp.data);
    report->add_option("--folds", rp.folds, "fold count")->capture_default_str();
    report->add_flag("--loo", rp.loo, "leave-one-out instead of k-fold");
    report->add_option("--seed", rp.seed, "run seed")->capture_default_str();
    report->add_option("--window", rp.window, "evaluation window, frames")
        ->capture_default_str();
    report->add_option("--epochs", rp.epochs, "training epochs (-1 = default)")
        ->capture_default_str();
    report->add_option("--hidden", rp.hidden, "lstm hidden size")
        ->capture_default_str();
    report->add_option("--heads", rp.heads, "lstm attention heads")
        ->capture_default_str();
    report->add_option("--jobs", rp.jobs, "worker count")->capture_default_str();
    report->add_flag("--measure-rtf", rp.measure_rtf,
                     "time prediction and fill the aggregate rtf column");
    report->add_option("--out", rp.out, "report CSV path")->required();
    report->add_option("--trace-dir", rp.trace_dir, "per-recording trace CSVs")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*prepare) return cmd_prepare(prep);
        if (*train) return cmd_train(tr);
        if (*evaluate) return cmd_evaluate(ev);
        if (*sweep) return cmd_sweep(sw);
        if (*report) return cmd_report(rp);
    } catch (const std::invalid_argument& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 1;
    } catch (const std::runtime_error& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        fmt::print(stderr, "internal error: {}\n", e.what());
        return 2;
    }
    return 2;
}
