#include "trpfuse/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "fmt/format.h"
#include "json.hpp"

namespace trpfuse {
namespace {

std::int64_t word_count(const std::string& text) {
    std::istringstream in(text);
    std::string w;
    std::int64_t n = 0;
    while (in >> w) ++n;
    return n;
}

Speaker parse_speaker(const std::string& s, const std::string& dialog_id) {
    if (s == "USER") return Speaker::kUser;
    if (s == "ASSISTANT") return Speaker::kAssistant;
    throw std::runtime_error(
        fmt::format("dialog {}: unknown speaker '{}'", dialog_id, s));
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(fmt::format("cannot open {}", path));
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", path));
    return out;
}

// Splits one CSV line; handles double-quoted fields with "" escapes.
std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

std::string quote_csv(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

}  // namespace

std::vector<Dialog> parse_ccpe(const std::string& json_bytes) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(json_bytes);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(
            fmt::format("CCPE parse error at byte {}: {}", e.byte, e.what()));
    }
    if (!doc.is_array())
        throw std::runtime_error("CCPE document is not a JSON array");

    std::vector<Dialog> dialogs;
    dialogs.reserve(doc.size());
    for (const auto& conv : doc) {
        Dialog d;
        if (!conv.contains("conversationId"))
            throw std::runtime_error(fmt::format(
                "CCPE schema error: missing conversationId in dialog #{}",
                dialogs.size()));
        d.id = conv.at("conversationId").get<std::string>();
        if (!conv.contains("utterances"))
            throw std::runtime_error(fmt::format(
                "CCPE schema error: missing utterances in dialog {}", d.id));
        for (const auto& utt : conv.at("utterances")) {
            for (const char* field : {"speaker", "text"}) {
                if (!utt.contains(field))
                    throw std::runtime_error(fmt::format(
                        "CCPE schema error: missing {} in dialog {}", field, d.id));
            }
            d.utterances.push_back({parse_speaker(utt.at("speaker"), d.id),
                                    utt.at("text").get<std::string>()});
        }
        dialogs.push_back(std::move(d));
    }
    return dialogs;
}

std::vector<Dialog> parse_ccpe_file(const std::string& path) {
    return parse_ccpe(read_file(path));
}

std::pair<GroundTruth, std::vector<TurnSpan>> build_ccpe_timeline(
    const Dialog& dialog, const TimelineConfig& cfg) {
    if (dialog.utterances.empty())
        throw std::invalid_argument(
            fmt::format("dialog {} has no utterances", dialog.id));
    if (cfg.gap_s < 0 || cfg.words_per_s <= 0)
        throw std::invalid_argument("invalid timeline config");

    const auto gap_frames =
        static_cast<std::int64_t>(std::llround(cfg.gap_s * cfg.frame_rate));

    GroundTruth truth;
    std::vector<TurnSpan> spans;
    std::int64_t cursor = 0;  // frame position

    std::size_t i = 0;
    while (i < dialog.utterances.size()) {
        // maximal same-speaker run = one turn
        const Speaker spk = dialog.utterances[i].speaker;
        std::int64_t turn_frames = 0;
        std::string text;
        for (; i < dialog.utterances.size() && dialog.utterances[i].speaker == spk;
             ++i) {
            const auto& utt = dialog.utterances[i];
            const double dur_s = word_count(utt.text) / cfg.words_per_s;
            turn_frames += std::max<std::int64_t>(
                1, std::llround(dur_s * cfg.frame_rate));
            if (!text.empty()) text += ' ';
            text += utt.text;
        }
        spans.push_back({static_cast<double>(cursor) / cfg.frame_rate,
                         static_cast<double>(cursor + turn_frames) / cfg.frame_rate,
                         spk, std::move(text)});
        cursor += turn_frames;
        truth.events.push_back(cursor - 1);  // turn-final frame
        cursor += gap_frames;
    }
    truth.total_frames = cursor;  // includes the trailing gap
    truth.validate();
    return {std::move(truth), std::move(spans)};
}

std::vector<std::int64_t> icc_coverage(const ParticipantResponses& resp,
                                       std::int64_t total_frames,
                                       std::int64_t smear_frames) {
    if (resp.n_participants < 1)
        throw std::invalid_argument("need at least one participant");
    if (total_frames <= 0)
        throw std::invalid_argument("total_frames must be positive");
    if (static_cast<int>(resp.responses.size()) != resp.n_participants)
        throw std::invalid_argument("participant count mismatch");

    std::vector<std::int64_t> coverage(static_cast<std::size_t>(total_frames), 0);
    for (const auto& frames : resp.responses) {
        // distinct-participant coverage: union of this participant's
        // smeared responses before counting
        std::vector<std::uint8_t> covered(static_cast<std::size_t>(total_frames), 0);
        for (std::int64_t r : frames) {
            if (r < 0) throw std::invalid_argument("negative response frame");
            const std::int64_t lo = std::max<std::int64_t>(0, r - smear_frames);
            const std::int64_t hi = std::min(total_frames - 1, r + smear_frames);
            for (std::int64_t f = lo; f <= hi; ++f)
                covered[static_cast<std::size_t>(f)] = 1;
        }
        for (std::int64_t f = 0; f < total_frames; ++f)
            coverage[static_cast<std::size_t>(f)] += covered[static_cast<std::size_t>(f)];
    }
    return coverage;
}

GroundTruth aggregate_icc_labels(const ParticipantResponses& resp,
                                 std::int64_t total_frames, double agreement,
                                 std::int64_t smear_frames) {
    const auto coverage = icc_coverage(resp, total_frames, smear_frames);
    const auto needed = static_cast<std::int64_t>(
        std::ceil(agreement * resp.n_participants - 1e-9));

    GroundTruth truth;
    truth.total_frames = total_frames;
    std::int64_t run_start = -1;
    for (std::int64_t f = 0; f <= total_frames; ++f) {
        const bool hit =
            f < total_frames && coverage[static_cast<std::size_t>(f)] >= needed;
        if (hit && run_start < 0) run_start = f;
        if (!hit && run_start >= 0) {
            truth.events.push_back((run_start + (f - 1)) / 2);
            run_start = -1;
        }
    }
    truth.validate();
    return truth;
}

ParticipantResponses load_icc_responses(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(fmt::format("cannot open {}", path));
    std::string line;
    if (!std::getline(in, line) || split_csv_line(line) !=
            std::vector<std::string>{"participant_id", "response_frame"})
        throw std::runtime_error(
            fmt::format("{}: expected header participant_id,response_frame", path));

    std::vector<std::pair<std::int64_t, std::int64_t>> rows;
    std::int64_t max_id = -1;
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != 2)
            throw std::runtime_error(fmt::format("{}:{}: expected 2 fields", path, row));
        const std::int64_t id = std::stoll(fields[0]);
        const std::int64_t frame = std::stoll(fields[1]);
        if (id < 0 || frame < 0)
            throw std::runtime_error(fmt::format("{}:{}: negative value", path, row));
        rows.emplace_back(id, frame);
        max_id = std::max(max_id, id);
    }
    if (max_id < 0) throw std::runtime_error(fmt::format("{}: no responses", path));

    ParticipantResponses resp;
    resp.n_participants = static_cast<int>(max_id + 1);
    resp.responses.resize(static_cast<std::size_t>(resp.n_participants));
    for (const auto& [id, frame] : rows)
        resp.responses[static_cast<std::size_t>(id)].push_back(frame);
    return resp;
}

FrameStream load_prediction_stream(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(fmt::format("cannot open {}", path));
    std::string line;
    if (!std::getline(in, line) || line != "frame,prob")
        throw std::runtime_error(fmt::format("{}: expected header frame,prob", path));

    FrameStream stream;
    stream.source_id = path;
    std::int64_t expected = 0;
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != 2)
            throw std::runtime_error(fmt::format("{}:{}: expected 2 fields", path, row));
        const std::int64_t frame = std::stoll(fields[0]);
        if (frame != expected)
            throw std::runtime_error(fmt::format(
                "{}:{}: non-dense frame index, expected {} got {}", path, row,
                expected, frame));
        const double prob = std::stod(fields[1]);
        if (prob < 0.0 || prob > 1.0)
            throw std::runtime_error(
                fmt::format("{}:{}: prob {} outside [0,1]", path, row, prob));
        stream.values.push_back(prob);
        ++expected;
    }
    return stream;
}

void store_prediction_stream(const FrameStream& stream, const std::string& path) {
    auto out = open_out(path);
    out << "frame,prob\n";
    for (std::size_t f = 0; f < stream.values.size(); ++f)
        out << f << ',' << fmt::format("{:.17g}", stream.values[f]) << '\n';
}

GroundTruth load_ground_truth(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(fmt::format("cannot open {}", path));
    std::string line;
    if (!std::getline(in, line) || line != "event_frame")
        throw std::runtime_error(fmt::format("{}: expected header event_frame", path));

    GroundTruth truth;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        truth.events.push_back(std::stoll(line));
    }

    const std::string meta_path = path + ".meta";
    std::ifstream meta(meta_path);
    if (!meta) throw std::runtime_error(fmt::format("cannot open {}", meta_path));
    bool have_total = false;
    while (std::getline(meta, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        if (line.substr(0, eq) == "total_frames") {
            truth.total_frames = std::stoll(line.substr(eq + 1));
            have_total = true;
        }
    }
    if (!have_total)
        throw std::runtime_error(fmt::format("{}: missing total_frames", meta_path));
    truth.validate();
    return truth;
}

void store_ground_truth(const GroundTruth& truth, const std::string& path) {
    truth.validate();
    auto out = open_out(path);
    out << "event_frame\n";
    for (std::int64_t e : truth.events) out << e << '\n';
    auto meta = open_out(path + ".meta");
    meta << "total_frames=" << truth.total_frames << '\n';
}

void store_turn_spans(const std::vector<TurnSpan>& spans, const std::string& path) {
    auto out = open_out(path);
    out << "start_s,end_s,speaker,text\n";
    for (const auto& s : spans) {
        out << fmt::format("{:.17g},{:.17g},{},{}\n", s.start_s, s.end_s,
                           s.speaker == Speaker::kUser ? "USER" : "ASSISTANT",
                           quote_csv(s.text));
    }
}

std::vector<TurnSpan> load_turn_spans(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(fmt::format("cannot open {}", path));
    std::string line;
    if (!std::getline(in, line) || line != "start_s,end_s,speaker,text")
        throw std::runtime_error(fmt::format("{}: bad turn-span header", path));
    std::vector<TurnSpan> spans;
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != 4)
            throw std::runtime_error(fmt::format("{}:{}: expected 4 fields", path, row));
        TurnSpan s;
        s.start_s = std::stod(fields[0]);
        s.end_s = std::stod(fields[1]);
        s.speaker = fields[2] == "USER" ? Speaker::kUser : Speaker::kAssistant;
        s.text = fields[3];
        spans.push_back(std::move(s));
    }
    return spans;
}

}  // namespace trpfuse
