#include "trpfuse/prompt.hpp"

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "fmt/format.h"
#include "json.hpp"

namespace trpfuse {
namespace {

// up to 4 significant digits, trailing zeros trimmed
std::string format_prob(double x) { return fmt::format("{:.4g}", x); }

std::string lower_strip(const std::string& s) {
    std::size_t begin = 0, end = s.size();
    auto junk = [](unsigned char c) {
        return std::isspace(c) || std::ispunct(c);
    };
    while (begin < end && junk(static_cast<unsigned char>(s[begin]))) ++begin;
    while (end > begin && junk(static_cast<unsigned char>(s[end - 1]))) --end;
    std::string out;
    for (std::size_t i = begin; i < end; ++i)
        out += static_cast<char>(std::tolower(static_cast<unsigned char>(s[i])));
    return out;
}

}  // namespace

std::string RenderedPrompt::to_text() const {
    return fmt::format("System: {}\nUser: {}\n", system, user);
}

RenderedPrompt render_prompt(const std::string& segment_text,
                             double vap_confidence, const PromptConfig& cfg) {
    if (vap_confidence < 0.0 || vap_confidence > 1.0)
        throw std::invalid_argument(
            fmt::format("vap_confidence {} outside [0,1]", vap_confidence));
    const bool yes = vap_confidence <= cfg.vap_yes_cutoff;
    RenderedPrompt out;
    out.system = cfg.system_text;
    out.user = fmt::format(
        "Speech segment: {}\nVAP confidence: {} (threshold: {}, prediction: {})",
        segment_text, format_prob(1.0 - vap_confidence),
        format_prob(cfg.vap_threshold_display), yes ? "yes" : "no");
    return out;
}

LlmVerdict parse_response(const std::string& raw_text) {
    LlmVerdict verdict;
    verdict.raw_text = raw_text;
    const std::string norm = lower_strip(raw_text);
    // leading-token match covers replies like "Yes, because ..."
    auto leads = [&norm](const char* word) {
        const std::size_t n = std::char_traits<char>::length(word);
        if (norm.compare(0, n, word) != 0) return false;
        return norm.size() == n ||
               !std::isalnum(static_cast<unsigned char>(norm[n]));
    };
    if (leads("yes"))
        verdict.value = Verdict::kYes;
    else if (leads("no"))
        verdict.value = Verdict::kNo;
    else
        verdict.value = Verdict::kUnparseable;
    return verdict;
}

std::string truncate_context(const std::vector<TimedWord>& words, double now_s,
                             double max_context_s) {
    const double cutoff = now_s - max_context_s;
    std::string out;
    for (const auto& w : words) {
        if (w.time_s <= cutoff) continue;
        if (!out.empty()) out += ' ';
        out += w.token;
    }
    return out;
}

SubprocessLlmClient::SubprocessLlmClient(const std::vector<std::string>& argv) {
    if (argv.empty()) throw std::invalid_argument("empty client command");
    int in_pipe[2], out_pipe[2];
    if (pipe(in_pipe) != 0 || pipe(out_pipe) != 0)
        throw std::runtime_error("pipe failed");
    const int pid = fork();
    if (pid < 0) throw std::runtime_error("fork failed");
    if (pid == 0) {
        dup2(in_pipe[0], STDIN_FILENO);
        dup2(out_pipe[1], STDOUT_FILENO);
        close(in_pipe[0]);
        close(in_pipe[1]);
        close(out_pipe[0]);
        close(out_pipe[1]);
        std::vector<char*> args;
        for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
        args.push_back(nullptr);
        execvp(args[0], args.data());
        _exit(127);
    }
    close(in_pipe[0]);
    close(out_pipe[1]);
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];
    pid_ = pid;
}

SubprocessLlmClient::~SubprocessLlmClient() {
    if (to_child_ >= 0) close(to_child_);
    if (from_child_ >= 0) close(from_child_);
    if (pid_ > 0) {
        int status = 0;
        waitpid(pid_, &status, 0);
    }
}

LlmResponse SubprocessLlmClient::ask(const LlmRequest& request) {
    nlohmann::json req = {{"id", request.id},
                          {"system", request.system},
                          {"user", request.user},
                          {"temperature", request.temperature},
                          {"top_p", request.top_p}};
    const std::string line = req.dump() + "\n";
    std::size_t written = 0;
    while (written < line.size()) {
        const ssize_t n =
            write(to_child_, line.data() + written, line.size() - written);
        if (n <= 0)
            throw std::runtime_error(
                fmt::format("LLM client write failed at request id {}", request.id));
        written += static_cast<std::size_t>(n);
    }

    for (;;) {
        const auto nl = buffer_.find('\n');
        if (nl != std::string::npos) {
            const std::string reply = buffer_.substr(0, nl);
            buffer_.erase(0, nl + 1);
            nlohmann::json doc = nlohmann::json::parse(reply);
            LlmResponse resp;
            resp.id = doc.at("id").get<std::int64_t>();
            resp.text = doc.at("text").get<std::string>();
            if (doc.contains("prob")) resp.prob = doc.at("prob").get<double>();
            if (resp.id != request.id)
                throw std::runtime_error(
                    fmt::format("LLM client answered id {} to request id {}",
                                resp.id, request.id));
            return resp;
        }
        char chunk[4096];
        const ssize_t n = read(from_child_, chunk, sizeof(chunk));
        if (n <= 0)
            throw std::runtime_error(
                fmt::format("LLM client stream closed at request id {}", request.id));
        buffer_.append(chunk, static_cast<std::size_t>(n));
    }
}

ReplayLlmClient::ReplayLlmClient(const std::string& csv_path) {
    std::ifstream in(csv_path);
    if (!in) throw std::runtime_error(fmt::format("cannot open {}", csv_path));
    std::string line;
    if (!std::getline(in, line) || line != "id,text")
        throw std::runtime_error(fmt::format("{}: expected header id,text", csv_path));
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw std::runtime_error(fmt::format("{}: malformed row", csv_path));
        rows_.emplace_back(std::stoll(line.substr(0, comma)),
                           line.substr(comma + 1));
    }
}

LlmResponse ReplayLlmClient::ask(const LlmRequest& request) {
    for (const auto& [id, text] : rows_)
        if (id == request.id) return {id, text, std::nullopt};
    throw std::runtime_error(
        fmt::format("replay file has no response for request id {}", request.id));
}

FrameStream prompt_ensemble_predict(const std::vector<TurnSpan>& transcript,
                                    const FrameStream& vap, LlmClient& client,
                                    const PromptConfig& cfg) {
    // word clock: span words spread uniformly across the span
    std::vector<TimedWord> words;
    for (const auto& span : transcript) {
        std::vector<std::string> tokens;
        std::istringstream ts(span.text);
        std::string tok;
        while (ts >> tok) tokens.push_back(tok);
        const double step =
            tokens.empty() ? 0.0
                           : (span.end_s - span.start_s) / static_cast<double>(tokens.size());
        for (std::size_t i = 0; i < tokens.size(); ++i)
            words.push_back({span.start_s + step * (static_cast<double>(i) + 1.0),
                             std::move(tokens[i])});
    }

    const auto total_frames = static_cast<std::int64_t>(vap.values.size());
    std::vector<PredictionSpan> verdict_spans;
    std::int64_t next_id = 0;
    std::size_t word_cursor = 0;
    for (const auto& span : transcript) {
        while (word_cursor < words.size() && words[word_cursor].time_s <= span.end_s)
            ++word_cursor;
        const std::vector<TimedWord> context(words.begin(),
                                             words.begin() + static_cast<long>(word_cursor));

        auto end_frame = static_cast<std::int64_t>(
                             std::ceil(span.end_s * vap.frame_rate)) - 1;
        end_frame = std::clamp<std::int64_t>(end_frame, 0, total_frames - 1);
        const double vap_conf =
            total_frames > 0 ? vap.values[static_cast<std::size_t>(end_frame)] : 0.0;

        const auto rendered = render_prompt(
            truncate_context(context, span.end_s, cfg.max_context_s), vap_conf, cfg);
        LlmRequest req;
        req.id = next_id++;
        req.system = rendered.system;
        req.user = rendered.user;
        req.temperature = cfg.temperature;
        req.top_p = cfg.top_p;

        LlmResponse resp;
        try {
            resp = client.ask(req);
        } catch (const std::exception& e) {
            throw std::runtime_error(fmt::format(
                "prompt ensemble aborted at decision point {} (turn ending {:.2f}s): {}",
                req.id, span.end_s, e.what()));
        }

        double prob;
        if (resp.prob.has_value()) {
            prob = std::clamp(*resp.prob, 0.0, 1.0);
        } else {
            switch (parse_response(resp.text).value) {
                case Verdict::kYes: prob = 1.0; break;
                case Verdict::kNo: prob = 0.0; break;
                case Verdict::kUnparseable: prob = 1.0 - vap_conf; break;
            }
        }
        verdict_spans.push_back({span.start_s, span.end_s, prob});
    }

    auto out = expand_utterance_predictions(std::move(verdict_spans), total_frames,
                                            vap.frame_rate);
    out.source_id = "prompt";
    return out;
}

}  // namespace trpfuse
