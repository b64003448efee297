#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "trpfuse/ingest.hpp"
#include "trpfuse/timeline.hpp"

namespace trpfuse {

inline constexpr const char* kPrompt2System =
    "You are having a conversation with a user. Your task is to identify if "
    "the user has finished their turn. Answer with only 'yes' or 'no'.";

struct PromptConfig {
    double vap_threshold_display = 0.9;
    double vap_yes_cutoff = 0.1;
    double max_context_s = 10.0;
    std::string system_text = kPrompt2System;
    double temperature = 0.1;
    double top_p = 0.9;
};

struct RenderedPrompt {
    std::string system;
    std::string user;

    std::string to_text() const;  // "System: ...\nUser: ..." golden format
};

enum class Verdict { kYes, kNo, kUnparseable };

struct LlmVerdict {
    Verdict value = Verdict::kUnparseable;
    std::string raw_text;
};

RenderedPrompt render_prompt(const std::string& segment_text,
                             double vap_confidence, const PromptConfig& cfg);

LlmVerdict parse_response(const std::string& raw_text);

struct TimedWord {
    double time_s = 0.0;
    std::string token;
};

// Tokens with time > now_s - max_context_s, single-space joined.
std::string truncate_context(const std::vector<TimedWord>& words, double now_s,
                             double max_context_s = 10.0);

struct LlmRequest {
    std::int64_t id = 0;
    std::string system;
    std::string user;
    double temperature = 0.1;
    double top_p = 0.9;
};

struct LlmResponse {
    std::int64_t id = 0;
    std::string text;
    std::optional<double> prob;  // token-probability score, used verbatim
};

class LlmClient {
  public:
    virtual ~LlmClient() = default;
    virtual LlmResponse ask(const LlmRequest& request) = 0;
};

// Newline-delimited JSON over a child process's stdin/stdout.
class SubprocessLlmClient : public LlmClient {
  public:
    explicit SubprocessLlmClient(const std::vector<std::string>& argv);
    ~SubprocessLlmClient() override;
    SubprocessLlmClient(const SubprocessLlmClient&) = delete;
    SubprocessLlmClient& operator=(const SubprocessLlmClient&) = delete;

    LlmResponse ask(const LlmRequest& request) override;

  private:
    int to_child_ = -1;
    int from_child_ = -1;
    int pid_ = -1;
    std::string buffer_;
};

// Offline replay from CSV `id,text`.
class ReplayLlmClient : public LlmClient {
  public:
    explicit ReplayLlmClient(const std::string& csv_path);
    LlmResponse ask(const LlmRequest& request) override;

  private:
    std::vector<std::pair<std::int64_t, std::string>> rows_;
};

// One LLM exchange per turn-final decision point; verdicts expanded back
// onto the frame clock.  UNPARSEABLE falls back to 1 - vap_confidence.
FrameStream prompt_ensemble_predict(const std::vector<TurnSpan>& transcript,
                                    const FrameStream& vap, LlmClient& client,
                                    const PromptConfig& cfg);

}  // namespace trpfuse
