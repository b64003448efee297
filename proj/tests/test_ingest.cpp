#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "trpfuse/ingest.hpp"
#include "trpfuse/rng.hpp"

using namespace trpfuse;

namespace {

std::string test_data_dir() {
    const char* dir = std::getenv("TRPFUSE_TEST_DATA");
    REQUIRE(dir != nullptr);
    return dir;
}

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("parse_ccpe reads the fixture in order") {
    auto dialogs = parse_ccpe_file(test_data_dir() + "/fixtures/ccpe_small.json");
    REQUIRE(dialogs.size() == 2);
    CHECK(dialogs[0].id == "CCPE-0001");
    REQUIRE(dialogs[0].utterances.size() == 3);
    CHECK(dialogs[0].utterances[0].speaker == Speaker::kAssistant);
    CHECK(dialogs[0].utterances[1].speaker == Speaker::kUser);
    CHECK(dialogs[0].utterances[1].text == "I really enjoy science fiction movies");
    CHECK(dialogs[1].utterances[2].text == "What did you think of it?");
}

TEST_CASE("parse_ccpe of an empty array") {
    CHECK(parse_ccpe("[]").empty());
}

TEST_CASE("parse_ccpe reports the byte offset of malformed JSON") {
    CHECK_THROWS_WITH_AS(parse_ccpe("[{\"conversationId\": }]"),
                         doctest::Contains("byte"), std::runtime_error);
}

TEST_CASE("parse_ccpe names the missing field and dialog") {
    const std::string doc =
        R"([{"conversationId": "D1", "utterances": [{"speaker": "USER"}]}])";
    CHECK_THROWS_WITH_AS(parse_ccpe(doc), doctest::Contains("text"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(parse_ccpe(doc), doctest::Contains("D1"),
                         std::runtime_error);
}

TEST_CASE("timeline lays out two turns with a trailing gap") {
    Dialog d{"d", {{Speaker::kUser, "one two three four five"},
                   {Speaker::kAssistant, "six seven eight nine ten"}}};
    auto [truth, spans] = build_ccpe_timeline(d, {});
    CHECK(truth.events == std::vector<std::int64_t>{99, 299});
    CHECK(truth.total_frames == 400);
    REQUIRE(spans.size() == 2);
    CHECK(spans[0].start_s == 0.0);
    CHECK(spans[0].end_s == doctest::Approx(2.0));
    CHECK(spans[1].start_s == doctest::Approx(4.0));
    CHECK(spans[1].end_s == doctest::Approx(6.0));
}

TEST_CASE("timeline of a single one-word turn") {
    Dialog d{"d", {{Speaker::kUser, "hello"}}};
    auto [truth, spans] = build_ccpe_timeline(d, {});
    CHECK(truth.events == std::vector<std::int64_t>{19});  // 0.4 s at 50 Hz
}

TEST_CASE("timeline rejects an empty dialog") {
    CHECK_THROWS_AS(build_ccpe_timeline(Dialog{"d", {}}, {}),
                    std::invalid_argument);
}

TEST_CASE("consecutive same-speaker utterances form one turn") {
    Dialog d{"d", {{Speaker::kUser, "a b c"},
                   {Speaker::kUser, "d e"},
                   {Speaker::kAssistant, "f"}}};
    auto [truth, spans] = build_ccpe_timeline(d, {});
    CHECK(spans.size() == 2);
    CHECK(spans[0].text == "a b c d e");
    CHECK(truth.events.size() == 2);
}

TEST_CASE("timeline events sit at turn-final frames") {
    SplitMix64 rng(23);
    TimelineConfig cfg;
    for (int trial = 0; trial < 20; ++trial) {
        Dialog d{"d", {}};
        const int n = 1 + static_cast<int>(rng.below(8));
        for (int i = 0; i < n; ++i) {
            std::string text;
            const int words = 1 + static_cast<int>(rng.below(12));
            for (int w = 0; w < words; ++w) text += w ? " w" : "w";
            d.utterances.push_back(
                {rng.below(2) ? Speaker::kUser : Speaker::kAssistant, text});
        }
        auto [truth, spans] = build_ccpe_timeline(d, cfg);
        REQUIRE(truth.events.size() == spans.size());
        for (std::size_t k = 0; k < spans.size(); ++k) {
            const auto last_frame =
                static_cast<std::int64_t>(std::llround(spans[k].end_s * 50)) - 1;
            CHECK(truth.events[k] == last_frame);
        }
    }
}

TEST_CASE("icc aggregation emits one event for agreeing participants") {
    ParticipantResponses resp;
    resp.n_participants = 10;
    resp.responses.assign(10, {});
    resp.responses[0] = {500};
    resp.responses[1] = {505};
    resp.responses[2] = {510};
    auto truth = aggregate_icc_labels(resp, 1000);
    REQUIRE(truth.events.size() == 1);
    CHECK(truth.events[0] >= 495);
    CHECK(truth.events[0] <= 515);
}

TEST_CASE("icc aggregation below the agreement threshold emits nothing") {
    ParticipantResponses resp;
    resp.n_participants = 10;
    resp.responses.assign(10, {});
    resp.responses[0] = {500};
    resp.responses[1] = {500};
    auto truth = aggregate_icc_labels(resp, 1000);
    CHECK(truth.events.empty());  // 2 < ceil(0.3 * 10)
}

TEST_CASE("icc aggregation with one participant") {
    ParticipantResponses resp;
    resp.n_participants = 1;
    resp.responses = {{0}};
    auto truth = aggregate_icc_labels(resp, 100);
    REQUIRE(truth.events.size() == 1);
    CHECK(truth.events[0] == 18);  // center of run [0, 37]
}

TEST_CASE("icc aggregation rejects zero frames") {
    ParticipantResponses resp;
    resp.n_participants = 1;
    resp.responses = {{0}};
    CHECK_THROWS_AS(aggregate_icc_labels(resp, 0), std::invalid_argument);
}

TEST_CASE("full agreement with one participant reduces to dilated runs") {
    ParticipantResponses resp;
    resp.n_participants = 1;
    resp.responses = {{100, 400}};
    auto truth = aggregate_icc_labels(resp, 1000, 1.0);
    CHECK(truth.events == std::vector<std::int64_t>{100, 400});
}

// Event counts themselves are not monotone in the agreement level: a
// higher threshold can split one covered run into two, which emits two
// run-center events where there was one.  What does shrink is the set of
// frames meeting the threshold, and every event stays inside that set.
TEST_CASE("raising agreement shrinks the covered frame set") {
    SplitMix64 rng(29);
    for (int trial = 0; trial < 20; ++trial) {
        ParticipantResponses resp;
        resp.n_participants = 5;
        resp.responses.assign(5, {});
        for (auto& r : resp.responses)
            for (int i = 0; i < 3; ++i)
                r.push_back(static_cast<std::int64_t>(rng.below(2000)));
        const auto coverage = icc_coverage(resp, 2000);
        std::vector<std::uint8_t> prev(2000, 1);
        for (double agreement : {0.2, 0.4, 0.6, 0.8, 1.0}) {
            const auto needed = static_cast<std::int64_t>(
                std::ceil(agreement * resp.n_participants - 1e-9));
            std::vector<std::uint8_t> covered(2000, 0);
            for (std::size_t f = 0; f < coverage.size(); ++f) {
                covered[f] = coverage[f] >= needed;
                CHECK(covered[f] <= prev[f]);
            }
            for (std::int64_t e :
                 aggregate_icc_labels(resp, 2000, agreement).events)
                CHECK(covered[static_cast<std::size_t>(e)] == 1);
            prev = covered;
        }
    }
}

TEST_CASE("prediction stream round-trips bitwise") {
    SplitMix64 rng(37);
    FrameStream s;
    for (int i = 0; i < 100; ++i) s.values.push_back(rng.uniform());
    const auto path = tmp_path("trpfuse_stream.csv");
    store_prediction_stream(s, path);
    auto loaded = load_prediction_stream(path);
    CHECK(loaded.values == s.values);
}

TEST_CASE("stream loader reports the offending row for bad probs") {
    const auto path = tmp_path("trpfuse_badprob.csv");
    std::ofstream(path) << "frame,prob\n0,0.5\n1,1.5\n";
    CHECK_THROWS_WITH_AS(load_prediction_stream(path), doctest::Contains(":3"),
                         std::runtime_error);
}

TEST_CASE("stream loader detects non-dense frames") {
    const auto path = tmp_path("trpfuse_gap.csv");
    std::ofstream(path) << "frame,prob\n0,0.5\n1,0.5\n3,0.5\n";
    CHECK_THROWS_WITH_AS(load_prediction_stream(path), doctest::Contains("2"),
                         std::runtime_error);
}

TEST_CASE("ground truth round-trips with its meta sidecar") {
    GroundTruth truth{{10, 200, 4000}, 5000};
    const auto path = tmp_path("trpfuse_truth.csv");
    store_ground_truth(truth, path);
    auto loaded = load_ground_truth(path);
    CHECK(loaded.events == truth.events);
    CHECK(loaded.total_frames == truth.total_frames);
}

TEST_CASE("icc response file round-trip") {
    const auto path = tmp_path("trpfuse_resp.csv");
    std::ofstream(path) << "participant_id,response_frame\n0,100\n1,105\n0,400\n";
    auto resp = load_icc_responses(path);
    CHECK(resp.n_participants == 2);
    CHECK(resp.responses[0] == std::vector<std::int64_t>{100, 400});
    CHECK(resp.responses[1] == std::vector<std::int64_t>{105});
}

TEST_CASE("turn spans round-trip including quoted text") {
    std::vector<TurnSpan> spans = {{0.0, 2.0, Speaker::kUser, "hello, \"world\""},
                                   {4.0, 6.0, Speaker::kAssistant, "ok"}};
    const auto path = tmp_path("trpfuse_spans.csv");
    store_turn_spans(spans, path);
    auto loaded = load_turn_spans(path);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].text == "hello, \"world\"");
    CHECK(loaded[1].speaker == Speaker::kAssistant);
    CHECK(loaded[1].start_s == 4.0);
}
