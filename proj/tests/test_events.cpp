#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <thread>

#include "reactor/events.hpp"
#include "reactor/sse.hpp"

using namespace reactor;
using namespace std::chrono_literals;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
    auto dir = fs::temp_directory_path() /
               ("reactor-test-" + tag + "-" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("events serialize with stable fields and round-trip through json") {
    Event e;
    e.session_id = "s1";
    e.seq = 3;
    e.type = EventType::Action;
    e.content = "Search(query=\"x\")";
    e.timestamp = "2026-08-16T12:00:00Z";
    e.meta = {{"turn", 2}};
    auto j = e.to_json();
    CHECK(j["session_id"] == "s1");
    CHECK(j["seq"] == 3);
    CHECK(j["event_type"] == "action");
    CHECK(j["content"] == "Search(query=\"x\")");
    CHECK(j["meta"]["turn"] == 2);
    auto back = Event::from_json(j);
    REQUIRE(back.has_value());
    CHECK(*back == e);

    Event bare;
    bare.session_id = "s";
    bare.type = EventType::Thought;
    bare.timestamp = "t";
    CHECK_FALSE(bare.to_json().contains("meta"));
}

TEST_CASE("sequence numbers are per-session and gap-free") {
    EventBus bus;
    bus.open_session("a");
    bus.open_session("b");
    for (int i = 0; i < 5; ++i) bus.emit("a", EventType::Thought, "t" + std::to_string(i));
    bus.emit("b", EventType::Thought, "other");
    auto a = bus.replay("a");
    auto b = bus.replay("b");
    REQUIRE(a->size() == 5);
    for (size_t i = 0; i < a->size(); ++i) CHECK((*a)[i].seq == i);
    REQUIRE(b->size() == 1);
    CHECK((*b)[0].seq == 0);
}

TEST_CASE("session ids are validated and duplicates rejected") {
    EventBus bus;
    CHECK_THROWS(bus.open_session(""));
    CHECK_THROWS(bus.open_session("a/b"));
    CHECK_THROWS(bus.open_session("..sneaky"));
    bus.open_session("fine");
    CHECK_THROWS(bus.open_session("fine"));
    CHECK_THROWS(bus.emit("ghost", EventType::Thought, "no session"));
}

TEST_CASE("subscribe replays history atomically before live events") {
    EventBus bus;
    bus.open_session("s");
    for (int i = 0; i < 3; ++i) bus.emit("s", EventType::Thought, "old" + std::to_string(i));

    auto sub = bus.subscribe("s", 0);
    REQUIRE(sub);
    bus.emit("s", EventType::Result, "live");

    std::vector<Event> seen;
    while (auto e = sub->next(50ms)) {
        seen.push_back(*e);
        if (seen.size() == 4) break;
    }
    REQUIRE(seen.size() == 4);
    for (size_t i = 0; i < 4; ++i) CHECK(seen[i].seq == i);
    CHECK(seen[3].content == "live");
}

TEST_CASE("subscribe honors from_seq") {
    EventBus bus;
    bus.open_session("s");
    for (int i = 0; i < 6; ++i) bus.emit("s", EventType::Thought, std::to_string(i));
    auto sub = bus.subscribe("s", 4);
    auto e = sub->next(10ms);
    REQUIRE(e.has_value());
    CHECK(e->seq == 4);
    e = sub->next(10ms);
    REQUIRE(e.has_value());
    CHECK(e->seq == 5);
    CHECK_FALSE(sub->next(10ms).has_value());
}

TEST_CASE("closing a session ends its subscriptions after the backlog drains") {
    EventBus bus;
    bus.open_session("s");
    bus.emit("s", EventType::Thought, "one");
    auto sub = bus.subscribe("s", 0);
    bus.emit("s", EventType::FinalAnswer, "two");
    bus.close_session("s");
    CHECK(bus.session_finished("s"));

    std::vector<Event> seen;
    while (auto e = sub->next(50ms)) seen.push_back(*e);
    CHECK(seen.size() == 2);
    CHECK(sub->ended());
    CHECK_FALSE(sub->dropped());
    CHECK_THROWS(bus.emit("s", EventType::Thought, "after close"));
}

TEST_CASE("concurrent writers on distinct sessions never interleave sequences") {
    EventBus bus;
    constexpr int kSessions = 8, kEvents = 200;
    for (int s = 0; s < kSessions; ++s) bus.open_session("w" + std::to_string(s));
    std::vector<std::thread> writers;
    for (int s = 0; s < kSessions; ++s)
        writers.emplace_back([&bus, s] {
            for (int i = 0; i < kEvents; ++i)
                bus.emit("w" + std::to_string(s), EventType::Thought, std::to_string(i));
        });
    for (auto& t : writers) t.join();
    for (int s = 0; s < kSessions; ++s) {
        auto events = bus.replay("w" + std::to_string(s));
        REQUIRE(events->size() == kEvents);
        for (size_t i = 0; i < events->size(); ++i) {
            CHECK((*events)[i].seq == i);
            CHECK((*events)[i].content == std::to_string(i));
        }
    }
}

TEST_CASE("mid-stream subscribers see every event exactly once") {
    EventBus bus;
    bus.open_session("busy");
    constexpr int kTotal = 500;
    std::vector<std::shared_ptr<Subscription>> subs;
    std::thread writer([&] {
        for (int i = 0; i < kTotal; ++i) bus.emit("busy", EventType::Thought, std::to_string(i));
        bus.close_session("busy");
    });
    // Subscribe while the writer is mid-flight.
    for (int i = 0; i < 4; ++i) {
        std::this_thread::sleep_for(1ms);
        subs.push_back(bus.subscribe("busy", 0));
    }
    writer.join();
    for (auto& sub : subs) {
        REQUIRE(sub);
        std::set<std::uint64_t> seqs;
        while (auto e = sub->next(50ms)) {
            CHECK(seqs.insert(e->seq).second);  // no duplicates
            if (seqs.size() == kTotal) break;
        }
        CHECK(seqs.size() == kTotal);
        CHECK(*seqs.begin() == 0);
        CHECK(*seqs.rbegin() == kTotal - 1);
    }
}

TEST_CASE("slow subscribers are disconnected instead of blocking the bus") {
    EventBusConfig cfg;
    cfg.subscriber_buffer = 16;
    EventBus bus(cfg);
    bus.open_session("fast");
    auto sub = bus.subscribe("fast", 0);
    for (int i = 0; i < 200; ++i) bus.emit("fast", EventType::Thought, std::to_string(i));
    // The subscriber never drained, so it must have been dropped, and the
    // emitter never blocked.
    int drained = 0;
    while (sub->next(0ms)) ++drained;
    CHECK(drained <= 16);
    CHECK(sub->dropped());
    CHECK(bus.replay("fast")->size() == 200);
}

TEST_CASE("traces persist as one json object per line and replay from disk") {
    auto dir = fresh_dir("ndjson");
    EventBusConfig cfg;
    cfg.trace_dir = dir;
    {
        EventBus bus(cfg);
        bus.open_session("job");
        bus.emit("job", EventType::Thought, "find it");
        bus.emit("job", EventType::Action, "Search(query=\"x\")", {{"turn", 1}});
        bus.emit("job", EventType::FinalAnswer, "done");
        bus.close_session("job");
    }
    auto file = dir / "job.ndjson";
    REQUIRE(fs::exists(file));
    std::ifstream in(file);
    std::string line;
    std::vector<Event> from_disk;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line, nullptr, false);
        REQUIRE_FALSE(j.is_discarded());
        auto e = Event::from_json(j);
        REQUIRE(e.has_value());
        from_disk.push_back(*e);
    }
    REQUIRE(from_disk.size() == 3);
    CHECK(from_disk[0].content == "find it");
    CHECK(from_disk[2].type == EventType::FinalAnswer);

    // A fresh bus over the same directory serves history from disk.
    EventBus revived(cfg);
    auto replayed = revived.replay("job");
    REQUIRE(replayed.has_value());
    REQUIRE(replayed->size() == 3);
    CHECK((*replayed)[1].meta["turn"] == 1);
    auto sub = revived.subscribe("job", 1);
    REQUIRE(sub);
    auto e = sub->next(10ms);
    REQUIRE(e.has_value());
    CHECK(e->seq == 1);
    fs::remove_all(dir);
}

TEST_CASE("replay of an unknown session reports absence") {
    EventBus bus;
    CHECK_FALSE(bus.replay("never").has_value());
    CHECK_FALSE(bus.subscribe("never", 0));
}

// ---- SSE ------------------------------------------------------------------------

TEST_CASE("sse frames carry the event type and single-line json data") {
    Event e;
    e.session_id = "s";
    e.seq = 9;
    e.type = EventType::Result;
    e.content = "multi\nline";
    e.timestamp = "t";
    auto frame = serialize_sse(e);
    CHECK(frame.substr(0, 14) == "event: result\n");
    CHECK(frame.find("\ndata: ") != std::string::npos);
    CHECK(frame.substr(frame.size() - 2) == "\n\n");
    // Exactly one data line: the JSON encodes the newline as \n.
    CHECK(std::count(frame.begin(), frame.end(), '\n') == 3);
}

TEST_CASE("sse parser handles chunk boundaries, comments, and multi-line data") {
    SseParser p;
    p.feed("event: res");
    CHECK(p.take_messages().empty());
    p.feed("ult\ndata: {\"a\":1}\n");
    CHECK(p.take_messages().empty());  // message not dispatched until blank line
    p.feed("\n: comment line\ndata: one\ndata: two\n\n");
    auto msgs = p.take_messages();
    REQUIRE(msgs.size() == 2);
    CHECK(msgs[0].event == "result");
    CHECK(msgs[0].data == "{\"a\":1}");
    CHECK(msgs[1].event.empty());
    CHECK(msgs[1].data == "one\ntwo");
}

TEST_CASE("sse parser tracks ids and supports crlf") {
    SseParser p;
    p.feed("id: 5\r\nevent: thought\r\ndata: x\r\n\r\ndata: y\n\n");
    auto msgs = p.take_messages();
    REQUIRE(msgs.size() == 2);
    CHECK(msgs[0].id == "5");
    CHECK(msgs[1].id == "5");  // last-event-id persists across messages
}

TEST_CASE("every serialized event round-trips through the parser") {
    std::mt19937_64 rng(2026);
    for (int i = 0; i < 500; ++i) {
        Event e;
        e.session_id = "rt";
        e.seq = rng() % 10000;
        e.type = static_cast<EventType>(rng() % 8);
        std::string content;
        int len = static_cast<int>(rng() % 60);
        static const std::vector<std::string> tokens = {
            "a", "b", " ", "c", ":", "\n", "\r", "\"", "\\", "{", "}", "[", "]", "0", ",", "早"};
        for (int k = 0; k < len; ++k) content += tokens[rng() % tokens.size()];
        e.content = content;
        e.timestamp = "2026-08-16T00:00:00Z";
        if (i % 3 == 0) e.meta = {{"turn", i}};

        SseParser p;
        p.feed(serialize_sse(e));
        auto msgs = p.take_messages();
        REQUIRE(msgs.size() == 1);
        auto back = event_from_sse(msgs[0]);
        REQUIRE(back.has_value());
        CHECK(*back == e);
    }
}

TEST_CASE("sse frames split at every possible boundary still parse") {
    Event e;
    e.session_id = "s";
    e.seq = 1;
    e.type = EventType::Action;
    e.content = "A(x=\"y\")";
    e.timestamp = "t";
    auto frame = serialize_sse(e);
    for (size_t cut = 1; cut < frame.size(); ++cut) {
        SseParser p;
        p.feed(frame.substr(0, cut));
        p.feed(frame.substr(cut));
        auto msgs = p.take_messages();
        REQUIRE(msgs.size() == 1);
        auto back = event_from_sse(msgs[0]);
        REQUIRE(back.has_value());
        CHECK(*back == e);
    }
}
