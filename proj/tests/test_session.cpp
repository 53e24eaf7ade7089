#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <memory>
#include <random>

#include "reactor/engine.hpp"

using namespace reactor;
using namespace std::chrono_literals;

namespace {

ToolDescriptor describe_tool(std::string name, Locality locality = Locality::Local) {
    ToolDescriptor d;
    d.name = name;
    d.description = "test tool";
    d.endpoint = "inproc:" + name;
    d.signature.params = {{"key", SemanticType::String, false},
                          {"attachment", SemanticType::String, false},
                          {"page", SemanticType::Integer, false},
                          {"pages", SemanticType::String, false}};
    d.max_parallel = 4;
    d.locality = locality;
    return d;
}

struct CountingTool {
    std::atomic<int> calls{0};
};

// Installs `name` returning `reply`, counting invocations.
std::shared_ptr<CountingTool> add_tool(Engine& engine, const std::string& name,
                                       std::string reply,
                                       Locality locality = Locality::Local,
                                       std::chrono::milliseconds latency = 0ms,
                                       std::optional<double> cost = std::nullopt) {
    auto counter = std::make_shared<CountingTool>();
    auto desc = describe_tool(name, locality);
    desc.cost_per_1k_tokens = cost;
    engine.registry().register_tool(desc);
    LocalToolHost* host = &engine.local_tools();
    engine.local_tools().add(name, [counter, reply, latency, host](const nlohmann::json&) {
        ++counter->calls;
        if (latency.count() > 0) host->sleep_for(latency);
        return ToolWireResponse{true, reply, {}};
    });
    return counter;
}

struct RunResult {
    std::string id;
    TaskView view;
};

RunResult run_script(Engine& engine, std::vector<ScriptStep> steps, TaskSubmission t) {
    engine.set_backend(std::make_shared<ScriptedBackend>(std::move(steps)));
    auto out = engine.submit(t);
    REQUIRE(out.ok);
    engine.wait(out.session_id);
    return {out.session_id, engine.task(out.session_id)};
}

int count_entries(const Session& s, EntryKind kind) {
    int n = 0;
    for (const auto& e : s.transcript())
        if (e.kind == kind) ++n;
    return n;
}

}  // namespace

// ---- cost ledger --------------------------------------------------------------

TEST_CASE("the ledger prices token classes at their own rates") {
    CostLedger a;
    a.record_backend(1000, 0);
    CHECK_THAT(a.dollars(), Catch::Matchers::WithinAbs(0.005, 1e-12));

    CostLedger b;
    b.record_backend(2000, 1000);
    CHECK_THAT(b.dollars(), Catch::Matchers::WithinAbs(0.025, 1e-12));

    CostLedger c;
    c.record_backend(10000, 2000);
    CHECK_THAT(c.dollars(), Catch::Matchers::WithinAbs(0.08, 1e-12));

    c.record_tool("Search", 3000, 0.010);
    CHECK_THAT(c.dollars(), Catch::Matchers::WithinAbs(0.11, 1e-12));

    auto j = c.to_json();
    CHECK(j["prompt_tokens"] == 10000);
    CHECK(j["completion_tokens"] == 2000);
    CHECK(j["tools"]["Search"]["tokens"] == 3000);
    CHECK_THAT(j["dollars"].get<double>(), Catch::Matchers::WithinAbs(0.11, 1e-12));
}

TEST_CASE("token accounting is independent of arrival order") {
    std::mt19937_64 rng(11);
    std::vector<std::pair<std::int64_t, std::int64_t>> usage;
    for (int i = 0; i < 50; ++i)
        usage.emplace_back(static_cast<std::int64_t>(rng() % 5000),
                           static_cast<std::int64_t>(rng() % 900));
    CostLedger forward, shuffled;
    for (auto [p, c] : usage) forward.record_backend(p, c);
    std::shuffle(usage.begin(), usage.end(), rng);
    for (auto [p, c] : usage) shuffled.record_backend(p, c);
    CHECK(forward.prompt_tokens == shuffled.prompt_tokens);
    CHECK(forward.completion_tokens == shuffled.completion_tokens);
    CHECK(forward.dollars() == shuffled.dollars());  // integer sums: exactly equal
}

TEST_CASE("tool results are charged at the descriptor's rate") {
    Engine engine;
    add_tool(engine, "Paid", std::string(4000, 'x'), Locality::Local, 0ms, 0.010);
    auto r = run_script(engine,
                        {{std::nullopt, "Action: Paid(key=\"a\")", 1000, 0},
                         {std::nullopt, "Final Answer: ok", 1000, 0}},
                        {.task = "charge me"});
    REQUIRE(r.view.status == SessionStatus::Done);
    auto cost = r.view.cost;
    CHECK(cost["prompt_tokens"] == 2000);
    CHECK(cost["tools"]["Paid"]["tokens"] == 1000);  // 4000 chars / 4
    CHECK_THAT(cost["dollars"].get<double>(), Catch::Matchers::WithinAbs(0.02, 1e-9));
}

// ---- turn limits ----------------------------------------------------------------

TEST_CASE("a session makes max_turns planning calls plus one forced finalize") {
    Engine engine;
    add_tool(engine, "Echo", "echoed");
    auto backend = std::make_shared<ScriptedBackend>(std::vector<ScriptStep>{
        {std::nullopt, "Action: Echo(key=\"1\")"},
        {std::nullopt, "Action: Echo(key=\"2\")"},
        {std::nullopt, "Action: Echo(key=\"3\")"},
        {"used all available turns", "Final Answer: wrap it up"},
        {std::nullopt, "never reached"},
    });
    engine.set_backend(backend);
    auto out = engine.submit({.task = "loop forever", .max_turns = 3});
    REQUIRE(out.ok);
    engine.wait(out.session_id);
    auto view = engine.task(out.session_id);
    CHECK(view.status == SessionStatus::Done);
    CHECK(view.answer == "wrap it up");
    CHECK(backend->calls() == 4);  // 3 planning + 1 forced
    CHECK(view.turns == 4);
    CHECK(backend->steps_remaining() == 1);
}

TEST_CASE("the forced finalize accepts a reply without the directive prefix") {
    Engine engine;
    add_tool(engine, "Echo", "echoed");
    auto r = run_script(engine,
                        {{std::nullopt, "Action: Echo(key=\"1\")"},
                         {std::nullopt, "  the plain answer  "}},
                        {.task = "t", .max_turns = 1});
    CHECK(r.view.status == SessionStatus::Done);
    CHECK(r.view.answer == "the plain answer");
}

// ---- prompt assembly ------------------------------------------------------------

TEST_CASE("prompts layer instructions, tools, attachments, and the task") {
    Engine engine;
    add_tool(engine, "Search", "hit");
    auto noop = std::make_shared<ScriptedBackend>(std::vector<ScriptStep>{});
    Session probe("probe", "find things", {{"report.pdf", "a\fb\fc"}}, {}, engine.registry(),
                  engine.dispatcher(), engine.events(), *noop);
    auto prompt = probe.assemble_prompt(false);
    REQUIRE(prompt.ok);
    CHECK(prompt.text.rfind("You complete tasks by reasoning step by step", 0) == 0);
    CHECK(prompt.text.find("You have the following tools:\n- Search(") != std::string::npos);
    CHECK(prompt.text.find("Attachments:\n- report.pdf (3 pages, 5 chars)") !=
          std::string::npos);
    auto tail = prompt.text.substr(prompt.text.size() - 17);
    CHECK(tail == "Task: find things");

    auto forced = probe.assemble_prompt(true);
    REQUIRE(forced.ok);
    CHECK(forced.text.find("used all available turns") != std::string::npos);

    Engine bare;
    Session lone("probe2", "solo task", {}, {}, bare.registry(), bare.dispatcher(),
                 bare.events(), *noop);
    auto lone_prompt = lone.assemble_prompt(false);
    CHECK(lone_prompt.text.find("No tools are currently available.") != std::string::npos);
    CHECK(lone_prompt.text.substr(lone_prompt.text.size() - 15) == "Task: solo task");
}

// ---- failure paths --------------------------------------------------------------

TEST_CASE("backend errors are logged and fail the session only on the forced turn") {
    Engine engine;
    add_tool(engine, "Echo", "echoed");
    auto backend = std::make_shared<ScriptedBackend>(
        std::vector<ScriptStep>{{std::nullopt, "Action: Echo(key=\"1\")"}});
    engine.set_backend(backend);
    auto out = engine.submit({.task = "starve the script", .max_turns = 2});
    REQUIRE(out.ok);
    engine.wait(out.session_id);
    auto view = engine.task(out.session_id);
    CHECK(view.status == SessionStatus::Failed);
    CHECK(view.failure.find("backend failed during forced finalize") == 0);
    CHECK(view.failure.find("script exhausted after 1 steps") != std::string::npos);
    CHECK(backend->calls() == 3);
    const Session* s = engine.session(out.session_id);
    REQUIRE(s != nullptr);
    CHECK(count_entries(*s, EntryKind::Error) == 2);  // turn 2 soft, turn 3 fatal
}

TEST_CASE("a scripted divergence reports both sides") {
    Engine engine;
    auto r = run_script(engine, {{"text that will never appear", "Final Answer: x"}},
                        {.task = "diverge", .max_turns = 1});
    CHECK(r.view.status == SessionStatus::Failed);
    const Session* s = engine.session(r.id);
    REQUIRE(s != nullptr);
    bool saw = false;
    for (const auto& e : s->transcript())
        if (e.kind == EntryKind::Error &&
            e.content.find("scripted divergence at step 1") != std::string::npos &&
            e.content.find("but the prompt was:") != std::string::npos)
            saw = true;
    CHECK(saw);
}

TEST_CASE("malformed output is logged verbatim and dispatches nothing") {
    Engine engine;
    auto echo = add_tool(engine, "Echo", "echoed");
    auto r = run_script(engine,
                        {{std::nullopt, "Action: Echo(key=\"a\") trailing junk"},
                         {std::nullopt, "Final Answer: recovered"}},
                        {.task = "t"});
    CHECK(r.view.status == SessionStatus::Done);
    CHECK(r.view.answer == "recovered");
    CHECK(echo->calls == 0);  // the decided prefix is discarded in batch mode
    const Session* s = engine.session(r.id);
    bool saw = false;
    for (const auto& e : s->transcript())
        if (e.kind == EntryKind::Error &&
            e.content.find("malformed planner output (") != std::string::npos &&
            e.content.find("payload: Action: Echo(key=\"a\") trailing junk") !=
                std::string::npos)
            saw = true;
    CHECK(saw);
    CHECK(count_entries(*s, EntryKind::Action) == 0);
}

TEST_CASE("calls that fail validation are rejected by name") {
    Engine engine;
    auto echo = add_tool(engine, "Echo", "echoed");
    auto r = run_script(engine,
                        {{std::nullopt, "Action: Ghost(key=\"a\") && Echo(nope=1)"},
                         {std::nullopt, "Final Answer: done"}},
                        {.task = "t"});
    CHECK(r.view.status == SessionStatus::Done);
    CHECK(echo->calls == 0);
    const Session* s = engine.session(r.id);
    std::vector<std::string> errors;
    for (const auto& e : s->transcript())
        if (e.kind == EntryKind::Error) errors.push_back(e.content);
    REQUIRE(errors.size() == 2);
    CHECK(errors[0] == "rejected call Ghost(key=\"a\"): unknown tool \"Ghost\"");
    CHECK(errors[1] ==
          "rejected call Echo(nope=1): Echo: no parameter named \"nope\" in signature");
}

TEST_CASE("privacy violations reject the call before any dispatch") {
    Engine engine;
    auto send = add_tool(engine, "Send", "sent", Locality::Remote);
    auto r = run_script(engine,
                        {{std::nullopt, "Action: Send(attachment=\"report.pdf\")"},
                         {std::nullopt, "Final Answer: done"}},
                        {.task = "t", .attachments = {{"report.pdf", "alpha\fbeta"}}});
    CHECK(r.view.status == SessionStatus::Done);
    CHECK(send->calls == 0);
    const Session* s = engine.session(r.id);
    bool saw = false;
    for (const auto& e : s->transcript())
        if (e.kind == EntryKind::Error &&
            e.content.find("privacy violation: whole attachment \"report.pdf\"") !=
                std::string::npos)
            saw = true;
    CHECK(saw);
}

TEST_CASE("an impossible context budget fails with the numbers spelled out") {
    Engine engine;
    EngineConfig cfg;
    cfg.session.context_budget_tokens = 5;
    Engine tiny(cfg);
    auto backend = std::make_shared<ScriptedBackend>(
        std::vector<ScriptStep>{{std::nullopt, "Final Answer: unreachable"}});
    tiny.set_backend(backend);
    auto out = tiny.submit({.task = "hello"});
    REQUIRE(out.ok);
    tiny.wait(out.session_id);
    auto view = tiny.task(out.session_id);
    CHECK(view.status == SessionStatus::Failed);
    CHECK(view.failure.find("context budget exceeded") == 0);
    CHECK(view.failure.find("budget of 5 even after compaction") != std::string::npos);
    CHECK(backend->calls() == 0);  // never reached the backend
}

// ---- compaction under a live budget ----------------------------------------------

TEST_CASE("old turns fold into digests once the prompt outgrows the budget") {
    Engine engine;
    add_tool(engine, "Echo", std::string(600, '#'));
    auto noop = std::make_shared<ScriptedBackend>(std::vector<ScriptStep>{});
    // Measure the fixed prompt overhead with an identical empty session, then
    // allow ~3.5 turns of growth on top of it.
    Session probe("probe", "fill the pad", {}, {}, engine.registry(), engine.dispatcher(),
                  engine.events(), *noop);
    auto baseline = probe.assemble_prompt(false);
    REQUIRE(baseline.ok);
    std::int64_t overhead = estimate_tokens(baseline.text);

    EngineConfig cfg;
    cfg.session.context_budget_tokens = overhead + 560;
    Engine budgeted(cfg);
    add_tool(budgeted, "Echo", std::string(600, '#'));
    auto r = run_script(
        budgeted,
        {{std::nullopt, "Action: Echo(key=\"1\")"},
         {std::nullopt, "Action: Echo(key=\"2\")"},
         {std::nullopt, "Action: Echo(key=\"3\")"},
         {std::nullopt, "Action: Echo(key=\"4\")"},
         {"Turn 1: called Echo; result digest: ####", "Final Answer: compacted fine"}},
        {.task = "fill the pad"});
    REQUIRE(r.view.status == SessionStatus::Done);
    CHECK(r.view.answer == "compacted fine");

    const Session* s = budgeted.session(r.id);
    REQUIRE(s != nullptr);
    REQUIRE(s->pad().summaries.size() == 2);
    CHECK(s->pad().summaries[0].turn == 1);
    CHECK(s->pad().summaries[1].turn == 2);
    // The full transcript is never compacted.
    CHECK(count_entries(*s, EntryKind::Observation) == 4);
    // Digests carry at most 200 characters of the observation.
    CHECK(s->pad().summaries[0].text.size() <
          std::string("Turn 1: called Echo; result digest: ").size() + 201);
}

// ---- background calls ------------------------------------------------------------

TEST_CASE("background results are collected at the start of a later turn") {
    Engine engine;
    EngineConfig cfg;
    cfg.session.background_wait = 2000ms;
    Engine patient(cfg);
    add_tool(patient, "Slow", "slow-result", Locality::Local, 80ms);
    auto r = run_script(patient,
                        {{std::nullopt, "Action: Slow(key=\"x\") &"},
                         {"slow-result", "Final Answer: used it"}},
                        {.task = "t"});
    CHECK(r.view.status == SessionStatus::Done);
    CHECK(r.view.answer == "used it");
    const Session* s = patient.session(r.id);
    bool action_marked = false, observed = false;
    for (const auto& e : s->transcript()) {
        if (e.kind == EntryKind::Action && e.content == "Slow(key=\"x\") &") action_marked = true;
        if (e.kind == EntryKind::Observation && e.content == "slow-result" && e.turn == 2)
            observed = true;
    }
    CHECK(action_marked);
    CHECK(observed);
}

TEST_CASE("background results landing after the final answer are discarded with a trace") {
    EngineConfig cfg;
    cfg.session.background_wait = 0ms;
    Engine engine(cfg);
    add_tool(engine, "Slow", "too-late", Locality::Local, 250ms);
    auto backend = std::make_shared<ScriptedBackend>(std::vector<ScriptStep>{
        {std::nullopt, "Action: Slow(key=\"x\") &"},
        {"Background calls still running: Slow (group 1)", "Final Answer: moved on"}});
    engine.set_backend(backend);
    auto out = engine.submit({.task = "t"});
    REQUIRE(out.ok);
    engine.wait(out.session_id);
    auto view = engine.task(out.session_id);
    CHECK(view.status == SessionStatus::Done);
    CHECK(view.answer == "moved on");

    auto events = engine.events().replay(out.session_id);
    REQUIRE(events.has_value());
    bool dropped = false;
    for (const auto& e : *events)
        if (e.type == EventType::DroppedResult &&
            e.content == "discarded result from Slow (session already finalized)")
            dropped = true;
    CHECK(dropped);
    // No observation ever reached the scratchpad.
    CHECK(count_entries(*engine.session(out.session_id), EntryKind::Observation) == 0);
}

// ---- streaming dispatch ------------------------------------------------------------

TEST_CASE("streaming dispatches decided calls even when the line later goes bad") {
    Engine engine;
    auto echo = add_tool(engine, "Echo", "echoed");
    auto backend = std::make_shared<ScriptedBackend>(
        std::vector<ScriptStep>{
            {std::nullopt, "Action: Echo(key=\"a\") && Echo(key=\"b\") && Echo(key="},
            {std::nullopt, "Final Answer: salvaged"}},
        6);
    engine.set_backend(backend);
    auto out = engine.submit({.task = "t", .streaming = true});
    REQUIRE(out.ok);
    engine.wait(out.session_id);
    auto view = engine.task(out.session_id);
    CHECK(view.status == SessionStatus::Done);
    CHECK(echo->calls == 2);  // both decided calls ran despite the bad tail
    const Session* s = engine.session(out.session_id);
    bool kept_note = false;
    int observations = 0;
    for (const auto& e : s->transcript()) {
        if (e.kind == EntryKind::Error &&
            e.content.find("calls already dispatched were kept") != std::string::npos)
            kept_note = true;
        if (e.kind == EntryKind::Observation) ++observations;
    }
    CHECK(kept_note);
    CHECK(observations == 2);
}

// ---- engine admission --------------------------------------------------------------

TEST_CASE("submissions are validated before a session spawns") {
    Engine engine;
    CHECK(engine.submit({.task = "   "}).error == "task must be non-empty");
    CHECK(engine.submit({.task = "x"}).error == "no planner backend configured");

    engine.set_backend(std::make_shared<ScriptedBackend>(std::vector<ScriptStep>{
        {std::nullopt, "Final Answer: a"}, {std::nullopt, "Final Answer: b"}}));
    auto first = engine.submit({.task = "x", .session_id = "dup"});
    REQUIRE(first.ok);
    engine.wait("dup");
    auto second = engine.submit({.task = "x", .session_id = "dup"});
    CHECK_FALSE(second.ok);
    CHECK(second.error.find("already exists") != std::string::npos);

    auto slash = engine.submit({.task = "x", .session_id = "a/b"});
    CHECK_FALSE(slash.ok);
    CHECK(slash.error == "session id must be a plain name");

    auto generated = engine.submit({.task = "x"});
    REQUIRE(generated.ok);
    CHECK(generated.session_id.rfind("task-", 0) == 0);
    engine.wait_all();
}

TEST_CASE("the engine refuses work beyond its session limit") {
    EngineConfig cfg;
    cfg.max_sessions = 1;
    Engine engine(cfg);
    add_tool(engine, "Slow", "done", Locality::Local, 300ms);
    engine.set_backend(std::make_shared<ScriptedBackend>(std::vector<ScriptStep>{
        {std::nullopt, "Action: Slow(key=\"x\")"}, {std::nullopt, "Final Answer: a"}}));
    auto first = engine.submit({.task = "slow one"});
    REQUIRE(first.ok);
    std::this_thread::sleep_for(50ms);
    auto second = engine.submit({.task = "rejected"});
    CHECK_FALSE(second.ok);
    CHECK(second.busy);
    CHECK(second.error.find("session limit (1 running)") != std::string::npos);
    engine.wait_all();
    CHECK(engine.running_sessions() == 0);

    // Capacity frees once the running session finishes; admission succeeds
    // again even though this script has nothing left to say.
    auto after = engine.submit({.task = "fits now"});
    CHECK(after.ok);
    engine.wait(after.session_id);
    CHECK(engine.task(after.session_id).status == SessionStatus::Failed);
}

TEST_CASE("task views expose status, answer, turns, and cost") {
    Engine engine;
    auto r = run_script(engine, {{std::nullopt, "Final Answer: quick", 400, 40}},
                        {.task = "peek"});
    CHECK(r.view.exists);
    CHECK(r.view.session_id == r.id);
    CHECK(r.view.status == SessionStatus::Done);
    CHECK(r.view.answer == "quick");
    CHECK(r.view.failure.empty());
    CHECK(r.view.turns == 1);
    CHECK(r.view.cost["prompt_tokens"] == 400);
    CHECK(r.view.cost["completion_tokens"] == 40);
    CHECK_FALSE(engine.task("missing").exists);
    CHECK(std::string(to_string(SessionStatus::AwaitingResults)) == "awaiting_results");
    CHECK(std::string(to_string(SessionStatus::Done)) == "done");
}
