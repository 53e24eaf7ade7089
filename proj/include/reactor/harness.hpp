#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "reactor/engine.hpp"
#include "reactor/text.hpp"

namespace reactor {

// ---- deterministic fault / latency draws ------------------------------------

// Stable per-call coin flip: a pure function of (seed, tool, group, index),
// so concurrency cannot change which calls fail.
inline bool deterministic_failure(std::uint64_t seed, const std::string& tool,
                                  std::uint64_t group, size_t index, double probability) {
    if (probability <= 0.0) return false;
    if (probability >= 1.0) return true;
    std::uint64_t key = mix64(seed ^ hash_str(tool) ^ (group * 0x9e3779b9ULL) ^
                              (static_cast<std::uint64_t>(index) << 17));
    double u = static_cast<double>(key % 1000000000ULL) / 1e9;
    return u < probability;
}

// ---- synthetic tools ---------------------------------------------------------

struct SyntheticToolSpec {
    std::string name;
    std::string description = "synthetic tool";
    std::vector<ParamSpec> params{{"key", SemanticType::String, false}};
    std::chrono::milliseconds latency{0};
    std::chrono::milliseconds latency_jitter{0};  // deterministic per-invocation extra
    double failure_probability = 0.0;
    // {key} substitutes the argument of that name; {tool} the tool name.
    std::string response_template = "result from {tool}";
    int max_parallel = 1;
    int queue_limit = 32;
    std::optional<double> cost_per_1k_tokens;
    Locality locality = Locality::Local;
    std::optional<std::chrono::milliseconds> timeout;
};

struct ToolCounters {
    std::atomic<int> invocations{0};
    std::atomic<int> concurrent{0};
    std::atomic<int> high_water{0};
    std::atomic<std::int64_t> simulated_latency_ms{0};

    void enter() {
        int cur = ++concurrent;
        int hw = high_water.load();
        while (cur > hw && !high_water.compare_exchange_weak(hw, cur)) {
        }
    }
    void exit() { --concurrent; }
};

// Installs a set of in-process fake tools into an engine: descriptors in the
// registry, handler functions on the tool host, and a deterministic failure
// injector keyed by (seed, tool, group, index). Keep the toolset alive while
// the engine runs.
class SyntheticToolset {
  public:
    SyntheticToolset(Engine& engine, std::vector<SyntheticToolSpec> specs, std::uint64_t seed)
        : seed_(seed) {
        std::map<std::string, double> probabilities;
        for (auto& spec : specs) {
            probabilities[spec.name] = spec.failure_probability;
            counters_[spec.name] = std::make_shared<ToolCounters>();
            install_tool(engine, spec);
        }
        engine.dispatcher().set_failure_injector(
            [this, probabilities](const DispatchRequest& req, size_t index) {
                auto it = probabilities.find(req.action.tool);
                if (it == probabilities.end() || it->second <= 0.0) return false;
                if (deterministic_failure(seed_, req.action.tool, req.action.group, index,
                                          it->second)) {
                    ++injected_;
                    return true;
                }
                return false;
            });
    }

    const ToolCounters& counters(const std::string& name) const { return *counters_.at(name); }
    std::int64_t injected_failures() const { return injected_.load(); }
    std::int64_t simulated_latency_ms() const {
        std::int64_t total = 0;
        for (const auto& [_, c] : counters_) total += c->simulated_latency_ms.load();
        return total;
    }

  private:
    void install_tool(Engine& engine, const SyntheticToolSpec& spec) {
        ToolDescriptor d;
        d.name = spec.name;
        d.description = spec.description;
        d.endpoint = "inproc:sim-" + spec.name;
        d.signature.params = spec.params;
        d.max_parallel = spec.max_parallel;
        d.queue_limit = spec.queue_limit;
        d.cost_per_1k_tokens = spec.cost_per_1k_tokens;
        d.locality = spec.locality;
        d.timeout = spec.timeout;
        auto reg = engine.registry().register_tool(d);
        if (!reg.ok) throw std::runtime_error("synthetic tool rejected: " + reg.error);

        auto counters = counters_[spec.name];
        LocalToolHost* host = &engine.local_tools();
        auto latency = spec.latency;
        auto jitter = spec.latency_jitter;
        auto tmpl = spec.response_template;
        auto name = spec.name;
        auto seed = seed_;
        engine.local_tools().add("sim-" + spec.name, [=](const nlohmann::json& args) {
            counters->enter();
            int n = ++counters->invocations;
            auto wait = latency;
            if (jitter.count() > 0) {
                std::uint64_t key = mix64(seed ^ hash_str(name) ^ static_cast<std::uint64_t>(n));
                wait += std::chrono::milliseconds(
                    static_cast<std::int64_t>(key % static_cast<std::uint64_t>(jitter.count())));
            }
            counters->simulated_latency_ms += wait.count();
            if (wait.count() > 0 && !host->sleep_for(wait)) {
                counters->exit();
                return ToolWireResponse{false, {}, "tool host shut down"};
            }
            std::string text = tmpl;
            auto sub = [&](const std::string& token, const std::string& value) {
                size_t pos;
                while ((pos = text.find(token)) != std::string::npos)
                    text.replace(pos, token.size(), value);
            };
            sub("{tool}", name);
            for (auto it = args.begin(); it != args.end(); ++it) {
                std::string v = it.value().is_string() ? it.value().get<std::string>()
                                                       : it.value().dump();
                sub("{" + it.key() + "}", v);
            }
            counters->exit();
            return ToolWireResponse{true, text, {}};
        });
    }

    std::uint64_t seed_;
    std::map<std::string, std::shared_ptr<ToolCounters>> counters_;
    std::atomic<std::int64_t> injected_{0};
};

// ---- golden trace ------------------------------------------------------------

// The fixed end-to-end fixture: a financial-report comparison task solved in
// four turns — search, two parallel page extractions, a comparison call, and
// a final answer quoting $5.2M vs $4.6M (13% growth).

inline Attachment golden_report_attachment() {
    std::string content;
    for (int page = 1; page <= 100; ++page) {
        if (page > 1) content += '\f';
        content += "Page " + std::to_string(page) + " of the quarterly financial data pack.\n";
        if (page == 45)
            content += "Q1 2014 ARR: $5.2M\nSubscription revenue grew on continued expansion.\n";
        else if (page == 88)
            content += "Q1 2013 ARR: $4.6M\nPrior-year subscription baseline for comparison.\n";
        else
            content += "Operating metrics and narrative for section " + std::to_string(page) +
                       ".\n";
    }
    return {"report.pdf", std::move(content)};
}

inline std::vector<ScriptStep> golden_script() {
    std::vector<ScriptStep> steps;
    steps.push_back(
        {std::string("Task:"),
         "Thought: I need the Q1 2014 and Q1 2013 ARR figures; find where they are reported.\n"
         "Action: WebSearch(query=\"ARR Q1 2014 Q1 2013 quarterly financial report\")",
         std::nullopt, std::nullopt});
    steps.push_back(
        {std::string("pages 45 and 88"),
         "Thought: Both figures are in the attached report; extract the two pages in parallel.\n"
         "Action: PDFParser(page=45, query=\"ARR\") && PDFParser(page=88, query=\"ARR\")",
         std::nullopt, std::nullopt});
    steps.push_back(
        {std::string("Q1 2013 ARR: $4.6M"),
         "Thought: Compare the two extracted figures.\n"
         "Action: Summarizer(contents=[\"Q1 2014 ARR: $5.2M\", \"Q1 2013 ARR: $4.6M\"], "
         "instruction=\"compare these metrics\")",
         std::nullopt, std::nullopt});
    steps.push_back(
        {std::string("13%"),
         "Thought: I have both figures and their comparison.\n"
         "Final Answer: Q1 2014 ARR was $5.2M, up from $4.6M in Q1 2013 — an increase of "
         "about 13% year over year.",
         std::nullopt, std::nullopt});
    return steps;
}

inline std::string golden_task_text() {
    return "Using the attached 100-page financial report, what was the ARR in Q1 2014 and how "
           "does it compare to Q1 2013?";
}

struct GoldenToolOptions {
    int pdf_max_parallel = 4;
    std::chrono::milliseconds page_latency{120};
};

struct GoldenToolProbes {
    std::shared_ptr<ToolCounters> pdf = std::make_shared<ToolCounters>();
    std::shared_ptr<std::atomic<bool>> remote_saw_attachment =
        std::make_shared<std::atomic<bool>>(false);
    std::shared_ptr<std::atomic<size_t>> pdf_max_payload =
        std::make_shared<std::atomic<size_t>>(0);
};

// Registers the three golden tools. WebSearch and Summarizer are remote-style
// tools that record whether any attachment bytes ever reached them; PDFParser
// is a local page extractor that sleeps long enough for parallel calls to
// overlap measurably.
inline GoldenToolProbes install_golden_tools(Engine& engine, GoldenToolOptions opts = {}) {
    GoldenToolProbes probes;
    LocalToolHost* host = &engine.local_tools();

    {
        ToolDescriptor d;
        d.name = "WebSearch";
        d.description = "Searches an indexed corpus and returns pointers to sources.";
        d.endpoint = "inproc:golden-search";
        d.signature.params = {{"query", SemanticType::String, true}};
        d.locality = Locality::Remote;
        d.cost_per_1k_tokens = 0.010;
        engine.registry().register_tool(d);
        auto flag = probes.remote_saw_attachment;
        engine.local_tools().add("golden-search", [flag](const nlohmann::json& args) {
            if (args.contains("attachment_content")) *flag = true;
            return ToolWireResponse{
                true,
                "The ARR figures appear in the attached quarterly financial report; see "
                "pages 45 and 88 of report.pdf.",
                {}};
        });
    }
    {
        ToolDescriptor d;
        d.name = "PDFParser";
        d.description = "Extracts pages or figures from PDF attachments.";
        d.endpoint = "inproc:golden-pdf";
        d.signature.params = {{"attachment", SemanticType::String, false},
                              {"page", SemanticType::Integer, false},
                              {"pages", SemanticType::String, false},
                              {"query", SemanticType::String, false}};
        d.max_parallel = opts.pdf_max_parallel;
        d.locality = Locality::Local;
        d.cost_per_1k_tokens = 0.001;
        engine.registry().register_tool(d);
        auto counters = probes.pdf;
        auto max_payload = probes.pdf_max_payload;
        auto latency = opts.page_latency;
        engine.local_tools().add("golden-pdf", [counters, max_payload, latency,
                                                host](const nlohmann::json& args) {
            counters->enter();
            ++counters->invocations;
            counters->simulated_latency_ms += latency.count();
            if (latency.count() > 0 && !host->sleep_for(latency)) {
                counters->exit();
                return ToolWireResponse{false, {}, "tool host shut down"};
            }
            ToolWireResponse resp;
            if (!args.contains("attachment_content")) {
                resp.error = "no attachment content in payload";
                counters->exit();
                return resp;
            }
            std::string content = args["attachment_content"].get<std::string>();
            size_t sz = content.size(), cur = max_payload->load();
            while (sz > cur && !max_payload->compare_exchange_weak(cur, sz)) {
            }
            std::string query =
                args.contains("query") ? args["query"].get<std::string>() : std::string{};
            if (!query.empty()) {
                for (auto line : split_lines(content)) {
                    if (line.find(query) != std::string_view::npos) {
                        resp.ok = true;
                        resp.result = std::string(line);
                        counters->exit();
                        return resp;
                    }
                }
                resp.error = "query \"" + query + "\" not found in the selected pages";
                counters->exit();
                return resp;
            }
            resp.ok = true;
            resp.result = content;
            counters->exit();
            return resp;
        });
    }
    {
        ToolDescriptor d;
        d.name = "Summarizer";
        d.description = "Combines and compares short text fragments per an instruction.";
        d.endpoint = "inproc:golden-summarizer";
        d.signature.params = {{"contents", SemanticType::StringList, true},
                              {"instruction", SemanticType::String, true}};
        d.locality = Locality::Remote;
        d.cost_per_1k_tokens = 0.002;
        engine.registry().register_tool(d);
        auto flag = probes.remote_saw_attachment;
        engine.local_tools().add("golden-summarizer", [flag](const nlohmann::json& args) {
            if (args.contains("attachment_content")) *flag = true;
            return ToolWireResponse{
                true,
                "Q1 2014 ARR was $5.2M versus $4.6M in Q1 2013, an increase of roughly 13% "
                "year over year.",
                {}};
        });
    }
    return probes;
}

struct GoldenOptions {
    GoldenToolOptions tools;
    bool force_sequential = false;
    bool streaming = false;
    std::optional<std::filesystem::path> trace_dir;
    std::string session_id = "golden";
};

struct GoldenReport {
    bool passed = false;
    std::vector<std::string> failures;
    std::string final_answer;
    int pdf_high_water = 0;
    size_t pdf_max_payload = 0;
    bool remote_saw_attachment = false;
    std::int64_t wall_ms = 0;
    double dollars = 0;
    std::vector<Event> events;
    std::vector<ScratchpadEntry> transcript;

    void check(bool cond, const std::string& what) {
        if (!cond) failures.push_back(what);
    }
};

inline GoldenReport run_golden_trace(GoldenOptions opts = {}) {
    GoldenReport report;
    EngineConfig cfg;
    cfg.events.trace_dir = opts.trace_dir;
    cfg.dispatcher.force_sequential = opts.force_sequential;
    cfg.session.streaming = opts.streaming;
    Engine engine(cfg);
    auto probes = install_golden_tools(engine, opts.tools);
    engine.set_backend(std::make_shared<ScriptedBackend>(golden_script()));

    TaskSubmission sub;
    sub.task = golden_task_text();
    sub.attachments = {golden_report_attachment()};
    sub.session_id = opts.session_id;

    auto t0 = std::chrono::steady_clock::now();
    auto outcome = engine.submit(sub);
    if (!outcome.ok) {
        report.failures.push_back("submit failed: " + outcome.error);
        return report;
    }
    engine.wait(outcome.session_id);
    report.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::steady_clock::now() - t0)
                         .count();

    const Session* session = engine.session(outcome.session_id);
    report.final_answer = session->final_answer();
    report.dollars = session->cost().dollars();
    report.transcript = session->transcript();
    report.pdf_high_water = probes.pdf->high_water.load();
    report.pdf_max_payload = probes.pdf_max_payload->load();
    report.remote_saw_attachment = probes.remote_saw_attachment->load();
    auto events = engine.events().replay(outcome.session_id);
    if (events) report.events = *events;

    report.check(session->status() == SessionStatus::Done,
                 "session should finish as done, was " + std::string(to_string(session->status())) +
                     (session->status() == SessionStatus::Failed
                          ? " (" + session->failure_reason() + ")"
                          : ""));
    for (const char* needle : {"$5.2M", "$4.6M", "13%"})
        report.check(report.final_answer.find(needle) != std::string::npos,
                     std::string("final answer should quote ") + needle);

    std::vector<EventType> expected = {
        EventType::Thought, EventType::Action, EventType::Result,
        EventType::Thought, EventType::Action, EventType::Result, EventType::Result,
        EventType::Thought, EventType::Action, EventType::Result,
        EventType::Thought, EventType::FinalAnswer};
    report.check(report.events.size() == expected.size(),
                 "expected " + std::to_string(expected.size()) + " events, got " +
                     std::to_string(report.events.size()));
    for (size_t i = 0; i < report.events.size(); ++i) {
        report.check(report.events[i].seq == i, "event seq must be gap-free");
        if (i < expected.size())
            report.check(report.events[i].type == expected[i],
                         "event " + std::to_string(i) + " should be " +
                             to_string(expected[i]) + ", was " +
                             to_string(report.events[i].type));
    }
    if (report.events.size() == expected.size()) {
        report.check(report.events[2].content.find("pages 45 and 88") != std::string::npos,
                     "search observation should point at pages 45 and 88");
        report.check(report.events[5].content == "Q1 2014 ARR: $5.2M",
                     "first page extraction should yield the Q1 2014 figure");
        report.check(report.events[6].content == "Q1 2013 ARR: $4.6M",
                     "second page extraction should yield the Q1 2013 figure");
        report.check(report.events[9].content.find("13%") != std::string::npos,
                     "comparison observation should contain the growth rate");
    }
    bool expect_overlap = !opts.force_sequential && opts.tools.pdf_max_parallel > 1;
    if (expect_overlap)
        report.check(report.pdf_high_water == 2,
                     "the two page extractions should overlap (high water " +
                         std::to_string(report.pdf_high_water) + ")");
    else
        report.check(report.pdf_high_water == 1,
                     "page extractions must not overlap in sequential mode (high water " +
                         std::to_string(report.pdf_high_water) + ")");
    report.check(!report.remote_saw_attachment,
                 "remote tools must never receive attachment bytes");
    report.check(report.pdf_max_payload > 0 && report.pdf_max_payload < 200,
                 "page extraction payload should be a single page, saw " +
                     std::to_string(report.pdf_max_payload) + " chars");
    report.passed = report.failures.empty();
    return report;
}

// ---- experiments -------------------------------------------------------------

struct RunStats {
    int run = 0;
    bool completed = false;
    int turns = 0;
    int backend_calls = 0;
    std::int64_t injected_failures = 0;
    double dollars = 0;
};

struct ExperimentReport {
    std::string name;
    std::uint64_t seed = 0;
    int runs = 0;
    int completed = 0;
    std::int64_t backend_calls = 0;
    std::int64_t injected_failures = 0;
    double total_dollars = 0;
    std::int64_t simulated_latency_ms = 0;
    std::vector<RunStats> per_run;

    nlohmann::json to_json() const {
        nlohmann::json runs_json = nlohmann::json::array();
        for (const auto& r : per_run)
            runs_json.push_back({{"run", r.run},
                                 {"completed", r.completed},
                                 {"turns", r.turns},
                                 {"backend_calls", r.backend_calls},
                                 {"injected_failures", r.injected_failures},
                                 {"dollars", r.dollars}});
        return {{"name", name},
                {"seed", seed},
                {"runs", runs},
                {"completed", completed},
                {"backend_calls", backend_calls},
                {"injected_failures", injected_failures},
                {"total_dollars", total_dollars},
                {"simulated_latency_ms", simulated_latency_ms},
                {"per_run", runs_json}};
    }

    // Deliberately excludes wall-clock measurements so identical seeds give
    // byte-identical text.
    std::string to_text() const {
        char line[256];
        std::string out = "experiment: " + name + "\n";
        std::snprintf(line, sizeof line, "seed: %llu\nruns: %d\ncompleted: %d\n",
                      static_cast<unsigned long long>(seed), runs, completed);
        out += line;
        std::snprintf(line, sizeof line,
                      "backend_calls: %lld\ninjected_failures: %lld\n"
                      "simulated_latency_ms: %lld\ntotal_dollars: %.6f\n",
                      static_cast<long long>(backend_calls),
                      static_cast<long long>(injected_failures),
                      static_cast<long long>(simulated_latency_ms), total_dollars);
        out += line;
        for (const auto& r : per_run) {
            std::snprintf(line, sizeof line,
                          "run %03d: completed=%d turns=%d calls=%d injected=%lld\n", r.run,
                          r.completed ? 1 : 0, r.turns, r.backend_calls,
                          static_cast<long long>(r.injected_failures));
            out += line;
        }
        return out;
    }
};

struct RobustnessOptions {
    int runs = 200;
    double failure_probability = 0.2;
    std::uint64_t seed = 7;
    bool replan = true;  // false: give up after the first failed observation
    int max_turns = 6;
};

// Repeated retrieval task against two equivalent providers under injected
// per-call failures. The replanning policy alternates providers until an
// observation carries the payload; the non-replanning baseline finalizes
// with a failure note the moment a call fails.
inline ExperimentReport run_robustness_experiment(RobustnessOptions opts = {}) {
    ExperimentReport report;
    report.name = opts.replan ? "robustness-replan" : "robustness-noreplan";
    report.seed = opts.seed;
    report.runs = opts.runs;
    const std::string payload = "payload:item";

    for (int run = 0; run < opts.runs; ++run) {
        std::uint64_t run_seed = mix64(opts.seed ^ static_cast<std::uint64_t>(run + 1));
        EngineConfig cfg;
        cfg.session.max_turns = opts.max_turns;
        Engine engine(cfg);
        std::vector<SyntheticToolSpec> specs(2);
        specs[0].name = "fetch_primary";
        specs[0].params = {{"key", SemanticType::String, true}};
        specs[0].failure_probability = opts.failure_probability;
        specs[0].response_template = "payload:{key}";
        specs[1] = specs[0];
        specs[1].name = "fetch_backup";
        SyntheticToolset tools(engine, specs, run_seed);

        bool replan = opts.replan;
        auto backend = std::make_shared<PolicyBackend>(
            [replan, payload](const std::string& prompt, int idx) -> std::string {
                if (prompt.find(payload) != std::string::npos)
                    return "Thought: The payload is retrieved.\nFinal Answer: " + payload;
                if (idx == 0)
                    return "Thought: Fetch the record.\nAction: fetch_primary(key=\"item\")";
                if (!replan)
                    return "Thought: The provider failed; giving up.\n"
                           "Final Answer: unable to retrieve the record";
                const char* tool = (idx % 2 == 1) ? "fetch_backup" : "fetch_primary";
                return std::string("Thought: Previous attempt failed; try the other provider.\n"
                                   "Action: ") +
                       tool + "(key=\"item\")";
            });
        engine.set_backend(backend);

        TaskSubmission sub;
        sub.task = "Retrieve the stored record for key \"item\" and report what it contains.";
        sub.session_id = "run-" + std::to_string(run);
        auto outcome = engine.submit(sub);
        engine.wait(outcome.session_id);
        const Session* s = engine.session(outcome.session_id);

        RunStats stats;
        stats.run = run;
        stats.completed = s->status() == SessionStatus::Done &&
                          s->final_answer().find(payload) != std::string::npos;
        stats.turns = s->turns_taken();
        stats.backend_calls = backend->calls();
        stats.injected_failures = tools.injected_failures();
        stats.dollars = s->cost().dollars();
        report.per_run.push_back(stats);
        report.completed += stats.completed ? 1 : 0;
        report.backend_calls += stats.backend_calls;
        report.injected_failures += stats.injected_failures;
        report.total_dollars += stats.dollars;
        report.simulated_latency_ms += tools.simulated_latency_ms();
    }
    return report;
}

// ---- timing experiments (measured wall clock; never byte-compared) ----------

struct ParallelTimingReport {
    int runs = 0;
    std::chrono::milliseconds latency{0};
    std::vector<double> ratios;      // sequential wall / parallel wall, per run
    double mean_ratio = 0;
    double mean_parallel_ms = 0;
    double mean_sequential_ms = 0;
};

// One task, two independent simulated tool calls of the given latency, run
// once on the concurrent dispatcher and once with force_sequential.
inline ParallelTimingReport run_parallel_timing(
    int runs = 20, std::chrono::milliseconds latency = std::chrono::milliseconds(1000)) {
    ParallelTimingReport report;
    report.runs = runs;
    report.latency = latency;

    auto one_session_ms = [&](bool sequential) -> double {
        EngineConfig cfg;
        cfg.dispatcher.force_sequential = sequential;
        Engine engine(cfg);
        std::vector<SyntheticToolSpec> specs(2);
        specs[0].name = "alpha";
        specs[0].latency = latency;
        specs[1].name = "beta";
        specs[1].latency = latency;
        SyntheticToolset tools(engine, specs, 1);
        std::vector<ScriptStep> steps;
        steps.push_back({std::nullopt,
                         "Thought: Run both probes at once.\n"
                         "Action: alpha(key=\"a\") && beta(key=\"b\")",
                         std::nullopt, std::nullopt});
        steps.push_back({std::nullopt, "Final Answer: both probes returned.", std::nullopt,
                         std::nullopt});
        engine.set_backend(std::make_shared<ScriptedBackend>(steps));
        TaskSubmission sub;
        sub.task = "Run the two probes and report when both return.";
        auto t0 = std::chrono::steady_clock::now();
        auto outcome = engine.submit(sub);
        engine.wait(outcome.session_id);
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    };

    double par_total = 0, seq_total = 0;
    for (int run = 0; run < runs; ++run) {
        double par = one_session_ms(false);
        double seq = one_session_ms(true);
        par_total += par;
        seq_total += seq;
        report.ratios.push_back(seq / par);
    }
    report.mean_parallel_ms = par_total / runs;
    report.mean_sequential_ms = seq_total / runs;
    double sum = 0;
    for (double r : report.ratios) sum += r;
    report.mean_ratio = sum / runs;
    return report;
}

struct CapacityTimingReport {
    int calls = 0;
    int capacity = 0;
    std::chrono::milliseconds latency{0};
    std::int64_t ideal_ms = 0;
    std::int64_t wall_ms = 0;
};

// N equal-latency calls against one provider with a fixed concurrency cap.
inline CapacityTimingReport run_capacity_timing(
    int calls = 6, int capacity = 2,
    std::chrono::milliseconds latency = std::chrono::milliseconds(100)) {
    CapacityTimingReport report;
    report.calls = calls;
    report.capacity = capacity;
    report.latency = latency;
    report.ideal_ms = ((calls + capacity - 1) / capacity) * latency.count();

    EventBus bus;
    ToolRegistry registry(&bus);
    Dispatcher dispatcher(registry, bus);
    ToolDescriptor d;
    d.name = "svc";
    d.endpoint = "inproc:svc";
    d.signature.params = {{"key", SemanticType::String, false}};
    d.max_parallel = capacity;
    d.queue_limit = calls;
    registry.register_tool(d);
    LocalToolHost* host = &dispatcher.local_tools();
    dispatcher.local_tools().add("svc", [host, latency](const nlohmann::json&) {
        host->sleep_for(latency);
        return ToolWireResponse{true, "done", {}};
    });
    bus.open_session("bench");
    std::vector<DispatchRequest> reqs;
    for (int i = 0; i < calls; ++i) {
        Action a;
        a.tool = "svc";
        a.group = 1;
        reqs.push_back({a, nlohmann::json::object(), "bench"});
    }
    auto t0 = std::chrono::steady_clock::now();
    auto results = dispatcher.dispatch_group(reqs);
    report.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::steady_clock::now() - t0)
                         .count();
    for (const auto& r : results)
        if (r.outcome != DispatchOutcome::Ok) report.wall_ms = -1;  // flag failures
    return report;
}

struct StressReport {
    int groups = 0;
    int calls_per_group = 0;
    int max_parallel = 0;
    int total_results = 0;
    int ok_results = 0;
    int observed_high_water = 0;  // concurrent executions seen by the tool itself
    int ledger_high_water = 0;    // concurrent leases per the registry
};

// Many concurrent groups hammering one capacity-limited tool. Every call must
// come back ok and the tool must never observe more than max_parallel
// concurrent executions.
inline StressReport run_capacity_stress(int groups = 64, int calls_per_group = 2,
                                        int max_parallel = 4,
                                        std::chrono::milliseconds latency =
                                            std::chrono::milliseconds(20)) {
    StressReport report;
    report.groups = groups;
    report.calls_per_group = calls_per_group;
    report.max_parallel = max_parallel;

    EventBus bus;
    ToolRegistry registry(&bus);
    DispatcherConfig dcfg;
    dcfg.worker_limit = 32;
    Dispatcher dispatcher(registry, bus, dcfg);
    ToolDescriptor d;
    d.name = "svc";
    d.endpoint = "inproc:svc";
    d.signature.params = {{"key", SemanticType::String, false}};
    d.max_parallel = max_parallel;
    d.queue_limit = 32;
    registry.register_tool(d);

    auto counters = std::make_shared<ToolCounters>();
    LocalToolHost* host = &dispatcher.local_tools();
    dispatcher.local_tools().add("svc", [host, latency, counters](const nlohmann::json&) {
        counters->enter();
        ++counters->invocations;
        host->sleep_for(latency);
        counters->exit();
        return ToolWireResponse{true, "done", {}};
    });
    bus.open_session("stress");

    std::atomic<int> ok{0}, total{0};
    std::vector<std::thread> callers;
    for (int g = 0; g < groups; ++g) {
        callers.emplace_back([&, g] {
            std::vector<DispatchRequest> reqs;
            for (int c = 0; c < calls_per_group; ++c) {
                Action a;
                a.tool = "svc";
                a.group = static_cast<std::uint64_t>(g + 1);
                reqs.push_back({a, nlohmann::json::object(), "stress"});
            }
            auto results = dispatcher.dispatch_group(reqs);
            for (const auto& r : results) {
                ++total;
                if (r.outcome == DispatchOutcome::Ok) ++ok;
            }
        });
    }
    for (auto& t : callers) t.join();
    report.total_results = total.load();
    report.ok_results = ok.load();
    report.observed_high_water = counters->high_water.load();
    report.ledger_high_water = registry.capacity_stats("svc").high_water;
    return report;
}

// ---- turn gating --------------------------------------------------------------

struct TurnGateReport {
    int max_turns = 0;
    int backend_calls = 0;
    bool done = false;
    int turns = 0;
    std::string final_answer;
};

// A script that never finalizes on its own: the session must make exactly
// max_turns planning calls plus one forced-finalize call, then stop.
inline TurnGateReport run_turn_gate_check(int max_turns = 10) {
    TurnGateReport report;
    report.max_turns = max_turns;
    EngineConfig cfg;
    cfg.session.max_turns = max_turns;
    Engine engine(cfg);
    std::vector<SyntheticToolSpec> specs(1);
    specs[0].name = "probe";
    SyntheticToolset tools(engine, specs, 1);
    std::vector<ScriptStep> steps;
    for (int i = 0; i < max_turns; ++i)
        steps.push_back({std::nullopt, "Thought: Keep probing.\nAction: probe(key=\"x\")",
                         std::nullopt, std::nullopt});
    steps.push_back({std::nullopt, "Final Answer: stopping at the turn limit.", std::nullopt,
                     std::nullopt});
    // One extra step that must never be consumed.
    steps.push_back({std::nullopt, "Final Answer: this step must never run.", std::nullopt,
                     std::nullopt});
    auto backend = std::make_shared<ScriptedBackend>(steps);
    engine.set_backend(backend);
    TaskSubmission sub;
    sub.task = "Probe until stopped.";
    auto outcome = engine.submit(sub);
    engine.wait(outcome.session_id);
    const Session* s = engine.session(outcome.session_id);
    report.backend_calls = backend->calls();
    report.done = s->status() == SessionStatus::Done;
    report.turns = s->turns_taken();
    report.final_answer = s->final_answer();
    return report;
}

// ---- cost comparison -----------------------------------------------------------

struct CostComparisonReport {
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;
    double split_prompt_rate = 0.005;
    double split_completion_rate = 0.015;
    double uniform_rate = 0.010;
    double split_dollars = 0;
    double uniform_dollars = 0;

    nlohmann::json to_json() const {
        return {{"prompt_tokens", prompt_tokens},
                {"completion_tokens", completion_tokens},
                {"split_prompt_rate", split_prompt_rate},
                {"split_completion_rate", split_completion_rate},
                {"uniform_rate", uniform_rate},
                {"split_dollars", split_dollars},
                {"uniform_dollars", uniform_dollars}};
    }

    std::string to_text() const {
        char buf[256];
        std::snprintf(buf, sizeof buf,
                      "cost comparison\nprompt_tokens: %lld\ncompletion_tokens: %lld\n"
                      "split_dollars: %.6f\nuniform_dollars: %.6f\n",
                      static_cast<long long>(prompt_tokens),
                      static_cast<long long>(completion_tokens), split_dollars, uniform_dollars);
        return buf;
    }
};

// The same prompt-heavy scripted workload billed under split prompt/completion
// rates and under one uniform blended rate.
inline CostComparisonReport run_cost_comparison() {
    CostComparisonReport report;
    auto run_with_rates = [&](double prompt_rate, double completion_rate) -> CostLedger {
        EngineConfig cfg;
        cfg.session.prompt_rate = prompt_rate;
        cfg.session.completion_rate = completion_rate;
        Engine engine(cfg);
        std::vector<SyntheticToolSpec> specs(1);
        specs[0].name = "echo";
        specs[0].response_template = "echo:{key}";
        SyntheticToolset tools(engine, specs, 1);
        std::vector<ScriptStep> steps;
        for (int i = 0; i < 3; ++i)
            steps.push_back({std::nullopt, "Thought: Work.\nAction: echo(key=\"x\")",
                             std::int64_t{2000}, std::int64_t{150}});
        steps.push_back(
            {std::nullopt, "Final Answer: done.", std::int64_t{2000}, std::int64_t{150}});
        engine.set_backend(std::make_shared<ScriptedBackend>(steps));
        TaskSubmission sub;
        sub.task = "Run the echo workload.";
        auto outcome = engine.submit(sub);
        engine.wait(outcome.session_id);
        return engine.session(outcome.session_id)->cost();
    };
    CostLedger split = run_with_rates(report.split_prompt_rate, report.split_completion_rate);
    CostLedger uniform = run_with_rates(report.uniform_rate, report.uniform_rate);
    report.prompt_tokens = split.prompt_tokens;
    report.completion_tokens = split.completion_tokens;
    report.split_dollars = split.dollars();
    report.uniform_dollars = uniform.dollars();
    return report;
}

// ---- scenario files -------------------------------------------------------------

// Scenario files drive the CLI `simulate` subcommand. The text output for the
// deterministic scenario types is byte-stable for a fixed seed.
struct ScenarioResult {
    int exit_code = 1;
    std::string text;
    nlohmann::json json;
};

inline ScenarioResult run_scenario_json(const nlohmann::json& spec,
                                        std::optional<std::uint64_t> seed_override) {
    ScenarioResult result;
    std::string type = spec.value("type", std::string{});
    if (type == "golden") {
        GoldenOptions opts;
        opts.streaming = spec.value("streaming", false);
        opts.force_sequential = spec.value("force_sequential", false);
        auto report = run_golden_trace(opts);
        result.exit_code = report.passed ? 0 : 1;
        result.text = report.passed ? "golden trace: pass\n" : "golden trace: FAIL\n";
        for (const auto& f : report.failures) result.text += "  - " + f + "\n";
        result.text += "final answer: " + report.final_answer + "\n";
        result.json = {{"passed", report.passed},
                       {"final_answer", report.final_answer},
                       {"failures", report.failures},
                       {"dollars", report.dollars}};
    } else if (type == "robustness") {
        RobustnessOptions opts;
        opts.runs = spec.value("runs", 200);
        opts.failure_probability = spec.value("failure_probability", 0.2);
        opts.seed = spec.value("seed", std::uint64_t{7});
        opts.replan = spec.value("replan", true);
        opts.max_turns = spec.value("max_turns", 6);
        if (seed_override) opts.seed = *seed_override;
        auto report = run_robustness_experiment(opts);
        result.exit_code = 0;
        result.text = report.to_text();
        result.json = report.to_json();
    } else if (type == "parallel_timing") {
        auto report = run_parallel_timing(
            spec.value("runs", 20),
            std::chrono::milliseconds(spec.value("latency_ms", std::int64_t{1000})));
        result.exit_code = 0;
        char buf[160];
        std::snprintf(buf, sizeof buf,
                      "parallel timing: mean ratio %.3f (parallel %.1f ms, sequential %.1f ms)\n",
                      report.mean_ratio, report.mean_parallel_ms, report.mean_sequential_ms);
        result.text = buf;
        result.json = {{"mean_ratio", report.mean_ratio},
                       {"mean_parallel_ms", report.mean_parallel_ms},
                       {"mean_sequential_ms", report.mean_sequential_ms}};
    } else if (type == "capacity_timing") {
        auto report = run_capacity_timing(
            spec.value("calls", 6), spec.value("capacity", 2),
            std::chrono::milliseconds(spec.value("latency_ms", std::int64_t{100})));
        result.exit_code = report.wall_ms >= 0 ? 0 : 1;
        char buf[160];
        std::snprintf(buf, sizeof buf, "capacity timing: %lld ms wall against %lld ms ideal\n",
                      static_cast<long long>(report.wall_ms),
                      static_cast<long long>(report.ideal_ms));
        result.text = buf;
        result.json = {{"wall_ms", report.wall_ms}, {"ideal_ms", report.ideal_ms}};
    } else if (type == "capacity_stress") {
        auto report = run_capacity_stress(
            spec.value("groups", 64), spec.value("calls_per_group", 2),
            spec.value("max_parallel", 4),
            std::chrono::milliseconds(spec.value("latency_ms", std::int64_t{20})));
        bool pass = report.ok_results == report.total_results &&
                    report.observed_high_water <= report.max_parallel &&
                    report.ledger_high_water <= report.max_parallel;
        result.exit_code = pass ? 0 : 1;
        char buf[200];
        std::snprintf(buf, sizeof buf,
                      "capacity stress: %d/%d ok, high water %d (ledger %d) against cap %d\n",
                      report.ok_results, report.total_results, report.observed_high_water,
                      report.ledger_high_water, report.max_parallel);
        result.text = buf;
        result.json = {{"ok_results", report.ok_results},
                       {"total_results", report.total_results},
                       {"observed_high_water", report.observed_high_water},
                       {"ledger_high_water", report.ledger_high_water}};
    } else if (type == "cost_comparison") {
        auto report = run_cost_comparison();
        result.exit_code = report.split_dollars < report.uniform_dollars ? 0 : 1;
        result.text = report.to_text();
        result.json = report.to_json();
    } else if (type == "turn_gate") {
        auto report = run_turn_gate_check(spec.value("max_turns", 10));
        bool pass = report.done && report.backend_calls == report.max_turns + 1;
        result.exit_code = pass ? 0 : 1;
        char buf[160];
        std::snprintf(buf, sizeof buf, "turn gate: %d backend calls for max_turns %d -> %s\n",
                      report.backend_calls, report.max_turns, pass ? "pass" : "FAIL");
        result.text = buf;
        result.json = {{"backend_calls", report.backend_calls},
                       {"max_turns", report.max_turns},
                       {"pass", pass}};
    } else {
        result.text = "unknown scenario type \"" + type + "\"\n";
        result.json = {{"error", result.text}};
    }
    return result;
}

inline ScenarioResult run_scenario_file(const std::filesystem::path& path,
                                        std::optional<std::uint64_t> seed_override) {
    std::ifstream in(path);
    if (!in.is_open()) {
        ScenarioResult r;
        r.text = "cannot open scenario file: " + path.string() + "\n";
        return r;
    }
    nlohmann::json spec;
    try {
        in >> spec;
    } catch (const std::exception& e) {
        ScenarioResult r;
        r.text = std::string("scenario file is not valid JSON: ") + e.what() + "\n";
        return r;
    }
    return run_scenario_json(spec, seed_override);
}

}  // namespace reactor
