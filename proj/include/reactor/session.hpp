#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "reactor/backend.hpp"
#include "reactor/dispatcher.hpp"
#include "reactor/events.hpp"
#include "reactor/parser.hpp"
#include "reactor/registry.hpp"
#include "reactor/scratchpad.hpp"
#include "reactor/text.hpp"

namespace reactor {

// ---- cost accounting -------------------------------------------------------

// Integer token totals with dollar figures derived on read, so the total is
// independent of the order in which usage lands (no floating-point
// accumulation drift). Rates are dollars per 1000 tokens.
struct CostLedger {
    double prompt_rate = 0.005;
    double completion_rate = 0.015;

    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;

    struct ToolCharge {
        std::int64_t tokens = 0;
        double rate = 0.0;
    };
    std::map<std::string, ToolCharge> tools;

    void record_backend(std::int64_t prompt, std::int64_t completion) {
        prompt_tokens += prompt;
        completion_tokens += completion;
    }

    void record_tool(const std::string& name, std::int64_t tokens, double rate_per_1k) {
        auto& t = tools[name];
        t.tokens += tokens;
        t.rate = rate_per_1k;
    }

    double dollars() const {
        double d = static_cast<double>(prompt_tokens) / 1000.0 * prompt_rate +
                   static_cast<double>(completion_tokens) / 1000.0 * completion_rate;
        for (const auto& [_, t] : tools) d += static_cast<double>(t.tokens) / 1000.0 * t.rate;
        return d;
    }

    nlohmann::json to_json() const {
        nlohmann::json tool_json = nlohmann::json::object();
        for (const auto& [name, t] : tools)
            tool_json[name] = {{"tokens", t.tokens}, {"rate_per_1k", t.rate}};
        return {{"prompt_tokens", prompt_tokens},
                {"completion_tokens", completion_tokens},
                {"prompt_rate", prompt_rate},
                {"completion_rate", completion_rate},
                {"tools", tool_json},
                {"dollars", dollars()}};
    }
};

inline void record_tokens(CostLedger& ledger, std::int64_t prompt, std::int64_t completion) {
    ledger.record_backend(prompt, completion);
}

// ---- session ----------------------------------------------------------------

enum class SessionStatus { Running, AwaitingResults, Finalizing, Done, Failed };

inline const char* to_string(SessionStatus s) {
    switch (s) {
        case SessionStatus::Running: return "running";
        case SessionStatus::AwaitingResults: return "awaiting_results";
        case SessionStatus::Finalizing: return "finalizing";
        case SessionStatus::Done: return "done";
        case SessionStatus::Failed: return "failed";
    }
    return "running";
}

struct SessionConfig {
    int max_turns = 10;
    std::int64_t context_budget_tokens = 8000;
    int verbatim_turns = 2;  // newest turns kept whole by compaction
    double prompt_rate = 0.005;
    double completion_rate = 0.015;
    // How long the start of a turn waits for background groups to land.
    std::chrono::milliseconds background_wait{500};
    bool streaming = false;
    int max_completion_tokens = 512;
    std::vector<std::string> extra_stop_sequences;
    std::string final_hint =
        "You have used all available turns. Reply with a single line starting with "
        "\"Final Answer:\" giving your best answer now.";
};

inline const char* session_instructions() {
    return
        "You complete tasks by reasoning step by step and calling tools.\n"
        "Each turn, reply with an optional single line starting with \"Thought:\" followed by\n"
        "exactly one directive line: either \"Action: <calls>\" or \"Final Answer: <answer>\".\n"
        "A call looks like Name(param=value, ...). Join calls to run concurrently with '&&'\n"
        "on the same Action line; append '&' after a call to run it in the background.\n"
        "Strings are double-quoted, lists look like [\"a\", \"b\"], booleans are true/false.\n"
        "Use only the tools and parameters listed below. After the Action line, stop and\n"
        "wait for Observation lines with the results.";
}

struct AssembledPrompt {
    bool ok = false;
    std::string text;
    std::string error;
};

// One task run: the reason/act loop over a planner backend, the scratchpad,
// dispatch of tool calls, and per-session cost. run() drives it to Done or
// Failed. State getters are safe to call from other threads while running.
class Session {
  public:
    Session(std::string id, std::string task, std::vector<Attachment> attachments,
            SessionConfig cfg, ToolRegistry& registry, Dispatcher& dispatcher, EventBus& bus,
            PlannerBackend& backend)
        : id_(std::move(id)),
          task_(std::move(task)),
          cfg_(std::move(cfg)),
          registry_(registry),
          dispatcher_(dispatcher),
          bus_(bus),
          backend_(backend) {
        ledger_.prompt_rate = cfg_.prompt_rate;
        ledger_.completion_rate = cfg_.completion_rate;
        for (auto& a : attachments) attachments_.add(std::move(a));
    }

    // Runs the session to completion. A session with max_turns N makes at
    // most N planning calls plus exactly one forced-finalize call.
    void run() {
        bus_.open_session(id_);
        while (status() == SessionStatus::Running ||
               status() == SessionStatus::AwaitingResults ||
               status() == SessionStatus::Finalizing) {
            run_turn();
        }
        drain_pending_after_finalize();
        bus_.close_session(id_);
    }

    const std::string& id() const { return id_; }

    SessionStatus status() const {
        std::lock_guard lk(state_mu_);
        return status_;
    }

    std::string final_answer() const {
        std::lock_guard lk(state_mu_);
        return final_answer_;
    }

    std::string failure_reason() const {
        std::lock_guard lk(state_mu_);
        return failure_reason_;
    }

    CostLedger cost() const {
        std::lock_guard lk(state_mu_);
        return ledger_;
    }

    int turns_taken() const {
        std::lock_guard lk(state_mu_);
        return turn_;
    }

    // Full, never-compacted entry log. Read after run() returns.
    const std::vector<ScratchpadEntry>& transcript() const { return log_; }
    const CompactedPad& pad() const { return pad_; }
    const AttachmentStore& attachments() const { return attachments_; }

    // Exposed for tests: the exact prompt the next planning call would see.
    AssembledPrompt assemble_prompt(bool forced) {
        return build_prompt(forced);
    }

  private:
    // ---- turn machinery ----

    void run_turn() {
        {
            std::lock_guard lk(state_mu_);
            ++turn_;
        }
        collect_background();
        bool forced = turn_number() > cfg_.max_turns;
        if (forced) set_status(SessionStatus::Finalizing);

        auto prompt = build_prompt(forced);
        if (!prompt.ok) {
            append(EntryKind::Error, prompt.error);
            fail(prompt.error);
            return;
        }

        BackendRequest req;
        req.prompt = prompt.text;
        req.max_completion_tokens = cfg_.max_completion_tokens;
        req.stop_sequences = {"\nObservation:"};
        for (const auto& s : cfg_.extra_stop_sequences) req.stop_sequences.push_back(s);
        // The forced finalize call is a plain one-shot: nothing to dispatch
        // speculatively from a reply we will treat as the answer.
        req.stream = cfg_.streaming && !forced;

        std::uint64_t gid = static_cast<std::uint64_t>(turn_number());

        if (req.stream) {
            run_streaming_turn(req, gid);
            return;
        }

        CompletionResult cr = backend_.complete(req);
        record_usage(cr);
        if (!cr.ok) {
            append(EntryKind::Error, "backend error: " + cr.error);
            if (forced) fail("backend failed during forced finalize: " + cr.error);
            return;
        }
        PlannerOutput out = parse_planner_output(cr.text, gid);

        if (forced) {
            if (out.thought) append(EntryKind::Thought, *out.thought);
            finalize(out.final_answer ? *out.final_answer : trim(cr.text));
            return;
        }
        if (out.thought) append(EntryKind::Thought, *out.thought);
        if (!out.malformed() && out.final_answer) {
            finalize(*out.final_answer);
            return;
        }
        if (out.malformed()) {
            // Nothing was dispatched in batch mode; even a cleanly decided
            // call prefix is discarded when the line as a whole is invalid.
            append(EntryKind::Error, "malformed planner output (" + *out.parse_error +
                                         "); payload: " + digest_prefix(cr.text, 200));
            return;
        }
        execute_action_line(out.actions, gid);
    }

    void run_streaming_turn(const BackendRequest& req, std::uint64_t gid) {
        // Speculative path: every call decided mid-stream is validated and
        // dispatched immediately, one single-request group per call, all
        // sharing this turn's group id.
        struct Started {
            Action action;
            std::shared_ptr<GroupHandle> handle;
        };
        std::vector<Started> started;
        std::vector<std::pair<Action, std::string>> rejected;

        StreamParser parser(gid, [&](const Action& a) {
            std::string error;
            nlohmann::json wire;
            if (prepare_call(a, wire, error)) {
                DispatchRequest dr{a, std::move(wire), id_};
                started.push_back({a, dispatcher_.dispatch_group_async({std::move(dr)})});
            } else {
                rejected.emplace_back(a, error);
            }
        });

        CompletionResult cr = backend_.complete(req, [&](std::string_view chunk) {
            parser.feed(chunk);
        });
        record_usage(cr);
        PlannerOutput out = cr.ok ? parser.finish()
                                  : parser.abort("backend stream interrupted: " + cr.error);

        if (out.thought) append(EntryKind::Thought, *out.thought);
        if (!out.malformed() && out.final_answer) {
            finalize(*out.final_answer);
            return;
        }

        const std::vector<Action>& line = out.malformed() ? parser.emitted() : out.actions;
        if (line.empty()) {
            append(EntryKind::Error, out.malformed()
                                         ? "malformed planner output (" + *out.parse_error +
                                               "); payload: " + digest_prefix(parser.buffer(), 200)
                                         : "planner output contained no calls");
            return;
        }
        append_action_entry(line, gid);
        if (out.malformed())
            append(EntryKind::Error, "malformed planner output (" + *out.parse_error +
                                         "); calls already dispatched were kept");
        for (const auto& [action, error] : rejected)
            append(EntryKind::Error, "rejected call " + render_call(action) + ": " + error);

        set_status(SessionStatus::AwaitingResults);
        for (auto& s : started) {
            if (s.action.mode == CallMode::Background) {
                pending_.push_back({s.handle, {s.action}});
                continue;
            }
            s.handle->wait();
            for (const auto& r : s.handle->results()) record_result(r);
        }
        set_status(SessionStatus::Running);
    }

    // Shared batch path: append the action entry, validate, dispatch the
    // blocking subset as one group, park the background subset.
    void execute_action_line(const std::vector<Action>& line, std::uint64_t gid) {
        append_action_entry(line, gid);

        std::vector<DispatchRequest> blocking;
        std::vector<DispatchRequest> background;
        std::vector<Action> background_actions;
        for (const auto& a : line) {
            std::string error;
            nlohmann::json wire;
            if (!prepare_call(a, wire, error)) {
                append(EntryKind::Error, "rejected call " + render_call(a) + ": " + error);
                continue;
            }
            DispatchRequest dr{a, std::move(wire), id_};
            if (a.mode == CallMode::Background) {
                background.push_back(std::move(dr));
                background_actions.push_back(a);
            } else {
                blocking.push_back(std::move(dr));
            }
        }

        set_status(SessionStatus::AwaitingResults);
        if (!background.empty())
            pending_.push_back(
                {dispatcher_.dispatch_group_async(std::move(background)), background_actions});
        if (!blocking.empty()) {
            auto results = dispatcher_.dispatch_group(blocking);
            for (const auto& r : results) record_result(r);
        }
        set_status(SessionStatus::Running);
    }

    // Validation plus the minimal-context payload rule; false -> `error`.
    bool prepare_call(const Action& a, nlohmann::json& wire, std::string& error) {
        auto v = registry_.validate_action(a);
        if (!v.ok) {
            error = v.message;
            return false;
        }
        auto desc = registry_.find(a.tool);
        if (!desc) {
            error = "unknown tool \"" + a.tool + "\"";
            return false;
        }
        auto pd = enforce_minimal_context(a, *desc, attachments_);
        if (pd.status != PayloadDecision::Status::Ok) {
            error = pd.message;
            return false;
        }
        wire = std::move(pd.wire_args);
        return true;
    }

    void record_result(const DispatchResult& r) {
        append(EntryKind::Observation, observation_text(r), r.group, r.tool);
        if (r.outcome == DispatchOutcome::Ok) {
            if (auto desc = registry_.find(r.tool); desc && desc->cost_per_1k_tokens) {
                std::lock_guard lk(state_mu_);
                ledger_.record_tool(r.tool, estimate_tokens(r.text), *desc->cost_per_1k_tokens);
            }
        }
    }

    // Appends observations from background groups that are ready, waiting a
    // short bounded interval total at the start of the turn.
    void collect_background() {
        if (pending_.empty()) return;
        auto deadline = std::chrono::steady_clock::now() + cfg_.background_wait;
        std::vector<PendingGroup> still_pending;
        for (auto& pg : pending_) {
            auto remaining = std::chrono::duration_cast<std::chrono::milliseconds>(
                deadline - std::chrono::steady_clock::now());
            if (remaining.count() < 0) remaining = std::chrono::milliseconds(0);
            if (pg.handle->wait_for(remaining)) {
                for (const auto& r : pg.handle->results()) record_result(r);
            } else {
                still_pending.push_back(pg);
            }
        }
        pending_ = std::move(still_pending);
    }

    // After finalize, results nobody will read become dropped_result events.
    void drain_pending_after_finalize() {
        for (auto& pg : pending_) {
            pg.handle->wait();
            for (const auto& r : pg.handle->results()) {
                bus_.emit(id_, EventType::DroppedResult,
                          "discarded result from " + r.tool + " (session already finalized)",
                          {{"tool", r.tool}, {"group", r.group}, {"turn", turn_number()}});
            }
        }
        pending_.clear();
    }

    // ---- prompt assembly ----

    AssembledPrompt build_prompt(bool forced) {
        for (int attempt = 0;; ++attempt) {
            std::string text = render_prompt(forced);
            if (estimate_tokens(text) <= cfg_.context_budget_tokens) return {true, text, {}};
            if (attempt > 0)
                return {false, {},
                        "context budget exceeded: prompt is " +
                            std::to_string(estimate_tokens(text)) + " tokens against a budget of " +
                            std::to_string(cfg_.context_budget_tokens) +
                            " even after compaction"};
            std::string overhead_only = render_prompt_with_pad(forced, {});
            std::int64_t pad_budget =
                cfg_.context_budget_tokens - estimate_tokens(overhead_only);
            pad_ = compact_scratchpad(pad_, std::max<std::int64_t>(0, pad_budget),
                                      cfg_.verbatim_turns);
        }
    }

    std::string render_prompt(bool forced) { return render_prompt_with_pad(forced, pad_); }

    std::string render_prompt_with_pad(bool forced, const CompactedPad& pad) {
        std::vector<std::string> parts;
        parts.push_back(session_instructions());
        parts.push_back(render_tool_prompt(registry_.snapshot()));
        if (!attachments_.empty()) {
            std::string a = "Attachments:";
            for (const auto& att : attachments_.all()) {
                auto pages = AttachmentStore::split_pages(att.content);
                a += "\n- " + att.name + " (" + std::to_string(pages.size()) + " pages, " +
                     std::to_string(att.content.size()) + " chars)";
            }
            parts.push_back(std::move(a));
        }
        parts.push_back("Task: " + task_);
        if (!pending_.empty()) {
            std::string b = "Background calls still running:";
            for (const auto& pg : pending_)
                for (const auto& a : pg.actions)
                    b += " " + a.tool + " (group " + std::to_string(a.group) + ")";
            parts.push_back(std::move(b));
        }
        std::string pad_text = render_pad(pad);
        if (!pad_text.empty()) parts.push_back(std::move(pad_text));
        if (forced) parts.push_back(cfg_.final_hint);
        std::string out;
        for (const auto& p : parts) {
            if (!out.empty()) out += "\n\n";
            out += p;
        }
        return out;
    }

    // ---- bookkeeping ----

    int turn_number() const {
        std::lock_guard lk(state_mu_);
        return turn_;
    }

    void set_status(SessionStatus s) {
        std::lock_guard lk(state_mu_);
        status_ = s;
    }

    void record_usage(const CompletionResult& cr) {
        std::lock_guard lk(state_mu_);
        ledger_.record_backend(cr.usage.prompt_tokens, cr.usage.completion_tokens);
    }

    void finalize(std::string answer) {
        append(EntryKind::Final, answer);
        std::lock_guard lk(state_mu_);
        final_answer_ = std::move(answer);
        status_ = SessionStatus::Done;
    }

    void fail(std::string reason) {
        std::lock_guard lk(state_mu_);
        failure_reason_ = std::move(reason);
        status_ = SessionStatus::Failed;
    }

    static EventType event_type_for(EntryKind k) {
        switch (k) {
            case EntryKind::Thought: return EventType::Thought;
            case EntryKind::Action: return EventType::Action;
            case EntryKind::Observation: return EventType::Result;
            case EntryKind::Error: return EventType::Error;
            case EntryKind::Final: return EventType::FinalAnswer;
        }
        return EventType::Error;
    }

    void append(EntryKind kind, std::string content,
                std::optional<std::uint64_t> group = std::nullopt,
                std::optional<std::string> tool = std::nullopt) {
        ScratchpadEntry e;
        e.kind = kind;
        e.content = std::move(content);
        e.turn = turn_number();
        e.group = group;
        e.tool = tool;
        pad_.verbatim.push_back(e);
        log_.push_back(e);
        nlohmann::json meta{{"turn", e.turn}};
        if (e.group) meta["group"] = *e.group;
        if (e.tool) meta["tool"] = *e.tool;
        bus_.emit(id_, event_type_for(kind), e.content, std::move(meta));
    }

    void append_action_entry(const std::vector<Action>& line, std::uint64_t gid) {
        std::string rendered;
        std::string tools;
        for (size_t i = 0; i < line.size(); ++i) {
            if (i) {
                rendered += " && ";
                tools += ", ";
            }
            rendered += render_call(line[i]);
            if (line[i].mode == CallMode::Background) rendered += " &";
            tools += line[i].tool;
        }
        append(EntryKind::Action, rendered, gid, tools);
    }

    struct PendingGroup {
        std::shared_ptr<GroupHandle> handle;
        std::vector<Action> actions;
    };

    std::string id_;
    std::string task_;
    SessionConfig cfg_;
    ToolRegistry& registry_;
    Dispatcher& dispatcher_;
    EventBus& bus_;
    PlannerBackend& backend_;

    AttachmentStore attachments_;
    CompactedPad pad_;
    std::vector<ScratchpadEntry> log_;
    std::vector<PendingGroup> pending_;

    mutable std::mutex state_mu_;
    SessionStatus status_ = SessionStatus::Running;
    std::string final_answer_;
    std::string failure_reason_;
    CostLedger ledger_;
    int turn_ = 0;
};

}  // namespace reactor
