#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "reactor/action.hpp"
#include "reactor/events.hpp"
#include "reactor/http_backend.hpp"  // parse_url
#include "reactor/registry.hpp"
#include "reactor/text.hpp"

namespace reactor {

// ---- tool transport --------------------------------------------------------

// Wire protocol with tool processes: POST {"tool": ..., "args": {...}} and
// back comes {"result": ...} or {"error": {"message": ...}}.
struct ToolWireResponse {
    bool ok = false;
    std::string result;
    std::string error;
};

using LocalTool = std::function<ToolWireResponse(const nlohmann::json& args)>;

// In-process tools addressed as "inproc:<key>". Fakes that sleep should do so
// via sleep_for() so dispatcher shutdown can wake abandoned calls promptly.
class LocalToolHost {
  public:
    void add(const std::string& key, LocalTool fn) {
        std::lock_guard lk(mu_);
        tools_[key] = std::make_shared<LocalTool>(std::move(fn));
    }

    void remove(const std::string& key) {
        std::lock_guard lk(mu_);
        tools_.erase(key);
    }

    std::shared_ptr<const LocalTool> find(const std::string& key) const {
        std::lock_guard lk(mu_);
        auto it = tools_.find(key);
        return it == tools_.end() ? nullptr : it->second;
    }

    // Interruptible sleep; returns false when woken by shutdown.
    bool sleep_for(std::chrono::milliseconds d) const {
        std::unique_lock lk(mu_);
        return !cv_.wait_for(lk, d, [&] { return shutdown_; });
    }

    void shutdown() {
        std::lock_guard lk(mu_);
        shutdown_ = true;
        cv_.notify_all();
    }

    bool is_shutdown() const {
        std::lock_guard lk(mu_);
        return shutdown_;
    }

  private:
    mutable std::mutex mu_;
    mutable std::condition_variable cv_;
    std::map<std::string, std::shared_ptr<LocalTool>> tools_;
    bool shutdown_ = false;
};

// ---- attachments and the minimal-context rule ------------------------------

struct Attachment {
    std::string name;
    std::string content;  // pages separated by form-feed ('\f')
};

class AttachmentStore {
  public:
    void add(Attachment a) { items_.push_back(std::move(a)); }

    const Attachment* find(const std::string& name) const {
        for (const auto& a : items_)
            if (a.name == name) return &a;
        return nullptr;
    }

    const Attachment* first() const { return items_.empty() ? nullptr : &items_.front(); }
    bool empty() const { return items_.empty(); }
    const std::vector<Attachment>& all() const { return items_; }

    static std::vector<std::string> split_pages(const std::string& content) {
        std::vector<std::string> pages;
        size_t pos = 0;
        while (pos <= content.size()) {
            size_t ff = content.find('\f', pos);
            if (ff == std::string::npos) {
                pages.push_back(content.substr(pos));
                break;
            }
            pages.push_back(content.substr(pos, ff - pos));
            pos = ff + 1;
        }
        return pages;
    }

  private:
    std::vector<Attachment> items_;
};

// "4" or "2-7", 1-based inclusive.
inline std::optional<std::pair<int, int>> parse_page_range(const std::string& sel) {
    int lo = 0, hi = 0;
    size_t dash = sel.find('-', 1);  // allow nothing before a leading digit only
    try {
        if (dash == std::string::npos) {
            size_t used = 0;
            lo = hi = std::stoi(sel, &used);
            if (used != sel.size()) return std::nullopt;
        } else {
            size_t used = 0;
            lo = std::stoi(sel.substr(0, dash), &used);
            if (used != dash) return std::nullopt;
            hi = std::stoi(sel.substr(dash + 1), &used);
            if (used != sel.size() - dash - 1) return std::nullopt;
        }
    } catch (...) {
        return std::nullopt;
    }
    if (lo < 1 || hi < lo) return std::nullopt;
    return std::make_pair(lo, hi);
}

struct PayloadDecision {
    enum class Status { Ok, Violation, UnknownAttachment };
    Status status = Status::Ok;
    nlohmann::json wire_args;  // action args plus "attachment_content" when referenced
    std::string message;       // set for the two failure states
};

// Minimal-context rule: an attachment travels with a call only when the call
// references it — an explicit `attachment="name"` argument or a page/pages
// selector (which implies the first attachment). A selector narrows the
// payload to the selected range no matter where the tool runs; a referencing
// call without a selector gets the whole attachment only if the tool is
// local — shipping a whole attachment to a remote tool is a violation. The
// expanded payload must also respect the tool's max_input_chars.
inline PayloadDecision enforce_minimal_context(const Action& action, const ToolDescriptor& desc,
                                               const AttachmentStore& attachments) {
    PayloadDecision out;
    out.wire_args = args_to_json(action);

    const Value* attach_arg = action.find_arg("attachment");
    const Value* page_arg = action.find_arg("page");
    const Value* pages_arg = action.find_arg("pages");
    bool referenced = attach_arg || page_arg || pages_arg;
    if (referenced) {
        const Attachment* att = nullptr;
        if (attach_arg && std::holds_alternative<std::string>(*attach_arg)) {
            att = attachments.find(std::get<std::string>(*attach_arg));
            if (!att) {
                out.status = PayloadDecision::Status::UnknownAttachment;
                out.message = "no attachment named \"" + std::get<std::string>(*attach_arg) +
                              "\" on this session";
                return out;
            }
        } else {
            att = attachments.first();
            if (!att) {
                out.status = PayloadDecision::Status::UnknownAttachment;
                out.message = "call selects attachment pages but the session has no attachments";
                return out;
            }
        }

        std::optional<std::pair<int, int>> range;
        if (page_arg && std::holds_alternative<std::int64_t>(*page_arg)) {
            int p = static_cast<int>(std::get<std::int64_t>(*page_arg));
            range = std::make_pair(p, p);
        } else if (pages_arg && std::holds_alternative<std::string>(*pages_arg)) {
            range = parse_page_range(std::get<std::string>(*pages_arg));
            if (!range) {
                out.status = PayloadDecision::Status::Violation;
                out.message = "invalid pages selector \"" + std::get<std::string>(*pages_arg) +
                              "\" (expected \"N\" or \"N-M\")";
                return out;
            }
        }

        if (range) {
            auto pages = AttachmentStore::split_pages(att->content);
            std::string selected;
            for (int p = range->first; p <= range->second; ++p) {
                if (p < 1 || p > static_cast<int>(pages.size())) continue;  // out of range: empty
                if (!selected.empty()) selected += '\f';
                selected += pages[static_cast<size_t>(p - 1)];
            }
            out.wire_args["attachment_content"] = selected;
        } else {
            if (desc.locality == Locality::Remote) {
                out.status = PayloadDecision::Status::Violation;
                out.message = "privacy violation: whole attachment \"" + att->name +
                              "\" may not be sent to remote tool " + desc.name +
                              " without a page selector";
                return out;
            }
            out.wire_args["attachment_content"] = att->content;
        }
    }

    if (desc.signature.max_input_chars) {
        size_t total = out.wire_args.dump().size();
        if (total > *desc.signature.max_input_chars) {
            out.status = PayloadDecision::Status::Violation;
            out.message = desc.name + ": expanded payload is " + std::to_string(total) +
                          " chars, limit is " + std::to_string(*desc.signature.max_input_chars);
            return out;
        }
    }
    return out;
}

// ---- failure tracking ------------------------------------------------------

struct QuarantineNotice {
    std::chrono::steady_clock::time_point until;
    int failures = 0;
};

// Counts consecutive failures per tool; a success resets the streak. When the
// streak reaches the threshold the tool earns a cooldown and the streak
// resets (so the next trip needs a fresh run of failures).
class FailureTracker {
  public:
    explicit FailureTracker(int threshold = 3,
                            std::chrono::milliseconds cooldown = std::chrono::milliseconds(60000))
        : threshold_(threshold), cooldown_(cooldown) {}

    std::optional<QuarantineNotice> record(const std::string& tool, bool ok,
                                           std::chrono::steady_clock::time_point now) {
        std::lock_guard lk(mu_);
        int& streak = streaks_[tool];
        if (ok) {
            streak = 0;
            return std::nullopt;
        }
        if (++streak < threshold_) return std::nullopt;
        int failures = streak;
        streak = 0;
        return QuarantineNotice{now + cooldown_, failures};
    }

    int consecutive_failures(const std::string& tool) const {
        std::lock_guard lk(mu_);
        auto it = streaks_.find(tool);
        return it == streaks_.end() ? 0 : it->second;
    }

    int threshold() const { return threshold_; }
    std::chrono::milliseconds cooldown() const { return cooldown_; }

  private:
    int threshold_;
    std::chrono::milliseconds cooldown_;
    mutable std::mutex mu_;
    std::map<std::string, int> streaks_;
};

// ---- dispatch --------------------------------------------------------------

enum class DispatchOutcome { Ok, Timeout, ToolError, Unavailable, CapacityExhausted };

inline const char* to_string(DispatchOutcome o) {
    switch (o) {
        case DispatchOutcome::Ok: return "ok";
        case DispatchOutcome::Timeout: return "timeout";
        case DispatchOutcome::ToolError: return "tool_error";
        case DispatchOutcome::Unavailable: return "unavailable";
        case DispatchOutcome::CapacityExhausted: return "capacity_exhausted";
    }
    return "tool_error";
}

struct DispatchRequest {
    Action action;
    nlohmann::json wire_args;  // pre-expanded payload (enforce_minimal_context output)
    std::string session_id;
};

struct DispatchResult {
    std::string tool;
    std::uint64_t group = 0;
    size_t index = 0;  // position within the group
    DispatchOutcome outcome = DispatchOutcome::ToolError;
    std::string text;  // tool result, or a failure description
    std::chrono::milliseconds elapsed{0};
    bool waited_for_capacity = false;
};

// Observation wording for each outcome; failures stay one-line and stable.
inline std::string observation_text(const DispatchResult& r) {
    switch (r.outcome) {
        case DispatchOutcome::Ok: return r.text;
        case DispatchOutcome::Timeout: return "tool " + r.tool + " " + r.text;
        case DispatchOutcome::ToolError: return "tool " + r.tool + " failed: " + r.text;
        case DispatchOutcome::Unavailable: return "tool unavailable: " + r.text;
        case DispatchOutcome::CapacityExhausted: return "tool at capacity: " + r.text;
    }
    return r.text;
}

struct DispatcherConfig {
    int worker_limit = 32;  // process-wide concurrent dispatch tasks
    std::chrono::milliseconds default_timeout{30000};
    int quarantine_threshold = 3;
    std::chrono::milliseconds quarantine_cooldown{60000};
    bool force_sequential = false;  // ablation: run every group one call at a time
};

// Deterministic fault hook for the harness: return true to fail the call
// instead of invoking the transport. Checked inside invoke_tool so injected
// failures feed the same quarantine/observation machinery as real ones.
// `index` is the call's position within its group, letting injection be a
// pure function of call identity rather than scheduling order.
using FailureInjector = std::function<bool(const DispatchRequest& req, size_t index)>;

class GroupHandle {
  public:
    void wait() const {
        std::unique_lock lk(mu_);
        cv_.wait(lk, [&] { return remaining_ == 0; });
    }

    bool wait_for(std::chrono::milliseconds d) const {
        std::unique_lock lk(mu_);
        return cv_.wait_for(lk, d, [&] { return remaining_ == 0; });
    }

    bool ready() const {
        std::lock_guard lk(mu_);
        return remaining_ == 0;
    }

    // Results in request order; call only after wait()/ready().
    const std::vector<DispatchResult>& results() const {
        std::lock_guard lk(mu_);
        return results_;
    }

  private:
    friend class Dispatcher;

    void init(size_t n) {
        results_.resize(n);
        remaining_ = n;
    }

    void deliver(size_t index, DispatchResult r) {
        std::lock_guard lk(mu_);
        results_[index] = std::move(r);
        if (--remaining_ == 0) cv_.notify_all();
    }

    mutable std::mutex mu_;
    mutable std::condition_variable cv_;
    std::vector<DispatchResult> results_;
    size_t remaining_ = 0;
};

// Executes validated tool calls against their endpoints: per-request
// lease -> invoke -> release on a bounded worker pool, per-call deadlines
// with abandon-on-timeout (capacity is freed at the deadline; a straggler
// completion is discarded and recorded as a dropped_result event), and
// consecutive-failure quarantine.
class Dispatcher {
  public:
    using Clock = std::function<std::chrono::steady_clock::time_point()>;

    Dispatcher(ToolRegistry& registry, EventBus& bus, DispatcherConfig cfg = {},
               Clock clock = nullptr)
        : registry_(registry),
          bus_(bus),
          cfg_(cfg),
          clock_(clock ? std::move(clock) : [] { return std::chrono::steady_clock::now(); }),
          tracker_(cfg.quarantine_threshold, cfg.quarantine_cooldown) {}

    ~Dispatcher() {
        {
            std::lock_guard lk(queue_mu_);
            stopping_ = true;
        }
        queue_cv_.notify_all();
        for (auto& t : workers_) t.join();
        host_.shutdown();  // wake abandoned calls sleeping in fakes
        std::unique_lock lk(calls_mu_);
        calls_cv_.wait(lk, [&] { return outstanding_calls_ == 0; });
    }

    LocalToolHost& local_tools() { return host_; }
    FailureTracker& tracker() { return tracker_; }
    const DispatcherConfig& config() const { return cfg_; }

    void set_failure_injector(FailureInjector fn) {
        std::lock_guard lk(inject_mu_);
        injector_ = std::move(fn);
    }

    // Dispatches a group and blocks for its ordered results.
    std::vector<DispatchResult> dispatch_group(const std::vector<DispatchRequest>& requests) {
        auto handle = dispatch_group_async(requests);
        handle->wait();
        return handle->results();
    }

    // Fire-and-collect variant used for background calls.
    std::shared_ptr<GroupHandle> dispatch_group_async(std::vector<DispatchRequest> requests) {
        auto handle = std::make_shared<GroupHandle>();
        handle->init(requests.size());
        if (requests.empty()) return handle;
        if (cfg_.force_sequential) {
            for (size_t i = 0; i < requests.size(); ++i)
                handle->deliver(i, run_one(requests[i], i));
            return handle;
        }
        for (size_t i = 0; i < requests.size(); ++i) {
            enqueue([this, handle, req = std::move(requests[i]), i] {
                handle->deliver(i, run_one(req, i));
            });
        }
        return handle;
    }

    // Lease capacity, invoke with a deadline, release. Public so tests can
    // drive single calls; `index` only matters for result bookkeeping.
    DispatchResult run_one(const DispatchRequest& req, size_t index) {
        DispatchResult r;
        r.tool = req.action.tool;
        r.group = req.action.group;
        r.index = index;
        auto started = clock_();
        auto outcome = registry_.lease_capacity(req.action.tool);
        if (!outcome.granted()) {
            r.outcome = outcome.status == LeaseStatus::CapacityExhausted
                            ? DispatchOutcome::CapacityExhausted
                            : DispatchOutcome::Unavailable;
            r.text = outcome.message;
            r.elapsed = ms_since(started);
            return r;
        }
        r.waited_for_capacity = outcome.status == LeaseStatus::GrantedAfterWait;
        CapacityLease lease = std::move(outcome.lease);
        DispatchResult inner = invoke_tool(req, index);
        lease.release();
        r.outcome = inner.outcome;
        r.text = std::move(inner.text);
        r.elapsed = ms_since(started);
        feed_tracker(req, r.outcome);
        return r;
    }

    // The timed transport call. The caller must hold a capacity lease. The
    // call runs on its own thread; if the deadline passes first the call is
    // abandoned (its eventual completion is discarded with a dropped_result
    // event) and a timeout result is returned immediately.
    DispatchResult invoke_tool(const DispatchRequest& req, size_t index = 0) {
        DispatchResult r;
        r.tool = req.action.tool;
        r.group = req.action.group;
        r.index = index;
        {
            std::lock_guard lk(inject_mu_);
            if (injector_ && injector_(req, index)) {
                r.outcome = DispatchOutcome::ToolError;
                r.text = "injected failure";
                return r;
            }
        }
        auto desc = registry_.find(req.action.tool);
        if (!desc) {
            r.outcome = DispatchOutcome::Unavailable;
            r.text = "tool \"" + req.action.tool + "\" is not registered";
            return r;
        }
        auto deadline = desc->timeout.value_or(cfg_.default_timeout);

        struct CallState {
            std::mutex mu;
            std::condition_variable cv;
            bool done = false;
            bool abandoned = false;
            ToolWireResponse resp;
        };
        auto state = std::make_shared<CallState>();
        {
            std::lock_guard lk(calls_mu_);
            ++outstanding_calls_;
        }
        std::string endpoint = desc->endpoint;
        std::string tool_name = desc->name;
        std::string session_id = req.session_id;
        std::uint64_t group = req.action.group;
        std::thread([this, state, endpoint, tool_name, session_id, group,
                     args = req.wire_args, deadline] {
            ToolWireResponse resp = transport_call(endpoint, tool_name, args, deadline);
            bool late = false;
            {
                std::lock_guard lk(state->mu);
                state->resp = std::move(resp);
                state->done = true;
                late = state->abandoned;
            }
            state->cv.notify_all();
            if (late) emit_dropped(session_id, tool_name, group);
            {
                std::lock_guard lk(calls_mu_);
                --outstanding_calls_;
            }
            calls_cv_.notify_all();
        }).detach();

        std::unique_lock lk(state->mu);
        bool finished = state->cv.wait_for(lk, deadline, [&] { return state->done; });
        if (!finished) {
            state->abandoned = true;
            r.outcome = DispatchOutcome::Timeout;
            r.text = "timed out after " + std::to_string(deadline.count()) + " ms";
            return r;
        }
        if (state->resp.ok) {
            r.outcome = DispatchOutcome::Ok;
            r.text = std::move(state->resp.result);
        } else {
            r.outcome = DispatchOutcome::ToolError;
            r.text = std::move(state->resp.error);
        }
        return r;
    }

  private:
    void feed_tracker(const DispatchRequest& req, DispatchOutcome outcome) {
        // Short-circuited results never reached the tool; they say nothing
        // about its health.
        if (outcome == DispatchOutcome::Unavailable ||
            outcome == DispatchOutcome::CapacityExhausted)
            return;
        bool ok = outcome == DispatchOutcome::Ok;
        if (auto notice = tracker_.record(req.action.tool, ok, clock_())) {
            std::string reason = std::to_string(notice->failures) + " consecutive failures";
            registry_.quarantine_tool(req.action.tool, notice->until, reason);
            try {
                bus_.emit(req.session_id, EventType::Quarantine,
                          "tool " + req.action.tool + " quarantined for " +
                              std::to_string(tracker_.cooldown().count()) + " ms after " + reason,
                          {{"tool", req.action.tool}, {"group", req.action.group}});
            } catch (const std::exception&) {
                // Session stream already closed; the registry_changed event
                // from quarantine_tool still records the state change.
            }
        }
    }

    void emit_dropped(const std::string& session_id, const std::string& tool,
                      std::uint64_t group) {
        try {
            bus_.emit(session_id, EventType::DroppedResult,
                      "discarded late result from " + tool + " (deadline already passed)",
                      {{"tool", tool}, {"group", group}});
        } catch (const std::exception&) {
            try {
                bus_.emit(registry_.admin_session(), EventType::DroppedResult,
                          "discarded late result from " + tool + " for closed session " +
                              session_id,
                          {{"tool", tool}, {"group", group}, {"session", session_id}});
            } catch (const std::exception&) {
            }
        }
    }

    ToolWireResponse transport_call(const std::string& endpoint, const std::string& tool,
                                    const nlohmann::json& args,
                                    std::chrono::milliseconds deadline) {
        if (starts_with(endpoint, "inproc:")) {
            auto fn = host_.find(endpoint.substr(7));
            if (!fn) return {false, {}, "no in-process tool bound to " + endpoint};
            try {
                return (*fn)(args);
            } catch (const std::exception& e) {
                return {false, {}, std::string("tool threw: ") + e.what()};
            }
        }
        if (starts_with(endpoint, "http://") || starts_with(endpoint, "https://")) {
            auto url = parse_url(endpoint);
            if (!url) return {false, {}, "invalid tool endpoint: " + endpoint};
            httplib::Client cli(url->host, url->port);
            auto secs = std::chrono::duration_cast<std::chrono::seconds>(deadline);
            cli.set_connection_timeout(std::max<long>(1, secs.count()), 0);
            cli.set_read_timeout(std::max<long>(1, secs.count() + 1), 0);
            nlohmann::json body{{"tool", tool}, {"args", args}};
            auto res = cli.Post(url->path == "/" ? "/" : url->path.c_str(), body.dump(),
                                "application/json");
            if (!res) return {false, {}, "connection to " + endpoint + " failed"};
            auto j = nlohmann::json::parse(res->body, nullptr, false);
            if (res->status != 200) {
                std::string msg = "HTTP " + std::to_string(res->status);
                if (j.is_object() && j.contains("error") && j["error"].is_object())
                    msg = j["error"].value("message", msg);
                return {false, {}, msg};
            }
            if (!j.is_object() || !j.contains("result"))
                return {false, {}, "malformed tool response (no result field)"};
            return {true,
                    j["result"].is_string() ? j["result"].get<std::string>()
                                            : j["result"].dump(),
                    {}};
        }
        return {false, {}, "unsupported endpoint scheme: " + endpoint};
    }

    void enqueue(std::function<void()> task) {
        std::lock_guard lk(queue_mu_);
        queue_.push_back(std::move(task));
        // An idle worker absorbs exactly one task, so grow the pool whenever
        // queued work exceeds the number of workers parked on the queue.
        if (static_cast<int>(queue_.size()) > idle_workers_ &&
            static_cast<int>(workers_.size()) < cfg_.worker_limit)
            workers_.emplace_back([this] { worker_loop(); });
        queue_cv_.notify_one();
    }

    void worker_loop() {
        while (true) {
            std::function<void()> task;
            {
                std::unique_lock lk(queue_mu_);
                ++idle_workers_;
                queue_cv_.wait(lk, [&] { return stopping_ || !queue_.empty(); });
                --idle_workers_;
                if (stopping_ && queue_.empty()) return;
                task = std::move(queue_.front());
                queue_.pop_front();
            }
            task();
        }
    }

    std::chrono::milliseconds ms_since(std::chrono::steady_clock::time_point start) {
        return std::chrono::duration_cast<std::chrono::milliseconds>(clock_() - start);
    }

    ToolRegistry& registry_;
    EventBus& bus_;
    DispatcherConfig cfg_;
    Clock clock_;
    FailureTracker tracker_;
    LocalToolHost host_;

    std::mutex inject_mu_;
    FailureInjector injector_;

    std::mutex queue_mu_;
    std::condition_variable queue_cv_;
    std::deque<std::function<void()>> queue_;
    std::vector<std::thread> workers_;
    int idle_workers_ = 0;
    bool stopping_ = false;

    std::mutex calls_mu_;
    std::condition_variable calls_cv_;
    int outstanding_calls_ = 0;
};

}  // namespace reactor
