#pragma once

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "reactor/backend.hpp"
#include "reactor/dispatcher.hpp"
#include "reactor/events.hpp"
#include "reactor/registry.hpp"
#include "reactor/session.hpp"

namespace reactor {

struct EngineConfig {
    SessionConfig session;
    DispatcherConfig dispatcher;
    EventBusConfig events;
    int max_sessions = 64;  // concurrent running sessions; beyond this, busy
    std::string admin_stream = "registry";
};

struct TaskSubmission {
    std::string task;
    std::vector<Attachment> attachments;
    std::optional<int> max_turns;
    std::optional<bool> streaming;
    std::string session_id;  // empty -> generated
};

struct SubmitOutcome {
    bool ok = false;
    bool busy = false;  // rejected for capacity, not for input problems
    std::string session_id;
    std::string error;
};

struct TaskView {
    bool exists = false;
    std::string session_id;
    SessionStatus status = SessionStatus::Running;
    std::string answer;
    std::string failure;
    int turns = 0;
    nlohmann::json cost;
};

// Owns the registry, event bus, dispatcher, and running sessions; one engine
// per service process. Each submitted task runs on its own thread.
class Engine {
  public:
    explicit Engine(EngineConfig cfg = {})
        : cfg_(std::move(cfg)),
          bus_(cfg_.events),
          registry_(&bus_, cfg_.admin_stream),
          dispatcher_(registry_, bus_, cfg_.dispatcher) {}

    ~Engine() { wait_all(); }

    EventBus& events() { return bus_; }
    ToolRegistry& registry() { return registry_; }
    Dispatcher& dispatcher() { return dispatcher_; }
    LocalToolHost& local_tools() { return dispatcher_.local_tools(); }
    const EngineConfig& config() const { return cfg_; }

    void set_backend(std::shared_ptr<PlannerBackend> backend) {
        std::lock_guard lk(mu_);
        backend_ = std::move(backend);
    }

    std::shared_ptr<PlannerBackend> backend() const {
        std::lock_guard lk(mu_);
        return backend_;
    }

    SubmitOutcome submit(const TaskSubmission& t) {
        if (trim_view(t.task).empty()) return {false, false, {}, "task must be non-empty"};
        std::shared_ptr<PlannerBackend> backend;
        std::shared_ptr<Record> rec;
        std::string id;
        {
            std::lock_guard lk(mu_);
            if (!backend_) return {false, false, {}, "no planner backend configured"};
            backend = backend_;
            if (running_ >= cfg_.max_sessions)
                return {false, true, {},
                        "engine is at its session limit (" + std::to_string(cfg_.max_sessions) +
                            " running)"};
            id = t.session_id.empty() ? generate_id() : t.session_id;
            if (records_.count(id))
                return {false, false, {}, "session id \"" + id + "\" already exists"};
            if (id.find('/') != std::string::npos || id.find("..") != std::string::npos)
                return {false, false, {}, "session id must be a plain name"};

            SessionConfig scfg = cfg_.session;
            if (t.max_turns) scfg.max_turns = *t.max_turns;
            if (t.streaming) scfg.streaming = *t.streaming;

            rec = std::make_shared<Record>();
            rec->session = std::make_unique<Session>(id, t.task, t.attachments, scfg, registry_,
                                                     dispatcher_, bus_, *backend);
            records_[id] = rec;
            ++running_;
        }
        rec->thread = std::thread([this, rec] {
            rec->session->run();
            rec->finished = true;
            std::lock_guard lk(mu_);
            --running_;
        });
        return {true, false, id, {}};
    }

    TaskView task(const std::string& id) const {
        std::shared_ptr<Record> rec;
        {
            std::lock_guard lk(mu_);
            auto it = records_.find(id);
            if (it == records_.end()) return {};
            rec = it->second;
        }
        TaskView v;
        v.exists = true;
        v.session_id = id;
        v.status = rec->session->status();
        v.answer = rec->session->final_answer();
        v.failure = rec->session->failure_reason();
        v.turns = rec->session->turns_taken();
        v.cost = rec->session->cost().to_json();
        return v;
    }

    // Blocks until the session's thread exits; returns its final status.
    std::optional<SessionStatus> wait(const std::string& id) {
        std::shared_ptr<Record> rec;
        {
            std::lock_guard lk(mu_);
            auto it = records_.find(id);
            if (it == records_.end()) return std::nullopt;
            rec = it->second;
        }
        join_record(*rec);
        return rec->session->status();
    }

    void wait_all() {
        std::vector<std::shared_ptr<Record>> recs;
        {
            std::lock_guard lk(mu_);
            for (auto& [_, r] : records_) recs.push_back(r);
        }
        for (auto& r : recs) join_record(*r);
    }

    // Post-run access to the full session object (transcript, pad, ...).
    const Session* session(const std::string& id) const {
        std::lock_guard lk(mu_);
        auto it = records_.find(id);
        return it == records_.end() ? nullptr : it->second->session.get();
    }

    int running_sessions() const {
        std::lock_guard lk(mu_);
        return running_;
    }

  private:
    struct Record {
        std::unique_ptr<Session> session;
        std::thread thread;
        std::atomic<bool> finished{false};
        std::mutex join_mu;
    };

    void join_record(Record& rec) {
        std::lock_guard lk(rec.join_mu);
        if (rec.thread.joinable()) rec.thread.join();
    }

    std::string generate_id() {
        std::uint64_t n = ++counter_;
        std::uint64_t tag = mix64(n ^ std::random_device{}());
        char buf[32];
        std::snprintf(buf, sizeof buf, "task-%06llu-%04llx", static_cast<unsigned long long>(n),
                      static_cast<unsigned long long>(tag & 0xffff));
        return buf;
    }

    EngineConfig cfg_;
    EventBus bus_;
    ToolRegistry registry_;
    Dispatcher dispatcher_;

    mutable std::mutex mu_;
    std::shared_ptr<PlannerBackend> backend_;
    std::map<std::string, std::shared_ptr<Record>> records_;
    int running_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace reactor
