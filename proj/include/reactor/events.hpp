#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <deque>
#include <limits>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace reactor {

enum class EventType {
    Thought,
    Action,
    Result,
    Error,
    FinalAnswer,
    RegistryChanged,
    Quarantine,
    DroppedResult,
};

inline const char* to_string(EventType t) {
    switch (t) {
        case EventType::Thought: return "thought";
        case EventType::Action: return "action";
        case EventType::Result: return "result";
        case EventType::Error: return "error";
        case EventType::FinalAnswer: return "final_answer";
        case EventType::RegistryChanged: return "registry_changed";
        case EventType::Quarantine: return "quarantine";
        case EventType::DroppedResult: return "dropped_result";
    }
    return "error";
}

inline std::optional<EventType> event_type_from_string(std::string_view s) {
    if (s == "thought") return EventType::Thought;
    if (s == "action") return EventType::Action;
    if (s == "result") return EventType::Result;
    if (s == "error") return EventType::Error;
    if (s == "final_answer") return EventType::FinalAnswer;
    if (s == "registry_changed") return EventType::RegistryChanged;
    if (s == "quarantine") return EventType::Quarantine;
    if (s == "dropped_result") return EventType::DroppedResult;
    return std::nullopt;
}

inline std::string rfc3339_now() {
    using namespace std::chrono;
    auto now = system_clock::now();
    auto ms = duration_cast<milliseconds>(now.time_since_epoch()) % 1000;
    std::time_t t = system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900,
                  tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec,
                  static_cast<int>(ms.count()));
    return buf;
}

struct Event {
    std::string session_id;
    std::uint64_t seq = 0;
    EventType type = EventType::Thought;
    std::string content;
    std::string timestamp;       // RFC3339, assigned at emit time
    nlohmann::json meta;         // structured extras: turn, group, tool, ...

    nlohmann::json to_json() const {
        nlohmann::json j{{"session_id", session_id},
                         {"seq", seq},
                         {"event_type", to_string(type)},
                         {"content", content},
                         {"timestamp", timestamp}};
        if (!meta.is_null() && !(meta.is_object() && meta.empty())) j["meta"] = meta;
        return j;
    }

    static std::optional<Event> from_json(const nlohmann::json& j) {
        if (!j.is_object()) return std::nullopt;
        Event e;
        try {
            e.session_id = j.at("session_id").get<std::string>();
            e.seq = j.at("seq").get<std::uint64_t>();
            auto t = event_type_from_string(j.at("event_type").get<std::string>());
            if (!t) return std::nullopt;
            e.type = *t;
            e.content = j.at("content").get<std::string>();
            e.timestamp = j.value("timestamp", std::string{});
            if (j.contains("meta")) e.meta = j["meta"];
        } catch (const nlohmann::json::exception&) {
            return std::nullopt;
        }
        return e;
    }

    bool operator==(const Event& o) const {
        auto norm = [](const nlohmann::json& m) {
            return (m.is_null() || (m.is_object() && m.empty())) ? nlohmann::json() : m;
        };
        return session_id == o.session_id && seq == o.seq && type == o.type &&
               content == o.content && timestamp == o.timestamp && norm(meta) == norm(o.meta);
    }
};

struct EventBusConfig {
    // When set, every session is mirrored to <trace_dir>/<session_id>.ndjson.
    std::optional<std::filesystem::path> trace_dir;
    // Per-subscriber buffered-event cap; a subscriber this far behind is
    // disconnected rather than stalling the publisher.
    size_t subscriber_buffer = 1024;
};

// A subscriber's view of one session's stream. Thread-safe; typically one
// consumer thread calls next() in a loop.
class Subscription {
  public:
    // Next event, waiting up to `wait`. nullopt on timeout, end, or drop.
    std::optional<Event> next(std::chrono::milliseconds wait = std::chrono::milliseconds(0)) {
        std::unique_lock lk(mu_);
        if (!queue_.empty()) return pop_locked();
        if (closed_ || dropped_) return std::nullopt;
        if (wait.count() > 0)
            cv_.wait_for(lk, wait, [&] { return !queue_.empty() || closed_ || dropped_; });
        if (!queue_.empty()) return pop_locked();
        return std::nullopt;
    }

    // Stream finished and everything buffered has been consumed.
    bool ended() const {
        std::lock_guard lk(mu_);
        return closed_ && queue_.empty();
    }

    // Disconnected for falling more than the buffer limit behind.
    bool dropped() const {
        std::lock_guard lk(mu_);
        return dropped_;
    }

  private:
    friend class EventBus;

    Event pop_locked() {
        Event e = std::move(queue_.front());
        queue_.pop_front();
        return e;
    }

    void push(const Event& e, size_t cap) {
        std::lock_guard lk(mu_);
        if (dropped_ || closed_) return;
        if (queue_.size() >= cap) {
            dropped_ = true;
            queue_.clear();
            cv_.notify_all();
            return;
        }
        queue_.push_back(e);
        cv_.notify_all();
    }

    void close() {
        std::lock_guard lk(mu_);
        closed_ = true;
        cv_.notify_all();
    }

    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::deque<Event> queue_;
    bool closed_ = false;
    bool dropped_ = false;
};

// Per-session event streams with monotonically increasing, gap-free sequence
// numbers, an in-memory trace for replay, optional NDJSON persistence, and
// fan-out to live subscribers. subscribe() is atomic with respect to emit():
// replayed history plus the live tail has no gap and no duplicate.
class EventBus {
  public:
    explicit EventBus(EventBusConfig cfg = {}) : cfg_(std::move(cfg)) {
        if (cfg_.trace_dir) std::filesystem::create_directories(*cfg_.trace_dir);
    }

    ~EventBus() {
        std::lock_guard lk(mu_);
        for (auto& [id, s] : sessions_) finish_locked(*s);
    }

    void open_session(const std::string& session_id) {
        if (session_id.empty() || session_id.find('/') != std::string::npos ||
            session_id.find("..") != std::string::npos)
            throw std::invalid_argument("invalid session id: " + session_id);
        std::lock_guard lk(mu_);
        auto [it, inserted] = sessions_.try_emplace(session_id);
        if (!inserted) throw std::runtime_error("session already open: " + session_id);
        it->second = std::make_unique<SessionStream>();
        if (cfg_.trace_dir) {
            it->second->sink.open(*cfg_.trace_dir / (session_id + ".ndjson"),
                                  std::ios::out | std::ios::trunc);
        }
    }

    bool has_session(const std::string& session_id) const {
        std::lock_guard lk(mu_);
        return sessions_.count(session_id) > 0;
    }

    // Appends an event to the session's stream and fans it out. Sequence
    // numbers are assigned here: 0,1,2,... per session with no gaps.
    Event emit(const std::string& session_id, EventType type, std::string content,
               nlohmann::json meta = {}) {
        std::lock_guard lk(mu_);
        auto it = sessions_.find(session_id);
        if (it == sessions_.end())
            throw std::runtime_error("emit on unknown session: " + session_id);
        SessionStream& s = *it->second;
        if (s.finished) throw std::runtime_error("emit on finished session: " + session_id);
        Event e;
        e.session_id = session_id;
        e.seq = s.trace.size();
        e.type = type;
        e.content = std::move(content);
        e.timestamp = rfc3339_now();
        e.meta = std::move(meta);
        s.trace.push_back(e);
        if (s.sink.is_open()) {
            // Tool output is untrusted; malformed UTF-8 must not kill the trace.
            s.sink << e.to_json().dump(-1, ' ', false,
                                       nlohmann::json::error_handler_t::replace)
                   << '\n';
            s.sink.flush();
        }
        for (auto sub = s.subscribers.begin(); sub != s.subscribers.end();) {
            (*sub)->push(e, cfg_.subscriber_buffer);
            if ((*sub)->dropped())
                sub = s.subscribers.erase(sub);
            else
                ++sub;
        }
        return e;
    }

    // Marks the stream complete; subscribers drain and then end.
    void close_session(const std::string& session_id) {
        std::lock_guard lk(mu_);
        auto it = sessions_.find(session_id);
        if (it == sessions_.end()) return;
        finish_locked(*it->second);
    }

    // Replay + live subscription from `from_seq` (inclusive). Returns nullptr
    // for sessions this bus has never seen (not even on disk).
    std::shared_ptr<Subscription> subscribe(const std::string& session_id,
                                            std::uint64_t from_seq = 0) {
        std::unique_lock lk(mu_);
        auto it = sessions_.find(session_id);
        if (it != sessions_.end()) {
            auto sub = std::make_shared<Subscription>();
            SessionStream& s = *it->second;
            for (size_t i = from_seq; i < s.trace.size(); ++i)
                sub->push(s.trace[i], std::numeric_limits<size_t>::max());
            if (s.finished)
                sub->close();
            else
                s.subscribers.push_back(sub);
            return sub;
        }
        lk.unlock();
        auto persisted = load_trace(session_id);
        if (!persisted) return nullptr;
        auto sub = std::make_shared<Subscription>();
        for (size_t i = from_seq; i < persisted->size(); ++i)
            sub->push((*persisted)[i], std::numeric_limits<size_t>::max());
        sub->close();
        return sub;
    }

    // Stored history from `from_seq`; falls back to the trace file for
    // sessions from earlier runs. nullopt if the session is unknown.
    std::optional<std::vector<Event>> replay(const std::string& session_id,
                                             std::uint64_t from_seq = 0) const {
        {
            std::lock_guard lk(mu_);
            auto it = sessions_.find(session_id);
            if (it != sessions_.end()) {
                const auto& trace = it->second->trace;
                std::vector<Event> out;
                for (size_t i = from_seq; i < trace.size(); ++i) out.push_back(trace[i]);
                return out;
            }
        }
        auto persisted = load_trace(session_id);
        if (!persisted) return std::nullopt;
        if (from_seq > 0 && from_seq <= persisted->size())
            persisted->erase(persisted->begin(), persisted->begin() + from_seq);
        else if (from_seq > persisted->size())
            persisted->clear();
        return persisted;
    }

    bool session_finished(const std::string& session_id) const {
        std::lock_guard lk(mu_);
        auto it = sessions_.find(session_id);
        return it == sessions_.end() || it->second->finished;
    }

    std::vector<std::string> session_ids() const {
        std::lock_guard lk(mu_);
        std::vector<std::string> out;
        for (const auto& [id, _] : sessions_) out.push_back(id);
        return out;
    }

    const EventBusConfig& config() const { return cfg_; }

  private:
    struct SessionStream {
        std::vector<Event> trace;
        std::vector<std::shared_ptr<Subscription>> subscribers;
        std::ofstream sink;
        bool finished = false;
    };

    void finish_locked(SessionStream& s) {
        if (s.finished) return;
        s.finished = true;
        for (auto& sub : s.subscribers) sub->close();
        s.subscribers.clear();
        if (s.sink.is_open()) s.sink.close();
    }

    std::optional<std::vector<Event>> load_trace(const std::string& session_id) const {
        if (!cfg_.trace_dir) return std::nullopt;
        auto path = *cfg_.trace_dir / (session_id + ".ndjson");
        std::ifstream in(path);
        if (!in.is_open()) return std::nullopt;
        std::vector<Event> out;
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded()) continue;
            if (auto e = Event::from_json(j)) out.push_back(std::move(*e));
        }
        return out;
    }

    EventBusConfig cfg_;
    mutable std::mutex mu_;
    std::map<std::string, std::unique_ptr<SessionStream>> sessions_;
};

}  // namespace reactor
