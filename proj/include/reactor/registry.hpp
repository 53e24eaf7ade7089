#pragma once

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "reactor/action.hpp"
#include "reactor/events.hpp"
#include "reactor/value.hpp"

namespace reactor {

enum class Locality { Local, Remote };

inline const char* to_string(Locality l) { return l == Locality::Local ? "local" : "remote"; }

enum class ToolStatus { Available, Quarantined, Removed };

inline const char* to_string(ToolStatus s) {
    switch (s) {
        case ToolStatus::Available: return "available";
        case ToolStatus::Quarantined: return "quarantined";
        case ToolStatus::Removed: return "removed";
    }
    return "available";
}

struct ParamSpec {
    std::string name;
    SemanticType type = SemanticType::String;
    bool required = true;

    bool operator==(const ParamSpec&) const = default;
};

struct TypeSignature {
    std::vector<ParamSpec> params;
    SemanticType output = SemanticType::String;
    // When set, the serialized argument payload a call may carry is capped.
    std::optional<size_t> max_input_chars;

    const ParamSpec* find(std::string_view name) const {
        for (const auto& p : params)
            if (p.name == name) return &p;
        return nullptr;
    }

    bool operator==(const TypeSignature&) const = default;
};

struct ToolDescriptor {
    std::string name;
    std::string description;
    // Transport address: "inproc:<key>" for in-process tools, "http(s)://..."
    // for remote processes speaking the POST {tool, args} protocol.
    std::string endpoint;
    TypeSignature signature;
    int max_parallel = 1;
    std::optional<double> cost_per_1k_tokens;
    Locality locality = Locality::Local;
    ToolStatus status = ToolStatus::Available;
    // Callers beyond max_parallel wait FIFO up to this many deep; further
    // leases are refused as capacity_exhausted.
    int queue_limit = 32;
    // Per-tool override of the dispatcher's default call deadline.
    std::optional<std::chrono::milliseconds> timeout;
};

inline bool is_identifier(std::string_view s) {
    if (s.empty()) return false;
    if (!(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_')) return false;
    for (char c : s)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_')) return false;
    return true;
}

inline nlohmann::json descriptor_to_json(const ToolDescriptor& d) {
    nlohmann::json sig{{"output", to_string(d.signature.output)}};
    sig["params"] = nlohmann::json::array();
    for (const auto& p : d.signature.params)
        sig["params"].push_back(
            {{"name", p.name}, {"type", to_string(p.type)}, {"required", p.required}});
    if (d.signature.max_input_chars) sig["max_input_chars"] = *d.signature.max_input_chars;
    nlohmann::json j{{"name", d.name},         {"description", d.description},
                     {"endpoint", d.endpoint}, {"signature", sig},
                     {"max_parallel", d.max_parallel}, {"locality", to_string(d.locality)},
                     {"status", to_string(d.status)},  {"queue_limit", d.queue_limit}};
    if (d.cost_per_1k_tokens) j["cost_per_1k_tokens"] = *d.cost_per_1k_tokens;
    if (d.timeout) j["timeout_ms"] = d.timeout->count();
    return j;
}

// Parses a descriptor, reporting the first offending field by name.
struct DescriptorParse {
    bool ok = false;
    ToolDescriptor descriptor;
    std::string error;
};

inline std::string describe_invalid_descriptor(const ToolDescriptor& d);

inline DescriptorParse descriptor_from_json(const nlohmann::json& j) {
    DescriptorParse out;
    if (!j.is_object()) {
        out.error = "descriptor must be a JSON object";
        return out;
    }
    ToolDescriptor d;
    try {
        d.name = j.value("name", std::string{});
        d.description = j.value("description", std::string{});
        d.endpoint = j.value("endpoint", std::string{});
        // The signature may be nested under "signature" or written flat.
        const nlohmann::json& sig = j.contains("signature") ? j["signature"] : j;
        {
            if (sig.contains("output")) {
                auto t = semantic_type_from_string(sig["output"].get<std::string>());
                if (!t) {
                    out.error = "signature.output: unknown type";
                    return out;
                }
                d.signature.output = *t;
            }
            if (sig.contains("max_input_chars")) {
                auto v = sig["max_input_chars"].get<std::int64_t>();
                if (v < 1) {
                    out.error = "signature.max_input_chars: must be >= 1";
                    return out;
                }
                d.signature.max_input_chars = static_cast<size_t>(v);
            }
            for (const auto& p : sig.value("params", nlohmann::json::array())) {
                ParamSpec ps;
                ps.name = p.value("name", std::string{});
                auto t = semantic_type_from_string(p.value("type", "string"));
                if (!t) {
                    out.error = "signature.params." + ps.name + ".type: unknown type";
                    return out;
                }
                ps.type = *t;
                ps.required = p.value("required", true);
                d.signature.params.push_back(std::move(ps));
            }
        }
        if (j.contains("max_parallel")) d.max_parallel = j["max_parallel"].get<int>();
        if (j.contains("queue_limit")) d.queue_limit = j["queue_limit"].get<int>();
        if (j.contains("cost_per_1k_tokens"))
            d.cost_per_1k_tokens = j["cost_per_1k_tokens"].get<double>();
        if (j.contains("locality")) {
            auto l = j["locality"].get<std::string>();
            if (l == "local")
                d.locality = Locality::Local;
            else if (l == "remote")
                d.locality = Locality::Remote;
            else {
                out.error = "locality: must be \"local\" or \"remote\"";
                return out;
            }
        }
        if (j.contains("timeout_ms"))
            d.timeout = std::chrono::milliseconds(j["timeout_ms"].get<std::int64_t>());
    } catch (const nlohmann::json::exception& e) {
        out.error = std::string("malformed descriptor: ") + e.what();
        return out;
    }
    if (auto msg = describe_invalid_descriptor(d); !msg.empty()) {
        out.error = msg;
        return out;
    }
    out.ok = true;
    out.descriptor = std::move(d);
    return out;
}

// Field-level sanity check shared by registration paths.
inline std::string describe_invalid_descriptor(const ToolDescriptor& d) {
    if (!is_identifier(d.name)) return "name: must be a non-empty identifier";
    if (d.endpoint.empty()) return "endpoint: must be non-empty";
    if (d.max_parallel < 1) return "max_parallel: must be >= 1";
    if (d.queue_limit < 0) return "queue_limit: must be >= 0";
    if (d.cost_per_1k_tokens && *d.cost_per_1k_tokens < 0)
        return "cost_per_1k_tokens: must be >= 0";
    if (d.timeout && d.timeout->count() <= 0) return "timeout_ms: must be > 0";
    std::map<std::string, int> seen;
    for (const auto& p : d.signature.params) {
        if (!is_identifier(p.name))
            return "signature.params: parameter names must be identifiers";
        if (++seen[p.name] > 1) return "signature.params." + p.name + ": duplicate parameter";
    }
    return {};
}

enum class ValidationErrorKind { UnknownTool, MissingRequiredParam, TypeMismatch, OversizeInput };

inline const char* to_string(ValidationErrorKind k) {
    switch (k) {
        case ValidationErrorKind::UnknownTool: return "unknown_tool";
        case ValidationErrorKind::MissingRequiredParam: return "missing_required_param";
        case ValidationErrorKind::TypeMismatch: return "type_mismatch";
        case ValidationErrorKind::OversizeInput: return "oversize_input";
    }
    return "type_mismatch";
}

struct ValidationResult {
    bool ok = false;
    ValidationErrorKind kind = ValidationErrorKind::UnknownTool;
    std::string message;

    static ValidationResult success() { return {true, ValidationErrorKind::UnknownTool, {}}; }
    static ValidationResult failure(ValidationErrorKind k, std::string msg) {
        return {false, k, std::move(msg)};
    }
};

struct RegistrationResult {
    bool ok = false;
    bool duplicate = false;  // name clash with a live tool (vs. a field error)
    std::string error;
};

// RAII capacity grant. Holds the tool's ledger alive so release lands on the
// right generation even if the tool is replaced meanwhile.
class CapacityLease {
  public:
    CapacityLease() = default;
    CapacityLease(CapacityLease&& o) noexcept { *this = std::move(o); }
    CapacityLease& operator=(CapacityLease&& o) noexcept {
        release();
        entry_ = std::move(o.entry_);
        release_fn_ = std::move(o.release_fn_);
        o.entry_.reset();
        o.release_fn_ = nullptr;
        return *this;
    }
    CapacityLease(const CapacityLease&) = delete;
    CapacityLease& operator=(const CapacityLease&) = delete;
    ~CapacityLease() { release(); }

    explicit operator bool() const { return static_cast<bool>(entry_); }

    void release() {
        if (entry_ && release_fn_) release_fn_(entry_);
        entry_.reset();
        release_fn_ = nullptr;
    }

  private:
    friend class ToolRegistry;
    std::shared_ptr<void> entry_;
    std::function<void(const std::shared_ptr<void>&)> release_fn_;
};

enum class LeaseStatus { Granted, GrantedAfterWait, Unavailable, CapacityExhausted };

struct LeaseOutcome {
    LeaseStatus status = LeaseStatus::Unavailable;
    CapacityLease lease;  // engaged only for the two granted states
    std::string message;

    bool granted() const {
        return status == LeaseStatus::Granted || status == LeaseStatus::GrantedAfterWait;
    }
};

struct CapacityStats {
    int in_flight = 0;
    int queued = 0;
    int high_water = 0;  // maximum concurrent in_flight ever observed
};

// Hot-pluggable typed tool registry: registration/removal at runtime,
// action validation against signatures, per-tool FIFO capacity leases, and
// quarantine bookkeeping. All operations are thread-safe. Registry changes
// are mirrored onto an administrative event stream when a bus is attached.
class ToolRegistry {
  public:
    using Clock = std::function<std::chrono::steady_clock::time_point()>;

    explicit ToolRegistry(EventBus* bus = nullptr, std::string admin_session = "registry",
                          Clock clock = nullptr)
        : bus_(bus),
          admin_session_(std::move(admin_session)),
          clock_(clock ? std::move(clock) : [] { return std::chrono::steady_clock::now(); }) {
        if (bus_ && !bus_->has_session(admin_session_)) bus_->open_session(admin_session_);
    }

    RegistrationResult register_tool(ToolDescriptor d) {
        if (auto msg = describe_invalid_descriptor(d); !msg.empty()) return {false, false, msg};
        d.status = ToolStatus::Available;
        std::unique_lock lk(mu_);
        auto it = tools_.find(d.name);
        if (it != tools_.end() && it->second->desc.status != ToolStatus::Removed)
            return {false, true, "name: a tool named \"" + d.name + "\" already exists"};
        auto entry = std::make_shared<Entry>();
        entry->desc = std::move(d);
        if (it != tools_.end()) {
            // Replacing a tombstone: fresh ledger, keep original ordering slot.
            entry->order = it->second->order;
            it->second = entry;
        } else {
            entry->order = next_order_++;
            tools_.emplace(entry->desc.name, entry);
        }
        lk.unlock();
        cv_.notify_all();
        announce("registered " + entry->desc.name,
                 {{"action", "register"}, {"tool", entry->desc.name}});
        return {true, false, {}};
    }

    // Marks the tool removed. The descriptor remains as a tombstone so
    // validation still recognizes the name; new leases fail as unavailable.
    bool deregister_tool(const std::string& name) {
        std::unique_lock lk(mu_);
        auto it = tools_.find(name);
        if (it == tools_.end() || it->second->desc.status == ToolStatus::Removed) return false;
        it->second->desc.status = ToolStatus::Removed;
        lk.unlock();
        cv_.notify_all();  // wake queued waiters so they observe removal
        announce("removed " + name, {{"action", "remove"}, {"tool", name}});
        return true;
    }

    // Live descriptors in registration order, with quarantine expiry applied.
    // Tombstones are excluded.
    std::vector<ToolDescriptor> snapshot() const {
        std::lock_guard lk(mu_);
        std::vector<std::shared_ptr<Entry>> live;
        for (const auto& [_, e] : tools_) {
            refresh_quarantine_locked(*e);
            if (e->desc.status != ToolStatus::Removed) live.push_back(e);
        }
        std::sort(live.begin(), live.end(),
                  [](const auto& a, const auto& b) { return a->order < b->order; });
        std::vector<ToolDescriptor> out;
        for (const auto& e : live) out.push_back(e->desc);
        return out;
    }

    // Descriptor lookup including tombstones (dispatch needs those).
    std::optional<ToolDescriptor> find(const std::string& name) const {
        std::lock_guard lk(mu_);
        auto it = tools_.find(name);
        if (it == tools_.end()) return std::nullopt;
        refresh_quarantine_locked(*it->second);
        return it->second->desc;
    }

    // Checks an action against the named tool's signature. Exactly four
    // failure modes: unknown tool, missing required parameter, type mismatch
    // (which includes parameters the signature does not declare), and
    // oversize input against max_input_chars.
    ValidationResult validate_action(const Action& a) const {
        std::optional<ToolDescriptor> d = find(a.tool);
        if (!d)
            return ValidationResult::failure(ValidationErrorKind::UnknownTool,
                                             "unknown tool \"" + a.tool + "\"");
        const TypeSignature& sig = d->signature;
        for (const auto& [name, value] : a.args) {
            const ParamSpec* p = sig.find(name);
            if (!p)
                return ValidationResult::failure(
                    ValidationErrorKind::TypeMismatch,
                    a.tool + ": no parameter named \"" + name + "\" in signature");
            if (type_of(value) != p->type)
                return ValidationResult::failure(
                    ValidationErrorKind::TypeMismatch,
                    a.tool + "." + name + ": expected " + to_string(p->type) + ", got " +
                        to_string(type_of(value)));
        }
        for (const auto& p : sig.params) {
            if (p.required && !a.find_arg(p.name))
                return ValidationResult::failure(
                    ValidationErrorKind::MissingRequiredParam,
                    a.tool + ": missing required parameter \"" + p.name + "\"");
        }
        if (sig.max_input_chars) {
            size_t total = args_to_json(a).dump().size();
            if (total > *sig.max_input_chars)
                return ValidationResult::failure(
                    ValidationErrorKind::OversizeInput,
                    a.tool + ": arguments are " + std::to_string(total) +
                        " chars, limit is " + std::to_string(*sig.max_input_chars));
        }
        return ValidationResult::success();
    }

    // Acquires one unit of the tool's max_parallel capacity, waiting FIFO
    // behind earlier callers. Refuses immediately when the tool is removed
    // or quarantined, or when queue_limit callers are already waiting.
    LeaseOutcome lease_capacity(const std::string& name) {
        std::unique_lock lk(mu_);
        auto it = tools_.find(name);
        if (it == tools_.end()) return {LeaseStatus::Unavailable, {}, "unknown tool"};
        std::shared_ptr<Entry> e = it->second;
        refresh_quarantine_locked(*e);
        if (e->desc.status == ToolStatus::Removed)
            return {LeaseStatus::Unavailable, {}, "tool \"" + name + "\" has been removed"};
        if (e->desc.status == ToolStatus::Quarantined)
            return {LeaseStatus::Unavailable, {}, "tool \"" + name + "\" is quarantined"};
        if (e->in_flight < e->desc.max_parallel && e->waiting.empty()) {
            grant_locked(*e);
            return {LeaseStatus::Granted, make_lease(e), {}};
        }
        if (static_cast<int>(e->waiting.size()) >= e->desc.queue_limit)
            return {LeaseStatus::CapacityExhausted, {},
                    "tool \"" + name + "\" queue is full (" +
                        std::to_string(e->desc.queue_limit) + " waiting)"};
        std::uint64_t ticket = e->next_ticket++;
        e->waiting.push_back(ticket);
        cv_.wait(lk, [&] {
            refresh_quarantine_locked(*e);
            if (e->desc.status != ToolStatus::Available) return true;
            return e->waiting.front() == ticket && e->in_flight < e->desc.max_parallel;
        });
        // Either we are first in line with room, or the tool became
        // unusable while we waited.
        auto drop_ticket = [&] {
            for (auto w = e->waiting.begin(); w != e->waiting.end(); ++w)
                if (*w == ticket) {
                    e->waiting.erase(w);
                    break;
                }
        };
        refresh_quarantine_locked(*e);
        if (e->desc.status != ToolStatus::Available) {
            drop_ticket();
            lk.unlock();
            cv_.notify_all();
            return {LeaseStatus::Unavailable, {},
                    e->desc.status == ToolStatus::Removed
                        ? "tool \"" + name + "\" has been removed"
                        : "tool \"" + name + "\" is quarantined"};
        }
        drop_ticket();
        grant_locked(*e);
        lk.unlock();
        cv_.notify_all();  // next waiter may now be eligible
        return {LeaseStatus::GrantedAfterWait, make_lease(e), {}};
    }

    void release_capacity(const std::string& name) {
        std::unique_lock lk(mu_);
        auto it = tools_.find(name);
        if (it == tools_.end()) return;
        release_entry_locked(*it->second);
        lk.unlock();
        cv_.notify_all();
    }

    CapacityStats capacity_stats(const std::string& name) const {
        std::lock_guard lk(mu_);
        auto it = tools_.find(name);
        if (it == tools_.end()) return {};
        return {it->second->in_flight, static_cast<int>(it->second->waiting.size()),
                it->second->high_water};
    }

    // Puts the tool in quarantine until the given steady-clock instant.
    // Expiry is applied lazily on the next lookup/lease after `until`.
    void quarantine_tool(const std::string& name, std::chrono::steady_clock::time_point until,
                         const std::string& reason = {}) {
        std::unique_lock lk(mu_);
        auto it = tools_.find(name);
        if (it == tools_.end() || it->second->desc.status == ToolStatus::Removed) return;
        it->second->desc.status = ToolStatus::Quarantined;
        it->second->quarantined_until = until;
        lk.unlock();
        cv_.notify_all();
        announce("quarantined " + name + (reason.empty() ? "" : ": " + reason),
                 {{"action", "quarantine"}, {"tool", name}});
    }

    EventBus* bus() const { return bus_; }
    const std::string& admin_session() const { return admin_session_; }

  private:
    struct Entry {
        ToolDescriptor desc;
        std::uint64_t order = 0;
        int in_flight = 0;
        int high_water = 0;
        std::uint64_t next_ticket = 0;
        std::deque<std::uint64_t> waiting;
        std::optional<std::chrono::steady_clock::time_point> quarantined_until;
    };

    void grant_locked(Entry& e) {
        ++e.in_flight;
        e.high_water = std::max(e.high_water, e.in_flight);
    }

    void release_entry_locked(Entry& e) {
        if (e.in_flight > 0) --e.in_flight;
    }

    void refresh_quarantine_locked(Entry& e) const {
        if (e.desc.status == ToolStatus::Quarantined && e.quarantined_until &&
            clock_() >= *e.quarantined_until) {
            e.desc.status = ToolStatus::Available;
            e.quarantined_until.reset();
        }
    }

    CapacityLease make_lease(const std::shared_ptr<Entry>& e) {
        CapacityLease lease;
        lease.entry_ = e;
        lease.release_fn_ = [this](const std::shared_ptr<void>& ptr) {
            auto entry = std::static_pointer_cast<Entry>(ptr);
            {
                std::lock_guard lk(mu_);
                release_entry_locked(*entry);
            }
            cv_.notify_all();
        };
        return lease;
    }

    void announce(std::string content, nlohmann::json meta) {
        if (!bus_) return;
        try {
            bus_->emit(admin_session_, EventType::RegistryChanged, std::move(content),
                       std::move(meta));
        } catch (const std::exception&) {
            // The admin stream may have been closed during shutdown.
        }
    }

    EventBus* bus_;
    std::string admin_session_;
    Clock clock_;
    mutable std::mutex mu_;
    mutable std::condition_variable cv_;
    std::map<std::string, std::shared_ptr<Entry>> tools_;
    std::uint64_t next_order_ = 0;
};

// ---- prompt fragment -------------------------------------------------------

// Relative-cost bucket labels. With m costed tools, a tool of cost-rank r
// (ranks tie on equal cost) lands in bucket round(2r/(m-1)).
inline std::vector<std::string> cost_bucket_labels(const std::vector<ToolDescriptor>& tools) {
    std::vector<std::string> labels(tools.size());
    std::vector<double> costs;
    for (const auto& d : tools)
        if (d.cost_per_1k_tokens) costs.push_back(*d.cost_per_1k_tokens);
    if (costs.size() < 2) return labels;  // hints only when comparison is meaningful
    const double m = static_cast<double>(costs.size());
    static const char* names[] = {"low", "medium", "high"};
    for (size_t i = 0; i < tools.size(); ++i) {
        if (!tools[i].cost_per_1k_tokens) continue;
        double mine = *tools[i].cost_per_1k_tokens;
        int rank = 0;
        for (double c : costs)
            if (c < mine) ++rank;
        int bucket = static_cast<int>(std::lround(2.0 * rank / (m - 1.0)));
        bucket = std::min(2, std::max(0, bucket));
        labels[i] = names[bucket];
    }
    return labels;
}

// Tool list block inserted into planner prompts: one line per tool with its
// callable signature, description, and a relative cost hint when at least
// two tools carry cost metadata.
inline std::string render_tool_prompt(const std::vector<ToolDescriptor>& tools) {
    if (tools.empty()) return "No tools are currently available.";
    auto labels = cost_bucket_labels(tools);
    std::string out = "You have the following tools:";
    for (size_t i = 0; i < tools.size(); ++i) {
        const auto& d = tools[i];
        out += "\n- " + d.name + "(";
        for (size_t p = 0; p < d.signature.params.size(); ++p) {
            if (p) out += ", ";
            const auto& ps = d.signature.params[p];
            out += ps.name;
            out += ": ";
            out += to_string(ps.type);
            if (!ps.required) out += "?";
        }
        out += ") -> ";
        out += to_string(d.signature.output);
        if (!d.description.empty()) {
            out += ": ";
            out += d.description;
        }
        if (!labels[i].empty()) out += " [cost: " + labels[i] + "]";
    }
    return out;
}

}  // namespace reactor
