#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "reactor/value.hpp"

namespace reactor {

// Whether a call blocks its turn or runs in the background ('&' suffix).
enum class CallMode { Blocking, Background };

// One tool call as produced by the planner. Argument order is preserved so
// rendering is stable; lookups go by name.
struct Action {
    std::string tool;
    std::vector<std::pair<std::string, Value>> args;
    CallMode mode = CallMode::Blocking;
    std::uint64_t group = 0;  // all calls on one Action line share a group id

    const Value* find_arg(std::string_view name) const {
        for (const auto& [k, v] : args)
            if (k == name) return &v;
        return nullptr;
    }

    bool operator==(const Action& o) const {
        return tool == o.tool && args == o.args && mode == o.mode && group == o.group;
    }
};

// Renders a single call: Tool(a=1, b="x"). No background suffix here; that
// belongs to the line renderer since it sits between call and separator.
inline std::string render_call(const Action& a) {
    std::string out = a.tool;
    out.push_back('(');
    for (size_t i = 0; i < a.args.size(); ++i) {
        if (i) out += ", ";
        out += a.args[i].first;
        out += "=";
        out += render_value(a.args[i].second);
    }
    out.push_back(')');
    return out;
}

// Renders a full action line: `Action: A(x=1) & && B(y="z")`. A '&' directly
// after a call marks it background; '&&' joins concurrent calls.
inline std::string render_action_line(const std::vector<Action>& group) {
    std::string out = "Action: ";
    for (size_t i = 0; i < group.size(); ++i) {
        if (i) out += " && ";
        out += render_call(group[i]);
        if (group[i].mode == CallMode::Background) out += " &";
    }
    return out;
}

// Arguments as a JSON object, the wire shape tools receive.
inline nlohmann::json args_to_json(const Action& a) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : a.args) j[k] = value_to_json(v);
    return j;
}

}  // namespace reactor
