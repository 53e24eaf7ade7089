#pragma once

#include <charconv>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace reactor {

// The closed set of argument/result types tools may declare.
enum class SemanticType { String, Integer, Number, Boolean, StringList };

inline const char* to_string(SemanticType t) {
    switch (t) {
        case SemanticType::String: return "string";
        case SemanticType::Integer: return "integer";
        case SemanticType::Number: return "number";
        case SemanticType::Boolean: return "boolean";
        case SemanticType::StringList: return "list[string]";
    }
    return "string";
}

inline std::optional<SemanticType> semantic_type_from_string(std::string_view s) {
    if (s == "string") return SemanticType::String;
    if (s == "integer") return SemanticType::Integer;
    if (s == "number") return SemanticType::Number;
    if (s == "boolean") return SemanticType::Boolean;
    if (s == "list[string]" || s == "list_of_string" || s == "string_list")
        return SemanticType::StringList;
    return std::nullopt;
}

// Runtime argument value. Integers and numbers are distinct alternatives:
// a literal with '.' or an exponent is a Number, otherwise an Integer.
using Value = std::variant<std::string, std::int64_t, double, bool, std::vector<std::string>>;

inline SemanticType type_of(const Value& v) {
    switch (v.index()) {
        case 0: return SemanticType::String;
        case 1: return SemanticType::Integer;
        case 2: return SemanticType::Number;
        case 3: return SemanticType::Boolean;
        default: return SemanticType::StringList;
    }
}

inline std::string escape_string_literal(std::string_view s) {
    std::string out;
    out.reserve(s.size() + 2);
    out.push_back('"');
    for (char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            case '\r': out += "\\r"; break;
            default: out.push_back(c);
        }
    }
    out.push_back('"');
    return out;
}

// Shortest round-trip-exact decimal form. Doubles always carry a '.' or an
// exponent so the integer/number distinction survives render -> parse.
inline std::string render_double(double d) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, d);
    std::string out(buf, res.ptr);
    if (out.find('.') == std::string::npos && out.find('e') == std::string::npos &&
        out.find('E') == std::string::npos && out.find("inf") == std::string::npos &&
        out.find("nan") == std::string::npos) {
        out += ".0";
    }
    return out;
}

// Grammar-form rendering, i.e. what appears inside Tool(arg=...) calls.
inline std::string render_value(const Value& v) {
    switch (v.index()) {
        case 0: return escape_string_literal(std::get<std::string>(v));
        case 1: return std::to_string(std::get<std::int64_t>(v));
        case 2: return render_double(std::get<double>(v));
        case 3: return std::get<bool>(v) ? "true" : "false";
        default: {
            const auto& items = std::get<std::vector<std::string>>(v);
            std::string out = "[";
            for (size_t i = 0; i < items.size(); ++i) {
                if (i) out += ", ";
                out += escape_string_literal(items[i]);
            }
            out += "]";
            return out;
        }
    }
}

inline nlohmann::json value_to_json(const Value& v) {
    switch (v.index()) {
        case 0: return std::get<std::string>(v);
        case 1: return std::get<std::int64_t>(v);
        case 2: return std::get<double>(v);
        case 3: return std::get<bool>(v);
        default: return std::get<std::vector<std::string>>(v);
    }
}

// Inverse of value_to_json for the five supported shapes; nullopt for
// anything outside the closed type set (objects, mixed lists, null).
inline std::optional<Value> value_from_json(const nlohmann::json& j) {
    if (j.is_string()) return Value(j.get<std::string>());
    if (j.is_boolean()) return Value(j.get<bool>());
    if (j.is_number_integer() || j.is_number_unsigned())
        return Value(static_cast<std::int64_t>(j.get<std::int64_t>()));
    if (j.is_number_float()) return Value(j.get<double>());
    if (j.is_array()) {
        std::vector<std::string> items;
        for (const auto& e : j) {
            if (!e.is_string()) return std::nullopt;
            items.push_back(e.get<std::string>());
        }
        return Value(std::move(items));
    }
    return std::nullopt;
}

}  // namespace reactor
