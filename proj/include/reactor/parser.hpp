#pragma once

#include <charconv>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "reactor/action.hpp"
#include "reactor/text.hpp"
#include "reactor/value.hpp"

namespace reactor {

// Structured planner output: at most one of {actions, final_answer} is
// meaningful. On a grammar violation parse_error is set; `actions` then holds
// the calls that were already unambiguous before the violation (streaming
// dispatch may have started them).
struct PlannerOutput {
    std::optional<std::string> thought;
    std::vector<Action> actions;
    std::optional<std::string> final_answer;
    std::optional<std::string> parse_error;

    bool malformed() const { return parse_error.has_value(); }
};

namespace detail {

enum class Lex { Ok, NeedMore, Bad };

struct Cursor {
    std::string_view body;
    size_t pos = 0;
    bool eos = false;
    std::string error;

    bool at_end() const { return pos >= body.size(); }
    char peek(size_t off = 0) const { return body[pos + off]; }
    size_t remaining() const { return body.size() - pos; }
    void skip_spaces() {
        while (!at_end() && (body[pos] == ' ' || body[pos] == '\t')) ++pos;
    }
    Lex fail(std::string msg) {
        error = std::move(msg);
        return Lex::Bad;
    }
};

inline bool ident_start(char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_';
}
inline bool ident_char(char c) { return ident_start(c) || (c >= '0' && c <= '9'); }
inline bool number_char(char c) {
    return (c >= '0' && c <= '9') || c == '+' || c == '-' || c == '.' || c == 'e' || c == 'E';
}

// A token that touches the end of the buffer may still grow; only at eos is
// it known complete.
inline Lex lex_ident(Cursor& c, std::string& out) {
    if (c.at_end()) return c.eos ? c.fail("expected identifier") : Lex::NeedMore;
    if (!ident_start(c.peek())) return c.fail("expected identifier");
    size_t start = c.pos;
    while (!c.at_end() && ident_char(c.peek())) ++c.pos;
    if (c.at_end() && !c.eos) {
        c.pos = start;
        return Lex::NeedMore;
    }
    out = std::string(c.body.substr(start, c.pos - start));
    return Lex::Ok;
}

inline Lex lex_string(Cursor& c, std::string& out) {
    size_t start = c.pos;
    ++c.pos;  // opening quote, caller checked
    std::string val;
    while (true) {
        if (c.at_end()) {
            c.pos = start;
            return c.eos ? c.fail("unterminated string literal") : Lex::NeedMore;
        }
        char ch = c.peek();
        if (ch == '"') {
            ++c.pos;
            out = std::move(val);
            return Lex::Ok;
        }
        if (ch == '\n') {
            c.pos = start;
            return c.fail("newline inside string literal");
        }
        if (ch == '\\') {
            if (c.remaining() < 2) {
                c.pos = start;
                return c.eos ? c.fail("unterminated escape sequence") : Lex::NeedMore;
            }
            char esc = c.peek(1);
            switch (esc) {
                case '"': val.push_back('"'); break;
                case '\\': val.push_back('\\'); break;
                case 'n': val.push_back('\n'); break;
                case 't': val.push_back('\t'); break;
                case 'r': val.push_back('\r'); break;
                default:
                    c.pos = start;
                    return c.fail(std::string("unknown escape sequence \\") + esc);
            }
            c.pos += 2;
            continue;
        }
        val.push_back(ch);
        ++c.pos;
    }
}

inline Lex lex_number(Cursor& c, Value& out) {
    size_t start = c.pos;
    while (!c.at_end() && number_char(c.peek())) ++c.pos;
    if (c.at_end() && !c.eos) {
        c.pos = start;
        return Lex::NeedMore;
    }
    std::string_view tok = c.body.substr(start, c.pos - start);
    bool is_float = tok.find('.') != std::string_view::npos ||
                    tok.find('e') != std::string_view::npos ||
                    tok.find('E') != std::string_view::npos;
    if (is_float) {
        double d = 0;
        auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), d);
        if (ec != std::errc() || p != tok.data() + tok.size()) {
            c.pos = start;
            return c.fail("invalid number literal \"" + std::string(tok) + "\"");
        }
        out = d;
    } else {
        std::int64_t i = 0;
        std::string_view digits = tok;
        if (!digits.empty() && digits.front() == '+') digits.remove_prefix(1);
        auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), i);
        if (ec != std::errc() || p != digits.data() + digits.size()) {
            c.pos = start;
            return c.fail("invalid integer literal \"" + std::string(tok) + "\"");
        }
        out = i;
    }
    return Lex::Ok;
}

inline Lex lex_value(Cursor& c, Value& out) {
    if (c.at_end()) return c.eos ? c.fail("expected a value") : Lex::NeedMore;
    char ch = c.peek();
    if (ch == '"') {
        std::string s;
        Lex r = lex_string(c, s);
        if (r == Lex::Ok) out = std::move(s);
        return r;
    }
    if (ch == '[') {
        size_t start = c.pos;
        ++c.pos;
        std::vector<std::string> items;
        c.skip_spaces();
        if (c.at_end()) {
            c.pos = start;
            return c.eos ? c.fail("unterminated list literal") : Lex::NeedMore;
        }
        if (c.peek() == ']') {
            ++c.pos;
            out = std::move(items);
            return Lex::Ok;
        }
        while (true) {
            c.skip_spaces();
            if (c.at_end()) {
                c.pos = start;
                return c.eos ? c.fail("unterminated list literal") : Lex::NeedMore;
            }
            if (c.peek() != '"') {
                c.pos = start;
                return c.fail("lists may contain only string literals");
            }
            std::string s;
            Lex r = lex_string(c, s);
            if (r != Lex::Ok) {
                c.pos = start;
                return r;
            }
            items.push_back(std::move(s));
            c.skip_spaces();
            if (c.at_end()) {
                c.pos = start;
                return c.eos ? c.fail("unterminated list literal") : Lex::NeedMore;
            }
            if (c.peek() == ',') {
                ++c.pos;
                continue;
            }
            if (c.peek() == ']') {
                ++c.pos;
                out = std::move(items);
                return Lex::Ok;
            }
            c.pos = start;
            return c.fail("expected ',' or ']' in list literal");
        }
    }
    if (number_char(ch) && ch != 'e' && ch != 'E') {
        return lex_number(c, out);
    }
    if (ident_start(ch)) {
        std::string word;
        Lex r = lex_ident(c, word);
        if (r != Lex::Ok) return r;
        if (word == "true") {
            out = true;
            return Lex::Ok;
        }
        if (word == "false") {
            out = false;
            return Lex::Ok;
        }
        return c.fail("unknown bareword \"" + word + "\" (values must be quoted)");
    }
    return c.fail(std::string("unexpected character '") + ch + "' where a value was expected");
}

// Parses `Name(arg=value, ...)`; cursor must sit at the call's first char.
inline Lex lex_call(Cursor& c, Action& out) {
    size_t start = c.pos;
    Action a;
    Lex r = lex_ident(c, a.tool);
    if (r != Lex::Ok) {
        if (r == Lex::NeedMore) c.pos = start;
        return r;
    }
    c.skip_spaces();
    if (c.at_end()) {
        c.pos = start;
        return c.eos ? c.fail("expected '(' after tool name") : Lex::NeedMore;
    }
    if (c.peek() != '(') return c.fail("expected '(' after tool name \"" + a.tool + "\"");
    ++c.pos;
    c.skip_spaces();
    if (c.at_end()) {
        c.pos = start;
        return c.eos ? c.fail("unterminated call") : Lex::NeedMore;
    }
    if (c.peek() == ')') {
        ++c.pos;
        out = std::move(a);
        return Lex::Ok;
    }
    while (true) {
        c.skip_spaces();
        std::string name;
        r = lex_ident(c, name);
        if (r != Lex::Ok) {
            if (r == Lex::NeedMore) c.pos = start;
            if (r == Lex::Bad && c.error == "expected identifier")
                c.error = "expected parameter name in call to " + a.tool;
            return r;
        }
        c.skip_spaces();
        if (c.at_end()) {
            c.pos = start;
            return c.eos ? c.fail("unterminated call") : Lex::NeedMore;
        }
        if (c.peek() != '=') return c.fail("expected '=' after parameter \"" + name + "\"");
        ++c.pos;
        c.skip_spaces();
        Value v;
        r = lex_value(c, v);
        if (r != Lex::Ok) {
            if (r == Lex::NeedMore) c.pos = start;
            return r;
        }
        a.args.emplace_back(std::move(name), std::move(v));
        c.skip_spaces();
        if (c.at_end()) {
            c.pos = start;
            return c.eos ? c.fail("unterminated call") : Lex::NeedMore;
        }
        if (c.peek() == ',') {
            ++c.pos;
            continue;
        }
        if (c.peek() == ')') {
            ++c.pos;
            out = std::move(a);
            return Lex::Ok;
        }
        return c.fail("expected ',' or ')' in call to " + a.tool);
    }
}

}  // namespace detail

// Result of scanning the text following "Action:" on the action line.
struct ActionScan {
    enum class Status {
        NeedMore,   // buffer may still grow; `calls` are decided so far
        Done,       // line finished cleanly at EOL/end of input
        Malformed,  // grammar violation; `calls` are the decided prefix
    };
    Status status = Status::NeedMore;
    std::vector<Action> calls;
    std::string error;
    size_t line_end = 0;  // offset just past the action line when Done
};

// Scans tool calls. A call is decided only once its closing parenthesis and
// the following separator decision point have been consumed: lookahead
// distinguishes a background marker '&', the group separator '&&', and end
// of line. Deterministic in (body, eos): growing the buffer only appends to
// the decided-call list, which is what makes speculative streaming emission
// safe to reconcile with a final batch parse.
inline ActionScan scan_action_calls(std::string_view body, bool eos, std::uint64_t group) {
    ActionScan out;
    detail::Cursor c{body, 0, eos, {}};
    bool first = true;
    while (true) {
        c.skip_spaces();
        if (c.at_end() || c.peek() == '\n') {
            bool definite = !c.at_end() || eos;
            if (!definite) {
                out.status = ActionScan::Status::NeedMore;
                return out;
            }
            out.status = ActionScan::Status::Malformed;
            out.error = first ? "action line contains no calls"
                              : "trailing separator without a call";
            return out;
        }
        Action call;
        detail::Lex r = detail::lex_call(c, call);
        if (r == detail::Lex::NeedMore) {
            out.status = ActionScan::Status::NeedMore;
            return out;
        }
        if (r == detail::Lex::Bad) {
            out.status = ActionScan::Status::Malformed;
            out.error = c.error;
            return out;
        }
        call.group = group;
        first = false;

        // Separator decision point.
        size_t after_call = c.pos;
        c.skip_spaces();
        bool background = false;
        if (!c.at_end() && c.peek() == '&') {
            if (c.remaining() < 2 && !eos) {
                // Could be '&' (background) or the start of '&&'.
                out.status = ActionScan::Status::NeedMore;
                (void)after_call;
                return out;
            }
            if (c.remaining() >= 2 && c.peek(1) == '&') {
                // "&&": separator; this call is blocking and decided.
                c.pos += 2;
                out.calls.push_back(std::move(call));
                continue;
            }
            // Lone '&': background marker.
            background = true;
            ++c.pos;
        }
        call.mode = background ? CallMode::Background : CallMode::Blocking;
        c.skip_spaces();
        if (c.at_end()) {
            if (!eos && !background) {
                // Suffix still unknown: next chunk could begin with '&'.
                out.status = ActionScan::Status::NeedMore;
                return out;
            }
            out.calls.push_back(std::move(call));
            if (!eos) {
                // Background marker consumed; separator type pending.
                out.status = ActionScan::Status::NeedMore;
                return out;
            }
            out.status = ActionScan::Status::Done;
            out.line_end = c.pos;
            return out;
        }
        if (c.peek() == '\n') {
            out.calls.push_back(std::move(call));
            out.status = ActionScan::Status::Done;
            out.line_end = c.pos + 1;
            return out;
        }
        if (c.peek() == '&') {
            if (c.remaining() < 2 && !eos) {
                out.calls.push_back(std::move(call));  // its own suffix is settled
                out.status = ActionScan::Status::NeedMore;
                return out;
            }
            if (c.remaining() >= 2 && c.peek(1) == '&') {
                c.pos += 2;
                out.calls.push_back(std::move(call));
                continue;
            }
            out.calls.push_back(std::move(call));
            out.status = ActionScan::Status::Malformed;
            out.error = "stray '&' after background marker";
            return out;
        }
        out.calls.push_back(std::move(call));
        out.status = ActionScan::Status::Malformed;
        out.error = std::string("unexpected character '") + c.peek() + "' after call";
        return out;
    }
}

namespace detail {

struct LineClass {
    enum Kind { Blank, Thought, ActionLine, Final, Junk, Incomplete } kind = Junk;
    size_t content_begin = 0;  // offset of text after the directive prefix
    size_t next_line = 0;      // offset of the following line (past '\n')
    bool terminated = false;   // line ended with '\n' inside the buffer
};

// Classifies the line starting at `pos`. `eos` tells whether an unterminated
// line is final or may still grow into a directive.
inline LineClass classify_line(std::string_view text, size_t pos, bool eos) {
    LineClass lc;
    size_t eol = text.find('\n', pos);
    lc.terminated = eol != std::string_view::npos;
    size_t line_end = lc.terminated ? eol : text.size();
    lc.next_line = lc.terminated ? eol + 1 : text.size();
    size_t p = pos;
    while (p < line_end && (text[p] == ' ' || text[p] == '\t' || text[p] == '\r')) ++p;
    std::string_view rest = text.substr(p, line_end - p);
    auto match = [&](std::string_view prefix, LineClass::Kind kind) {
        if (starts_with(rest, prefix)) {
            lc.kind = kind;
            lc.content_begin = p + prefix.size();
            return true;
        }
        return false;
    };
    if (rest.empty() || rest.find_first_not_of(" \t\r") == std::string_view::npos) {
        lc.kind = LineClass::Blank;
        return lc;
    }
    if (match("Thought:", LineClass::Thought)) return lc;
    if (match("Action:", LineClass::ActionLine)) return lc;
    if (match("Final Answer:", LineClass::Final)) return lc;
    if (!lc.terminated && !eos) {
        // Could this still become a directive once more bytes arrive?
        for (std::string_view d : {std::string_view("Thought:"), std::string_view("Action:"),
                                   std::string_view("Final Answer:")}) {
            if (rest.size() < d.size() && d.substr(0, rest.size()) == rest) {
                lc.kind = LineClass::Incomplete;
                return lc;
            }
        }
    }
    lc.kind = LineClass::Junk;
    return lc;
}

}  // namespace detail

// Batch parse of a complete planner response. Grammar: optional blank lines,
// an optional single `Thought:` line, then exactly one directive line —
// either `Action: <call> [&& <call>]...` (with optional '&' background
// suffixes) or `Final Answer: <text>`. Anything after the directive line is
// ignored. Every call on the action line receives `group` as its group id.
inline PlannerOutput parse_planner_output(std::string_view raw, std::uint64_t group) {
    PlannerOutput out;
    size_t pos = 0;
    bool saw_thought = false;
    while (true) {
        if (pos >= raw.size()) {
            out.parse_error = saw_thought ? "thought line without an action or final answer"
                                          : "planner output is empty";
            return out;
        }
        auto lc = detail::classify_line(raw, pos, /*eos=*/true);
        switch (lc.kind) {
            case detail::LineClass::Blank:
                pos = lc.next_line;
                continue;
            case detail::LineClass::Thought: {
                if (saw_thought) {
                    out.parse_error = "multiple thought lines";
                    return out;
                }
                saw_thought = true;
                size_t line_end = lc.terminated ? lc.next_line - 1 : raw.size();
                out.thought = trim(raw.substr(lc.content_begin, line_end - lc.content_begin));
                pos = lc.next_line;
                continue;
            }
            case detail::LineClass::Final: {
                size_t line_end = raw.find('\n', lc.content_begin);
                if (line_end == std::string_view::npos) line_end = raw.size();
                out.final_answer =
                    trim(raw.substr(lc.content_begin, line_end - lc.content_begin));
                return out;
            }
            case detail::LineClass::ActionLine: {
                auto scan = scan_action_calls(raw.substr(lc.content_begin), /*eos=*/true, group);
                out.actions = std::move(scan.calls);
                if (scan.status == ActionScan::Status::Malformed) out.parse_error = scan.error;
                return out;
            }
            default:
                out.parse_error = "expected a Thought, Action, or Final Answer line";
                return out;
        }
    }
}

// Incremental parser over a token stream. Decided calls are emitted through
// the callback as soon as their separator decision point passes — before the
// response is complete — enabling speculative dispatch. finish() reconciles
// with an authoritative batch parse of everything received (for well-formed
// output the emitted calls equal the batch result, in order). abort() is for
// streams the backend cut short: already-emitted calls stand, and the
// output reports the interruption instead of guessing at the tail.
class StreamParser {
  public:
    using ActionCallback = std::function<void(const Action&)>;

    explicit StreamParser(std::uint64_t group, ActionCallback on_action = nullptr)
        : group_(group), on_action_(std::move(on_action)) {}

    void feed(std::string_view chunk) {
        buf_.append(chunk);
        scan(/*eos=*/false);
    }

    PlannerOutput finish() {
        scan(/*eos=*/true);  // flush calls decided only by end-of-input
        return parse_planner_output(buf_, group_);
    }

    PlannerOutput abort(const std::string& reason = "backend stream interrupted") {
        PlannerOutput out;
        out.actions = emitted_;
        out.parse_error = reason;
        return out;
    }

    const std::vector<Action>& emitted() const { return emitted_; }
    const std::string& buffer() const { return buf_; }

  private:
    enum class Mode { Scanning, InAction, SeenFinal, Dead };

    void scan(bool eos) {
        if (mode_ == Mode::Scanning) locate_directive(eos);
        if (mode_ != Mode::InAction || action_done_) return;
        auto scan = scan_action_calls(std::string_view(buf_).substr(body_start_), eos, group_);
        for (size_t i = emitted_.size(); i < scan.calls.size(); ++i) {
            emitted_.push_back(scan.calls[i]);
            if (on_action_) on_action_(emitted_.back());
        }
        if (scan.status != ActionScan::Status::NeedMore) action_done_ = true;
    }

    void locate_directive(bool eos) {
        size_t pos = cursor_;
        while (pos < buf_.size()) {
            auto lc = detail::classify_line(buf_, pos, eos);
            if (lc.kind == detail::LineClass::Incomplete) return;  // wait for more bytes
            if (lc.kind == detail::LineClass::Blank) {
                if (!lc.terminated) return;
                pos = lc.next_line;
                cursor_ = pos;
                continue;
            }
            if (lc.kind == detail::LineClass::Thought) {
                if (!lc.terminated && !eos) return;  // thought text still streaming
                if (saw_thought_) {
                    mode_ = Mode::Dead;
                    return;
                }
                saw_thought_ = true;
                pos = lc.next_line;
                cursor_ = pos;
                continue;
            }
            if (lc.kind == detail::LineClass::ActionLine) {
                mode_ = Mode::InAction;
                body_start_ = lc.content_begin;
                return;
            }
            if (lc.kind == detail::LineClass::Final) {
                mode_ = Mode::SeenFinal;
                return;
            }
            mode_ = Mode::Dead;  // junk; batch parse will report it
            return;
        }
    }

    std::uint64_t group_;
    ActionCallback on_action_;
    std::string buf_;
    size_t cursor_ = 0;
    size_t body_start_ = 0;
    bool saw_thought_ = false;
    bool action_done_ = false;
    Mode mode_ = Mode::Scanning;
    std::vector<Action> emitted_;
};

}  // namespace reactor
