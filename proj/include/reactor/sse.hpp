#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "reactor/events.hpp"

namespace reactor {

// Wire form of one event: an `event:` line naming the type, a `data:` line
// carrying the event JSON on a single line, and a blank terminator.
inline std::string serialize_sse(const Event& e) {
    std::string out = "event: ";
    out += to_string(e.type);
    out += "\ndata: ";
    // Replace malformed UTF-8 from untrusted tool output instead of throwing.
    out += e.to_json().dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
    out += "\n\n";
    return out;
}

struct SseMessage {
    std::string event;  // empty -> "message" per the SSE default
    std::string data;   // data lines joined with '\n'
    std::optional<std::string> id;
};

// Incremental server-sent-events parser following the WHATWG dispatch rules:
// line-based fields, optional one leading space after ':', comment lines
// ignored, blank line dispatches. Used by tests, the CLI tail command, and
// the streaming HTTP backend.
class SseParser {
  public:
    void feed(std::string_view chunk) {
        buf_.append(chunk);
        size_t pos = 0;
        while (true) {
            size_t nl = buf_.find('\n', pos);
            size_t cr = buf_.find('\r', pos);
            size_t end = std::min(nl, cr);
            if (end == std::string::npos) break;
            std::string_view line(buf_.data() + pos, end - pos);
            size_t next = end + 1;
            if (buf_[end] == '\r') {
                if (next == buf_.size()) break;  // might be half of a CRLF
                if (buf_[next] == '\n') ++next;
            }
            handle_line(line);
            pos = next;
        }
        buf_.erase(0, pos);
    }

    // Completed messages accumulated so far (moves them out).
    std::vector<SseMessage> take_messages() {
        std::vector<SseMessage> out;
        out.swap(messages_);
        return out;
    }

    // Data buffered for a message that was never terminated by a blank line.
    bool has_partial() const { return !data_.empty() || !event_.empty(); }

  private:
    void handle_line(std::string_view line) {
        if (line.empty()) {
            dispatch();
            return;
        }
        if (line[0] == ':') return;  // comment
        size_t colon = line.find(':');
        std::string_view field = colon == std::string_view::npos ? line : line.substr(0, colon);
        std::string_view value;
        if (colon != std::string_view::npos) {
            value = line.substr(colon + 1);
            if (!value.empty() && value[0] == ' ') value.remove_prefix(1);
        }
        if (field == "event") {
            event_ = std::string(value);
        } else if (field == "data") {
            if (!data_.empty()) data_ += '\n';
            data_ += std::string(value);
            saw_data_ = true;
        } else if (field == "id") {
            if (value.find('\0') == std::string_view::npos) id_ = std::string(value);
        }
        // "retry" and unknown fields are ignored.
    }

    void dispatch() {
        if (!saw_data_) {
            // Per the standard, no data means no dispatch; the event type
            // buffer is still reset. The last-event-id persists.
            event_.clear();
            return;
        }
        SseMessage m;
        m.event = event_;
        m.data = data_;
        m.id = id_;  // last-event-id is stream state; it persists across messages
        messages_.push_back(std::move(m));
        event_.clear();
        data_.clear();
        saw_data_ = false;
    }

    std::string buf_;
    std::string event_;
    std::string data_;
    bool saw_data_ = false;
    std::optional<std::string> id_;
    std::vector<SseMessage> messages_;
};

// Reconstructs an Event from a parsed SSE message; nullopt when the payload
// is not valid event JSON or the event-type label disagrees with it.
inline std::optional<Event> event_from_sse(const SseMessage& m) {
    auto j = nlohmann::json::parse(m.data, nullptr, false);
    if (j.is_discarded()) return std::nullopt;
    auto e = Event::from_json(j);
    if (!e) return std::nullopt;
    if (!m.event.empty() && m.event != to_string(e->type)) return std::nullopt;
    return e;
}

}  // namespace reactor
