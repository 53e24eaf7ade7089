#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "reactor/text.hpp"

namespace reactor {

// The five scratchpad entry kinds. Observations carry tool results (success
// or failure); Error is reserved for planner-level failures such as
// malformed output, validation rejections, privacy violations, and backend
// errors.
enum class EntryKind { Thought, Action, Observation, Error, Final };

inline const char* entry_prefix(EntryKind k) {
    switch (k) {
        case EntryKind::Thought: return "Thought: ";
        case EntryKind::Action: return "Action: ";
        case EntryKind::Observation: return "Observation: ";
        case EntryKind::Error: return "Error: ";
        case EntryKind::Final: return "Final Answer: ";
    }
    return "Observation: ";
}

struct ScratchpadEntry {
    EntryKind kind = EntryKind::Thought;
    std::string content;  // bare text, without the kind prefix
    int turn = 0;
    std::optional<std::uint64_t> group;  // for Action/Observation rows
    std::optional<std::string> tool;     // for Observation rows

    bool operator==(const ScratchpadEntry&) const = default;
};

inline std::string render_entry(const ScratchpadEntry& e) {
    return entry_prefix(e.kind) + e.content;
}

// One summarized turn produced by compaction.
struct TurnSummary {
    int turn = 0;
    std::string text;

    bool operator==(const TurnSummary&) const = default;
};

// Scratchpad after zero or more compactions: summaries of older turns first,
// then verbatim entries of the turns kept whole.
struct CompactedPad {
    std::vector<TurnSummary> summaries;
    std::vector<ScratchpadEntry> verbatim;

    bool operator==(const CompactedPad&) const = default;
};

// Digest of one turn: which tools were called and the first 200 characters
// of each observation/error the turn produced.
inline TurnSummary summarize_turn(int turn, const std::vector<const ScratchpadEntry*>& entries) {
    constexpr size_t kDigestChars = 200;
    std::string tools;
    std::string digest;
    for (const auto* e : entries) {
        if (e->kind == EntryKind::Action && e->tool) {
            if (!tools.empty()) tools += ", ";
            tools += *e->tool;
        }
        if (e->kind == EntryKind::Observation || e->kind == EntryKind::Error) {
            if (!digest.empty()) digest += " | ";
            digest += digest_prefix(e->content, kDigestChars);
        }
    }
    if (tools.empty()) tools = "none";
    if (digest.empty()) digest = "(none)";
    return {turn, "Turn " + std::to_string(turn) + ": called " + tools +
                      "; result digest: " + digest};
}

inline std::string render_pad(const CompactedPad& pad) {
    std::string out;
    for (const auto& s : pad.summaries) {
        if (!out.empty()) out += '\n';
        out += s.text;
    }
    for (const auto& e : pad.verbatim) {
        if (!out.empty()) out += '\n';
        out += render_entry(e);
    }
    return out;
}

inline std::int64_t pad_tokens(const CompactedPad& pad) {
    return estimate_tokens(render_pad(pad));
}

// Budget-driven compaction. When the rendered pad exceeds the budget, every
// verbatim turn except the newest `verbatim_turns` collapses into a one-line
// summary; already-summarized turns are left alone. Running it again on its
// own output is a no-op (there is nothing older left to fold), which makes
// compaction idempotent. The entry sequence order (summaries oldest-first,
// then verbatim) is preserved.
inline CompactedPad compact_scratchpad(const CompactedPad& pad, std::int64_t budget_tokens,
                                       int verbatim_turns = 2) {
    if (pad_tokens(pad) <= budget_tokens) return pad;
    // Group the verbatim entries by turn, keeping first-seen turn order.
    std::vector<int> turn_order;
    std::map<int, std::vector<const ScratchpadEntry*>> by_turn;
    for (const auto& e : pad.verbatim) {
        if (!by_turn.count(e.turn)) turn_order.push_back(e.turn);
        by_turn[e.turn].push_back(&e);
    }
    if (static_cast<int>(turn_order.size()) <= verbatim_turns) return pad;  // nothing to fold
    size_t keep_from = turn_order.size() - static_cast<size_t>(std::max(0, verbatim_turns));
    CompactedPad out;
    out.summaries = pad.summaries;
    for (size_t i = 0; i < keep_from; ++i)
        out.summaries.push_back(summarize_turn(turn_order[i], by_turn[turn_order[i]]));
    for (const auto& e : pad.verbatim)
        if (std::find(turn_order.begin() + keep_from, turn_order.end(), e.turn) !=
            turn_order.end())
            out.verbatim.push_back(e);
    return out;
}

}  // namespace reactor
