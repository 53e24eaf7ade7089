#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "reactor/text.hpp"

namespace reactor {

struct BackendRequest {
    std::string prompt;
    std::vector<std::string> stop_sequences;
    int max_completion_tokens = 512;
    bool stream = false;
};

struct TokenUsage {
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;
    bool reported = false;  // true when the backend supplied real counts
};

struct CompletionResult {
    bool ok = false;
    std::string text;
    TokenUsage usage;
    std::string error;
    bool interrupted = false;  // stream ended before completion
};

// Called with each raw text chunk as it arrives when streaming.
using TokenCallback = std::function<void(std::string_view)>;

// A completion source for the planner loop. Implementations must be safe to
// call from multiple session threads.
class PlannerBackend {
  public:
    virtual ~PlannerBackend() = default;
    virtual std::string name() const = 0;
    // When req.stream is true and on_token is set, the text is additionally
    // delivered incrementally through on_token before the call returns.
    virtual CompletionResult complete(const BackendRequest& req,
                                      const TokenCallback& on_token = nullptr) = 0;
};

// One step of a scripted conversation: optionally assert that the incoming
// prompt contains `expect`, then answer with `response`.
struct ScriptStep {
    std::optional<std::string> expect;
    std::string response;
    std::optional<std::int64_t> prompt_tokens;
    std::optional<std::int64_t> completion_tokens;
};

// Deterministic offline backend: steps are consumed strictly in order. A
// prompt that does not contain the expected substring is a divergence error
// carrying both sides; running past the end of the script is an error too.
// Streaming mode chops the response into fixed-size chunks.
class ScriptedBackend : public PlannerBackend {
  public:
    explicit ScriptedBackend(std::vector<ScriptStep> steps, size_t stream_chunk = 8)
        : steps_(std::move(steps)), stream_chunk_(stream_chunk ? stream_chunk : 8) {}

    std::string name() const override { return "scripted"; }

    CompletionResult complete(const BackendRequest& req,
                              const TokenCallback& on_token = nullptr) override {
        ScriptStep step;
        size_t step_index = 0;
        {
            std::lock_guard lk(mu_);
            ++calls_;
            if (cursor_ >= steps_.size()) {
                CompletionResult r;
                r.error = "script exhausted after " + std::to_string(steps_.size()) + " steps";
                return r;
            }
            step_index = cursor_;
            step = steps_[cursor_++];
        }
        if (step.expect && req.prompt.find(*step.expect) == std::string::npos) {
            CompletionResult r;
            r.error = "scripted divergence at step " + std::to_string(step_index + 1) +
                      ": expected prompt to contain \"" + *step.expect +
                      "\" but the prompt was: " + req.prompt;
            return r;
        }
        CompletionResult r;
        r.ok = true;
        r.text = step.response;
        r.usage.prompt_tokens =
            step.prompt_tokens ? *step.prompt_tokens : estimate_tokens(req.prompt);
        r.usage.completion_tokens =
            step.completion_tokens ? *step.completion_tokens : estimate_tokens(step.response);
        r.usage.reported = step.prompt_tokens.has_value() || step.completion_tokens.has_value();
        if (req.stream && on_token) {
            for (size_t i = 0; i < r.text.size(); i += stream_chunk_)
                on_token(std::string_view(r.text).substr(i, stream_chunk_));
        }
        return r;
    }

    int calls() const { return calls_.load(); }
    size_t steps_remaining() const {
        std::lock_guard lk(mu_);
        return steps_.size() - std::min(cursor_, steps_.size());
    }

  private:
    std::vector<ScriptStep> steps_;
    size_t stream_chunk_;
    mutable std::mutex mu_;
    size_t cursor_ = 0;
    std::atomic<int> calls_{0};
};

// Planner driven by a function of the prompt; the programmable test double
// used by the simulation harness for branching policies.
class PolicyBackend : public PlannerBackend {
  public:
    using Policy = std::function<std::string(const std::string& prompt, int call_index)>;

    explicit PolicyBackend(Policy policy) : policy_(std::move(policy)) {}

    std::string name() const override { return "policy"; }

    CompletionResult complete(const BackendRequest& req,
                              const TokenCallback& on_token = nullptr) override {
        int idx = calls_.fetch_add(1);
        CompletionResult r;
        r.ok = true;
        r.text = policy_(req.prompt, idx);
        r.usage.prompt_tokens = estimate_tokens(req.prompt);
        r.usage.completion_tokens = estimate_tokens(r.text);
        if (req.stream && on_token) on_token(r.text);
        return r;
    }

    int calls() const { return calls_.load(); }

  private:
    Policy policy_;
    std::atomic<int> calls_{0};
};

inline std::vector<ScriptStep> script_from_json(const nlohmann::json& j) {
    std::vector<ScriptStep> steps;
    const nlohmann::json& arr = j.is_array() ? j : j.at("steps");
    for (const auto& s : arr) {
        ScriptStep step;
        if (s.is_string()) {
            step.response = s.get<std::string>();
        } else {
            if (s.contains("expect")) step.expect = s["expect"].get<std::string>();
            step.response = s.value("response", std::string{});
            if (s.contains("prompt_tokens"))
                step.prompt_tokens = s["prompt_tokens"].get<std::int64_t>();
            if (s.contains("completion_tokens"))
                step.completion_tokens = s["completion_tokens"].get<std::int64_t>();
        }
        steps.push_back(std::move(step));
    }
    return steps;
}

inline std::vector<ScriptStep> load_script_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in.is_open()) throw std::runtime_error("cannot open script file: " + path.string());
    nlohmann::json j;
    in >> j;
    return script_from_json(j);
}

}  // namespace reactor
