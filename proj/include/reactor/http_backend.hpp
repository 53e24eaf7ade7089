#pragma once

#include <chrono>
#include <cstdlib>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "reactor/backend.hpp"
#include "reactor/sse.hpp"
#include "reactor/text.hpp"

namespace reactor {

struct ParsedUrl {
    std::string scheme;  // "http" or "https"
    std::string host;
    int port = 80;
    std::string path;  // leading '/', may be "/"
};

inline std::optional<ParsedUrl> parse_url(const std::string& url) {
    ParsedUrl out;
    size_t scheme_end = url.find("://");
    if (scheme_end == std::string::npos) return std::nullopt;
    out.scheme = url.substr(0, scheme_end);
    if (out.scheme != "http" && out.scheme != "https") return std::nullopt;
    out.port = out.scheme == "https" ? 443 : 80;
    size_t host_begin = scheme_end + 3;
    size_t path_begin = url.find('/', host_begin);
    std::string hostport = url.substr(
        host_begin, path_begin == std::string::npos ? std::string::npos : path_begin - host_begin);
    if (hostport.empty()) return std::nullopt;
    size_t colon = hostport.rfind(':');
    if (colon != std::string::npos && hostport.find(']') == std::string::npos) {
        out.host = hostport.substr(0, colon);
        try {
            out.port = std::stoi(hostport.substr(colon + 1));
        } catch (...) {
            return std::nullopt;
        }
    } else {
        out.host = hostport;
    }
    out.path = path_begin == std::string::npos ? "/" : url.substr(path_begin);
    return out;
}

struct HttpBackendConfig {
    // Base URL of a completion-style API, e.g. "http://localhost:8000".
    std::string endpoint;
    std::string completion_path = "/v1/completions";
    std::string model = "default";
    double temperature = 0.0;
    std::chrono::milliseconds timeout{120000};
    // Transient failures (connection errors, HTTP 5xx) are retried this many
    // times with jittered exponential backoff. 4xx responses are not retried.
    int max_retries = 2;
    std::chrono::milliseconds backoff_base{250};
    // Credentials come from the environment only, never from config files.
    std::string api_key_env = "REACTOR_API_KEY";
};

// Planner backend speaking an OpenAI-compatible completions protocol over
// HTTP, including SSE streaming. The request carries the prompt, the stop
// sequences, and the completion-token cap; usage is taken from the response
// when reported and estimated at one token per 4 characters otherwise.
class HttpBackend : public PlannerBackend {
  public:
    explicit HttpBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg)) {
        if (auto u = parse_url(cfg_.endpoint)) url_ = *u;
    }

    std::string name() const override { return "http:" + cfg_.endpoint; }

    CompletionResult complete(const BackendRequest& req,
                              const TokenCallback& on_token = nullptr) override {
        if (!url_) {
            CompletionResult r;
            r.error = "invalid backend endpoint: " + cfg_.endpoint;
            return r;
        }
        std::mt19937_64 rng(std::random_device{}());
        CompletionResult last;
        for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
            if (attempt > 0) {
                auto base = cfg_.backoff_base.count() * (1LL << (attempt - 1));
                std::uniform_int_distribution<long long> jitter(0, std::max(1LL, base));
                std::this_thread::sleep_for(
                    std::chrono::milliseconds(base + jitter(rng)));
            }
            bool transient = false;
            last = attempt_once(req, on_token, transient);
            if (last.ok || !transient) return last;
        }
        return last;
    }

  private:
    httplib::Client make_client() const {
        httplib::Client cli(url_->host, url_->port);
        auto secs = std::chrono::duration_cast<std::chrono::seconds>(cfg_.timeout);
        cli.set_connection_timeout(std::max<long>(1, secs.count()), 0);
        cli.set_read_timeout(std::max<long>(1, secs.count()), 0);
        if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key)
            cli.set_bearer_token_auth(key);
        return cli;
    }

    nlohmann::json request_body(const BackendRequest& req, bool stream) const {
        nlohmann::json body{{"model", cfg_.model},
                            {"prompt", req.prompt},
                            {"max_tokens", req.max_completion_tokens},
                            {"temperature", cfg_.temperature},
                            {"stream", stream}};
        if (!req.stop_sequences.empty()) body["stop"] = req.stop_sequences;
        return body;
    }

    CompletionResult attempt_once(const BackendRequest& req, const TokenCallback& on_token,
                                  bool& transient) {
        return req.stream ? attempt_stream(req, on_token, transient)
                          : attempt_plain(req, transient);
    }

    CompletionResult attempt_plain(const BackendRequest& req, bool& transient) {
        CompletionResult r;
        auto cli = make_client();
        auto res = cli.Post(path().c_str(), request_body(req, false).dump(), "application/json");
        if (!res) {
            transient = true;
            r.error = "backend connection failed: " + httplib::to_string(res.error());
            return r;
        }
        if (res->status >= 500) {
            transient = true;
            r.error = "backend returned HTTP " + std::to_string(res->status);
            return r;
        }
        if (res->status != 200) {
            r.error = "backend returned HTTP " + std::to_string(res->status) + ": " + res->body;
            return r;
        }
        auto j = nlohmann::json::parse(res->body, nullptr, false);
        if (j.is_discarded() || !j.contains("choices") || j["choices"].empty()) {
            r.error = "backend response is not a completion object";
            return r;
        }
        r.text = extract_text(j["choices"][0]);
        fill_usage(r, j, req.prompt);
        r.ok = true;
        return r;
    }

    CompletionResult attempt_stream(const BackendRequest& req, const TokenCallback& on_token,
                                    bool& transient) {
        CompletionResult r;
        auto cli = make_client();
        SseParser parser;
        std::string text;
        bool done_marker = false;
        nlohmann::json usage_json;
        auto handle = [&](const SseMessage& m) {
            if (m.data == "[DONE]") {
                done_marker = true;
                return;
            }
            auto j = nlohmann::json::parse(m.data, nullptr, false);
            if (j.is_discarded()) return;
            if (j.contains("choices") && !j["choices"].empty()) {
                std::string piece = extract_text(j["choices"][0]);
                if (!piece.empty()) {
                    text += piece;
                    if (on_token) on_token(piece);
                }
            }
            if (j.contains("usage") && j["usage"].is_object()) usage_json = j["usage"];
        };
        httplib::Request http_req;
        http_req.method = "POST";
        http_req.path = path();
        http_req.set_header("Accept", "text/event-stream");
        http_req.set_header("Content-Type", "application/json");
        http_req.body = request_body(req, true).dump();
        http_req.content_receiver = [&](const char* data, size_t len, std::uint64_t,
                                        std::uint64_t) {
            parser.feed(std::string_view(data, len));
            for (auto& m : parser.take_messages()) handle(m);
            return true;
        };
        auto res = cli.send(http_req);
        for (auto& m : parser.take_messages()) handle(m);
        if (!res) {
            transient = text.empty();  // a cut stream is not retryable blindly
            r.text = text;
            r.interrupted = !text.empty();
            r.error = "backend stream failed: " + httplib::to_string(res.error());
            return r;
        }
        if (res->status >= 500) {
            transient = true;
            r.error = "backend returned HTTP " + std::to_string(res->status);
            return r;
        }
        if (res->status != 200) {
            r.error = "backend returned HTTP " + std::to_string(res->status);
            return r;
        }
        (void)done_marker;
        r.text = std::move(text);
        if (usage_json.is_object()) {
            r.usage.prompt_tokens = usage_json.value("prompt_tokens", std::int64_t{0});
            r.usage.completion_tokens = usage_json.value("completion_tokens", std::int64_t{0});
            r.usage.reported = true;
        } else {
            r.usage.prompt_tokens = estimate_tokens(req.prompt);
            r.usage.completion_tokens = estimate_tokens(r.text);
        }
        r.ok = true;
        return r;
    }

    static std::string extract_text(const nlohmann::json& choice) {
        if (choice.contains("text") && choice["text"].is_string())
            return choice["text"].get<std::string>();
        // Chat-shaped responses: {"message": {"content": ...}} or streaming
        // {"delta": {"content": ...}}.
        for (const char* key : {"message", "delta"}) {
            if (choice.contains(key) && choice[key].is_object() &&
                choice[key].contains("content") && choice[key]["content"].is_string())
                return choice[key]["content"].get<std::string>();
        }
        return {};
    }

    void fill_usage(CompletionResult& r, const nlohmann::json& j,
                    const std::string& prompt) const {
        if (j.contains("usage") && j["usage"].is_object()) {
            r.usage.prompt_tokens = j["usage"].value("prompt_tokens", std::int64_t{0});
            r.usage.completion_tokens = j["usage"].value("completion_tokens", std::int64_t{0});
            r.usage.reported = true;
        } else {
            r.usage.prompt_tokens = estimate_tokens(prompt);
            r.usage.completion_tokens = estimate_tokens(r.text);
        }
    }

    std::string path() const {
        std::string base = url_->path == "/" ? "" : url_->path;
        return base + cfg_.completion_path;
    }

    HttpBackendConfig cfg_;
    std::optional<ParsedUrl> url_;
};

}  // namespace reactor
