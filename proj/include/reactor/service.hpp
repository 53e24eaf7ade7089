#pragma once

#include <atomic>
#include <memory>
#include <string>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "reactor/engine.hpp"
#include "reactor/sse.hpp"

namespace reactor {

// HTTP face of the engine:
//   POST   /registry/tools        register a tool (201; 400 invalid, 409 duplicate)
//   GET    /registry/tools        list live descriptors
//   DELETE /registry/tools/<name> deregister (200; 404 unknown)
//   POST   /tasks                 submit a task (202; 400 invalid, 429 busy)
//   GET    /tasks/<id>            status/answer/cost (404 unknown)
//   GET    /tasks/<id>/events     SSE stream with replay; honors Last-Event-ID
//                                 (or ?from_seq=N) as the first seq to send
class Service {
  public:
    explicit Service(Engine& engine) : engine_(engine) { routes(); }

    ~Service() { stop(); }

    // Binds and serves on a background thread. port 0 picks a free port.
    bool start(const std::string& host, int port) {
        if (running_.exchange(true)) return false;
        if (port == 0) {
            port_ = server_.bind_to_any_port(host.c_str());
            if (port_ < 0) {
                running_ = false;
                return false;
            }
        } else {
            if (!server_.bind_to_port(host.c_str(), port)) {
                running_ = false;
                return false;
            }
            port_ = port;
        }
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return true;
    }

    void stop() {
        if (!running_.exchange(false)) return;
        server_.stop();
        if (thread_.joinable()) thread_.join();
    }

    int port() const { return port_; }

  private:
    static void reply_json(httplib::Response& res, int status, const nlohmann::json& j) {
        res.status = status;
        res.set_content(j.dump(), "application/json");
    }

    void routes() {
        server_.Post("/registry/tools", [this](const httplib::Request& req,
                                               httplib::Response& res) {
            auto body = nlohmann::json::parse(req.body, nullptr, false);
            if (body.is_discarded())
                return reply_json(res, 400, {{"error", "request body must be JSON"}});
            auto parsed = descriptor_from_json(body);
            if (!parsed.ok) return reply_json(res, 400, {{"error", parsed.error}});
            auto result = engine_.registry().register_tool(parsed.descriptor);
            if (!result.ok)
                return reply_json(res, result.duplicate ? 409 : 400, {{"error", result.error}});
            reply_json(res, 201, {{"registered", parsed.descriptor.name}});
        });

        server_.Get("/registry/tools", [this](const httplib::Request&, httplib::Response& res) {
            nlohmann::json tools = nlohmann::json::array();
            for (const auto& d : engine_.registry().snapshot())
                tools.push_back(descriptor_to_json(d));
            reply_json(res, 200, {{"tools", tools}});
        });

        server_.Delete(R"(/registry/tools/([A-Za-z0-9_]+))",
                       [this](const httplib::Request& req, httplib::Response& res) {
                           std::string name = req.matches[1];
                           if (!engine_.registry().deregister_tool(name))
                               return reply_json(res, 404,
                                                 {{"error", "no tool named \"" + name + "\""}});
                           reply_json(res, 200, {{"removed", name}});
                       });

        server_.Post("/tasks", [this](const httplib::Request& req, httplib::Response& res) {
            auto body = nlohmann::json::parse(req.body, nullptr, false);
            if (body.is_discarded() || !body.is_object())
                return reply_json(res, 400, {{"error", "request body must be a JSON object"}});
            TaskSubmission sub;
            sub.task = body.value("task", std::string{});
            if (body.contains("attachments")) {
                for (const auto& a : body["attachments"]) {
                    Attachment att;
                    att.name = a.value("name", std::string{});
                    att.content = a.value("content", std::string{});
                    if (att.name.empty())
                        return reply_json(res, 400, {{"error", "attachment without a name"}});
                    sub.attachments.push_back(std::move(att));
                }
            }
            if (body.contains("max_turns")) sub.max_turns = body["max_turns"].get<int>();
            if (body.contains("streaming")) sub.streaming = body["streaming"].get<bool>();
            sub.session_id = body.value("session_id", std::string{});
            auto outcome = engine_.submit(sub);
            if (!outcome.ok)
                return reply_json(res, outcome.busy ? 429 : 400, {{"error", outcome.error}});
            reply_json(res, 202,
                       {{"session_id", outcome.session_id},
                        {"events_url", "/tasks/" + outcome.session_id + "/events"}});
        });

        server_.Get(R"(/tasks/([^/]+)/events)", [this](const httplib::Request& req,
                                                       httplib::Response& res) {
            std::string id = req.matches[1];
            std::uint64_t from_seq = 0;
            if (req.has_header("Last-Event-ID")) {
                try {
                    from_seq = std::stoull(req.get_header_value("Last-Event-ID"));
                } catch (...) {
                }
            } else if (req.has_param("from_seq")) {
                try {
                    from_seq = std::stoull(req.get_param_value("from_seq"));
                } catch (...) {
                }
            }
            auto sub = engine_.events().subscribe(id, from_seq);
            if (!sub) {
                reply_json(res, 404, {{"error", "no session named \"" + id + "\""}});
                return;
            }
            res.set_header("Cache-Control", "no-cache");
            res.set_chunked_content_provider(
                "text/event-stream", [sub](size_t, httplib::DataSink& sink) {
                    while (true) {
                        auto e = sub->next(std::chrono::milliseconds(100));
                        if (e) {
                            std::string frame = "id: " + std::to_string(e->seq) + "\n";
                            frame += serialize_sse(*e);
                            if (!sink.write(frame.data(), frame.size())) return false;
                            continue;
                        }
                        if (sub->ended() || sub->dropped()) {
                            sink.done();
                            return false;
                        }
                        if (!sink.is_writable()) return false;
                    }
                });
        });

        server_.Get(R"(/tasks/([^/]+))", [this](const httplib::Request& req,
                                                httplib::Response& res) {
            std::string id = req.matches[1];
            auto view = engine_.task(id);
            if (!view.exists)
                return reply_json(res, 404, {{"error", "no task named \"" + id + "\""}});
            nlohmann::json j{{"session_id", view.session_id},
                             {"status", to_string(view.status)},
                             {"turns", view.turns},
                             {"cost", view.cost}};
            if (view.status == SessionStatus::Done) j["answer"] = view.answer;
            if (view.status == SessionStatus::Failed) j["failure"] = view.failure;
            reply_json(res, 200, j);
        });

        server_.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
            reply_json(res, 200, {{"ok", true}});
        });
    }

    Engine& engine_;
    httplib::Server server_;
    std::thread thread_;
    std::atomic<bool> running_{false};
    int port_ = 0;
};

}  // namespace reactor
