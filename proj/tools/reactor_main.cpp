#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "reactor/reactor.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::atomic<bool> g_stop{false};
void handle_signal(int) { g_stop = true; }

std::optional<json> read_json_file(const fs::path& path, std::string& error) {
    std::ifstream in(path);
    if (!in.is_open()) {
        error = "cannot open " + path.string();
        return std::nullopt;
    }
    try {
        json j;
        in >> j;
        return j;
    } catch (const std::exception& e) {
        error = path.string() + " is not valid JSON: " + e.what();
        return std::nullopt;
    }
}

// Accepts a bare array of descriptors, {"tools": [...]}, or a single object.
std::vector<json> normalize_descriptor_list(const json& j) {
    if (j.is_array()) return std::vector<json>(j.begin(), j.end());
    if (j.is_object() && j.contains("tools") && j["tools"].is_array())
        return std::vector<json>(j["tools"].begin(), j["tools"].end());
    return {j};
}

int register_descriptors(reactor::Engine& engine, const std::vector<json>& descriptors) {
    for (const auto& dj : descriptors) {
        auto parsed = reactor::descriptor_from_json(dj);
        if (!parsed.ok) {
            std::fprintf(stderr, "bad tool descriptor: %s\n", parsed.error.c_str());
            return 1;
        }
        auto reg = engine.registry().register_tool(parsed.descriptor);
        if (!reg.ok) {
            std::fprintf(stderr, "tool %s rejected: %s\n", parsed.descriptor.name.c_str(),
                         reg.error.c_str());
            return 1;
        }
    }
    return 0;
}

std::shared_ptr<reactor::PlannerBackend> make_backend_from_json(const json& spec,
                                                                const fs::path& base_dir,
                                                                std::string& error) {
    std::string type = spec.value("type", std::string{});
    if (type == "scripted") {
        fs::path script = fs::path(spec.value("script", std::string{}));
        if (script.empty()) {
            error = "scripted backend needs a \"script\" file";
            return nullptr;
        }
        if (script.is_relative()) script = base_dir / script;
        std::vector<reactor::ScriptStep> steps;
        try {
            steps = reactor::load_script_file(script);
        } catch (const std::exception& e) {
            error = e.what();
            return nullptr;
        }
        int chunk = spec.value("stream_chunk", 8);
        return std::make_shared<reactor::ScriptedBackend>(steps, chunk);
    }
    if (type == "http") {
        reactor::HttpBackendConfig cfg;
        cfg.endpoint = spec.value("endpoint", std::string{});
        if (cfg.endpoint.empty()) {
            error = "http backend needs an \"endpoint\"";
            return nullptr;
        }
        cfg.completion_path = spec.value("completion_path", cfg.completion_path);
        cfg.model = spec.value("model", cfg.model);
        cfg.temperature = spec.value("temperature", cfg.temperature);
        if (spec.contains("timeout_ms"))
            cfg.timeout = std::chrono::milliseconds(spec["timeout_ms"].get<std::int64_t>());
        if (spec.contains("max_retries")) cfg.max_retries = spec["max_retries"].get<int>();
        return std::make_shared<reactor::HttpBackend>(cfg);
    }
    error = "unknown backend type \"" + type + "\" (expected \"scripted\" or \"http\")";
    return nullptr;
}

int cmd_serve(const std::string& host, int port, const std::string& trace_dir,
              const std::string& registry_file, const json* backend_spec,
              const fs::path& base_dir, int max_turns, bool streaming) {
    reactor::EngineConfig cfg;
    if (!trace_dir.empty()) cfg.events.trace_dir = fs::path(trace_dir);
    cfg.session.max_turns = max_turns;
    cfg.session.streaming = streaming;
    reactor::Engine engine(cfg);

    if (!registry_file.empty()) {
        std::string error;
        auto j = read_json_file(registry_file, error);
        if (!j) {
            std::fprintf(stderr, "%s\n", error.c_str());
            return 1;
        }
        if (int rc = register_descriptors(engine, normalize_descriptor_list(*j))) return rc;
    }
    if (backend_spec) {
        std::string error;
        auto backend = make_backend_from_json(*backend_spec, base_dir, error);
        if (!backend) {
            std::fprintf(stderr, "%s\n", error.c_str());
            return 1;
        }
        engine.set_backend(backend);
    } else {
        std::fprintf(stderr,
                     "note: no planner backend configured; task submissions will be "
                     "rejected until one is\n");
    }

    reactor::Service service(engine);
    if (!service.start(host, port)) {
        std::fprintf(stderr, "cannot bind %s:%d\n", host.c_str(), port);
        return 1;
    }
    std::printf("listening on http://%s:%d\n", host.c_str(), service.port());
    std::fflush(stdout);
    std::signal(SIGINT, handle_signal);
    std::signal(SIGTERM, handle_signal);
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    service.stop();
    engine.wait_all();
    return 0;
}

int cmd_run(const fs::path& taskfile, bool quiet) {
    std::string error;
    auto spec_opt = read_json_file(taskfile, error);
    if (!spec_opt) {
        std::fprintf(stderr, "%s\n", error.c_str());
        return 1;
    }
    const json& spec = *spec_opt;
    fs::path base_dir = taskfile.has_parent_path() ? taskfile.parent_path() : fs::path(".");

    reactor::EngineConfig cfg;
    cfg.session.max_turns = spec.value("max_turns", cfg.session.max_turns);
    cfg.session.streaming = spec.value("streaming", false);
    if (spec.contains("context_budget_tokens"))
        cfg.session.context_budget_tokens = spec["context_budget_tokens"].get<std::int64_t>();
    if (spec.contains("trace_dir")) {
        fs::path dir = fs::path(spec["trace_dir"].get<std::string>());
        if (dir.is_relative()) dir = base_dir / dir;
        cfg.events.trace_dir = dir;
    }
    reactor::Engine engine(cfg);

    std::string toolset = spec.value("builtin_toolset", std::string{});
    if (toolset == "golden-pdf") {
        reactor::install_golden_tools(engine);
    } else if (!toolset.empty()) {
        std::fprintf(stderr, "unknown builtin_toolset \"%s\"\n", toolset.c_str());
        return 1;
    }
    if (spec.contains("registry")) {
        std::vector<json> descriptors;
        if (spec["registry"].is_string()) {
            fs::path reg = fs::path(spec["registry"].get<std::string>());
            if (reg.is_relative()) reg = base_dir / reg;
            auto j = read_json_file(reg, error);
            if (!j) {
                std::fprintf(stderr, "%s\n", error.c_str());
                return 1;
            }
            descriptors = normalize_descriptor_list(*j);
        } else {
            descriptors = normalize_descriptor_list(spec["registry"]);
        }
        if (int rc = register_descriptors(engine, descriptors)) return rc;
    }

    if (!spec.contains("backend")) {
        std::fprintf(stderr, "taskfile has no \"backend\" section\n");
        return 1;
    }
    auto backend = make_backend_from_json(spec["backend"], base_dir, error);
    if (!backend) {
        std::fprintf(stderr, "%s\n", error.c_str());
        return 1;
    }
    engine.set_backend(backend);

    reactor::TaskSubmission sub;
    sub.task = spec.value("task", std::string{});
    if (spec.contains("attachments")) {
        for (const auto& aj : spec["attachments"]) {
            if (aj.contains("builtin")) {
                if (aj["builtin"] == "golden-report") {
                    sub.attachments.push_back(reactor::golden_report_attachment());
                } else {
                    std::fprintf(stderr, "unknown builtin attachment\n");
                    return 1;
                }
            } else if (aj.contains("path")) {
                fs::path p = fs::path(aj["path"].get<std::string>());
                if (p.is_relative()) p = base_dir / p;
                std::ifstream in(p, std::ios::binary);
                if (!in.is_open()) {
                    std::fprintf(stderr, "cannot open attachment %s\n", p.string().c_str());
                    return 1;
                }
                std::string content((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
                sub.attachments.push_back(
                    {aj.value("name", p.filename().string()), std::move(content)});
            } else {
                sub.attachments.push_back({aj.value("name", std::string{"attachment"}),
                                           aj.value("content", std::string{})});
            }
        }
    }

    auto outcome = engine.submit(sub);
    if (!outcome.ok) {
        std::fprintf(stderr, "submit failed: %s\n", outcome.error.c_str());
        return 1;
    }

    // The session thread opens its event stream moments after submit returns.
    std::shared_ptr<reactor::Subscription> events;
    for (int i = 0; i < 100 && !events; ++i) {
        events = engine.events().subscribe(outcome.session_id, 0);
        if (!events) std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    if (events && !quiet) {
        while (true) {
            auto ev = events->next(std::chrono::milliseconds(100));
            if (ev) {
                std::printf("%s: %s\n", to_string(ev->type), ev->content.c_str());
                std::fflush(stdout);
                continue;
            }
            if (events->ended() || events->dropped()) break;
        }
    }
    engine.wait(outcome.session_id);
    const reactor::Session* session = engine.session(outcome.session_id);
    if (!session) {
        std::fprintf(stderr, "session disappeared\n");
        return 1;
    }
    if (session->status() == reactor::SessionStatus::Done) {
        if (quiet) std::printf("%s\n", session->final_answer().c_str());
        std::printf("cost: $%.6f over %d turns\n", session->cost().dollars(),
                    session->turns_taken());
        return 0;
    }
    std::fprintf(stderr, "task failed: %s\n", session->failure_reason().c_str());
    return 1;
}

int cmd_registry(const std::string& verb, const std::string& arg, const std::string& server) {
    auto url = reactor::parse_url(server);
    if (!url) {
        std::fprintf(stderr, "bad server url: %s\n", server.c_str());
        return 1;
    }
    httplib::Client client(url->host, url->port);
    client.set_connection_timeout(5, 0);
    if (verb == "ls") {
        auto res = client.Get("/registry/tools");
        if (!res) {
            std::fprintf(stderr, "cannot reach %s\n", server.c_str());
            return 1;
        }
        auto j = json::parse(res->body, nullptr, false);
        if (j.is_discarded() || !j.contains("tools")) {
            std::fprintf(stderr, "unexpected response: %s\n", res->body.c_str());
            return 1;
        }
        for (const auto& t : j["tools"])
            std::printf("%s  (%s)\n", t.value("name", std::string{}).c_str(),
                        t.value("endpoint", std::string{}).c_str());
        return 0;
    }
    if (verb == "rm") {
        auto res = client.Delete(("/registry/tools/" + arg).c_str());
        if (!res) {
            std::fprintf(stderr, "cannot reach %s\n", server.c_str());
            return 1;
        }
        if (res->status == 200) {
            std::printf("removed %s\n", arg.c_str());
            return 0;
        }
        std::fprintf(stderr, "remove failed (%d): %s\n", res->status, res->body.c_str());
        return 1;
    }
    // add
    std::string error;
    auto j = read_json_file(arg, error);
    if (!j) {
        std::fprintf(stderr, "%s\n", error.c_str());
        return 1;
    }
    for (const auto& dj : normalize_descriptor_list(*j)) {
        auto res = client.Post("/registry/tools", dj.dump(), "application/json");
        if (!res) {
            std::fprintf(stderr, "cannot reach %s\n", server.c_str());
            return 1;
        }
        if (res->status != 201) {
            std::fprintf(stderr, "registration failed (%d): %s\n", res->status,
                         res->body.c_str());
            return 1;
        }
        std::printf("registered %s\n", dj.value("name", std::string{}).c_str());
    }
    return 0;
}

int cmd_tail(const std::string& session, const std::string& server, std::int64_t from) {
    auto url = reactor::parse_url(server);
    if (!url) {
        std::fprintf(stderr, "bad server url: %s\n", server.c_str());
        return 1;
    }
    httplib::Client client(url->host, url->port);
    client.set_read_timeout(3600, 0);
    reactor::SseParser parser;
    std::string path = "/tasks/" + session + "/events";
    if (from >= 0) path += "?from_seq=" + std::to_string(from);
    auto res = client.Get(path.c_str(), [&](const char* data, size_t len) {
        parser.feed(std::string_view(data, len));
        for (const auto& msg : parser.take_messages()) {
            auto ev = reactor::event_from_sse(msg);
            if (ev)
                std::printf("%llu %s: %s\n", static_cast<unsigned long long>(ev->seq),
                            to_string(ev->type), ev->content.c_str());
            else
                std::printf("%s\n", msg.data.c_str());
            std::fflush(stdout);
        }
        return true;
    });
    if (!res) {
        std::fprintf(stderr, "cannot reach %s\n", server.c_str());
        return 1;
    }
    if (res->status != 200) {
        std::fprintf(stderr, "stream failed (%d)\n", res->status);
        return 1;
    }
    return 0;
}

int cmd_simulate(const fs::path& scenario, std::optional<std::uint64_t> seed,
                 const std::string& out_file) {
    auto result = reactor::run_scenario_file(scenario, seed);
    std::fputs(result.text.c_str(), stdout);
    if (!out_file.empty()) {
        std::ofstream out(out_file);
        out << result.json.dump(2) << "\n";
    }
    return result.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"agent orchestration engine"};
    app.require_subcommand(1);

    std::string host = "127.0.0.1";
    int port = 8674;
    std::string trace_dir, registry_file, backend_file;
    int max_turns = 10;
    bool streaming = false;
    auto* serve = app.add_subcommand("serve", "run the HTTP service");
    serve->add_option("--host", host, "bind address");
    serve->add_option("--port", port, "bind port (0 picks a free port)");
    serve->add_option("--trace-dir", trace_dir, "directory for per-session event logs");
    serve->add_option("--registry", registry_file, "tool descriptor file to preload");
    serve->add_option("--backend", backend_file, "planner backend config file (JSON)");
    serve->add_option("--max-turns", max_turns, "planning turns before forced finalize");
    serve->add_flag("--streaming", streaming, "dispatch tool calls as tokens stream in");

    fs::path taskfile;
    bool quiet = false;
    auto* run = app.add_subcommand("run", "run one task from a taskfile");
    run->add_option("taskfile", taskfile, "task description JSON")->required();
    run->add_flag("--quiet", quiet, "print only the final answer");

    std::string reg_server = "http://127.0.0.1:8674";
    auto* registry = app.add_subcommand("registry", "manage tools on a running service");
    registry->require_subcommand(1);
    std::string add_file;
    auto* reg_add = registry->add_subcommand("add", "register tools from a descriptor file");
    reg_add->add_option("file", add_file, "descriptor JSON file")->required();
    reg_add->add_option("--server", reg_server, "service base url");
    auto* reg_ls = registry->add_subcommand("ls", "list registered tools");
    reg_ls->add_option("--server", reg_server, "service base url");
    std::string rm_name;
    auto* reg_rm = registry->add_subcommand("rm", "deregister a tool");
    reg_rm->add_option("name", rm_name, "tool name")->required();
    reg_rm->add_option("--server", reg_server, "service base url");

    std::string tail_session, tail_server = "http://127.0.0.1:8674";
    std::int64_t tail_from = -1;
    auto* tail = app.add_subcommand("tail", "follow a session's event stream");
    tail->add_option("session", tail_session, "session id")->required();
    tail->add_option("--server", tail_server, "service base url");
    tail->add_option("--from", tail_from, "replay from this sequence number");

    fs::path scenario;
    std::uint64_t sim_seed = 0;
    bool sim_seed_set = false;
    std::string sim_out;
    auto* simulate = app.add_subcommand("simulate", "run a simulation scenario file");
    simulate->add_option("scenario", scenario, "scenario JSON file")->required();
    simulate->add_option("--seed", sim_seed, "override the scenario seed")
        ->each([&](const std::string&) { sim_seed_set = true; });
    simulate->add_option("--out", sim_out, "write the JSON report here");

    CLI11_PARSE(app, argc, argv);

    if (serve->parsed()) {
        std::optional<json> backend_spec;
        fs::path base_dir = ".";
        if (!backend_file.empty()) {
            std::string error;
            auto j = read_json_file(backend_file, error);
            if (!j) {
                std::fprintf(stderr, "%s\n", error.c_str());
                return 1;
            }
            backend_spec = *j;
            base_dir = fs::path(backend_file).has_parent_path()
                           ? fs::path(backend_file).parent_path()
                           : fs::path(".");
        }
        return cmd_serve(host, port, trace_dir, registry_file,
                         backend_spec ? &*backend_spec : nullptr, base_dir, max_turns,
                         streaming);
    }
    if (run->parsed()) return cmd_run(taskfile, quiet);
    if (registry->parsed()) {
        if (reg_add->parsed()) return cmd_registry("add", add_file, reg_server);
        if (reg_ls->parsed()) return cmd_registry("ls", "", reg_server);
        return cmd_registry("rm", rm_name, reg_server);
    }
    if (tail->parsed()) return cmd_tail(tail_session, tail_server, tail_from);
    if (simulate->parsed())
        return cmd_simulate(scenario, sim_seed_set ? std::optional<std::uint64_t>(sim_seed)
                                                   : std::nullopt,
                            sim_out);
    return 1;
}
