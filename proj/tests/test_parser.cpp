#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "reactor/action.hpp"
#include "reactor/parser.hpp"

using namespace reactor;

namespace {

PlannerOutput parse(std::string_view text) { return parse_planner_output(text, 7); }

Action call(std::string tool, std::vector<std::pair<std::string, Value>> args = {},
            CallMode mode = CallMode::Blocking) {
    Action a;
    a.tool = std::move(tool);
    a.args = std::move(args);
    a.mode = mode;
    a.group = 7;
    return a;
}

}  // namespace

TEST_CASE("thought plus single call") {
    auto out = parse("Thought: need data\nAction: Search(query=\"cats\")");
    REQUIRE_FALSE(out.malformed());
    REQUIRE(out.thought.has_value());
    CHECK(*out.thought == "need data");
    REQUIRE(out.actions.size() == 1);
    CHECK(out.actions[0] == call("Search", {{"query", Value{std::string("cats")}}}));
    CHECK_FALSE(out.final_answer.has_value());
}

TEST_CASE("action without a thought") {
    auto out = parse("Action: Fetch(id=3)");
    REQUIRE_FALSE(out.malformed());
    CHECK_FALSE(out.thought.has_value());
    REQUIRE(out.actions.size() == 1);
    CHECK(out.actions[0] == call("Fetch", {{"id", Value{std::int64_t{3}}}}));
}

TEST_CASE("final answer with and without thought") {
    auto out = parse("Thought: done\nFinal Answer: the result is 42");
    REQUIRE_FALSE(out.malformed());
    REQUIRE(out.final_answer.has_value());
    CHECK(*out.final_answer == "the result is 42");
    CHECK(out.actions.empty());

    auto bare = parse("Final Answer:   trimmed   ");
    REQUIRE(bare.final_answer.has_value());
    CHECK(*bare.final_answer == "trimmed");
    CHECK_FALSE(bare.thought.has_value());
}

TEST_CASE("blank lines before directives are skipped") {
    auto out = parse("\n  \n\nThought: x\n\nAction: A()");
    REQUIRE_FALSE(out.malformed());
    CHECK(*out.thought == "x");
    REQUIRE(out.actions.size() == 1);
    CHECK(out.actions[0].tool == "A");
}

TEST_CASE("content after the directive line is ignored") {
    auto out = parse("Action: A(x=1)\nObservation: made-up text\nFinal Answer: fake");
    REQUIRE_FALSE(out.malformed());
    REQUIRE(out.actions.size() == 1);
    CHECK_FALSE(out.final_answer.has_value());

    auto fin = parse("Final Answer: real\nAction: B()");
    REQUIRE_FALSE(fin.malformed());
    CHECK(*fin.final_answer == "real");
    CHECK(fin.actions.empty());
}

TEST_CASE("all five argument types round-trip") {
    auto out = parse("Action: T(s=\"a b\", i=-7, n=2.5, b=true, l=[\"x\", \"y\"])");
    REQUIRE_FALSE(out.malformed());
    REQUIRE(out.actions.size() == 1);
    const Action& a = out.actions[0];
    CHECK(*a.find_arg("s") == Value{std::string("a b")});
    CHECK(*a.find_arg("i") == Value{std::int64_t{-7}});
    CHECK(*a.find_arg("n") == Value{2.5});
    CHECK(*a.find_arg("b") == Value{true});
    CHECK(*a.find_arg("l") == Value{std::vector<std::string>{"x", "y"}});
}

TEST_CASE("numeric literals split into integers and doubles") {
    auto out = parse("Action: T(a=2, b=2.0, c=2e3, d=+5, e=-0.125)");
    REQUIRE_FALSE(out.malformed());
    const Action& a = out.actions[0];
    CHECK(std::holds_alternative<std::int64_t>(*a.find_arg("a")));
    CHECK(std::holds_alternative<double>(*a.find_arg("b")));
    CHECK(std::get<double>(*a.find_arg("c")) == 2000.0);
    CHECK(std::get<std::int64_t>(*a.find_arg("d")) == 5);
    CHECK(std::get<double>(*a.find_arg("e")) == -0.125);
}

TEST_CASE("string escapes decode") {
    auto out = parse(R"(Action: T(s="line\nbreak \"quoted\" tab\t back\\slash"))");
    REQUIRE_FALSE(out.malformed());
    CHECK(std::get<std::string>(*out.actions[0].find_arg("s")) ==
          "line\nbreak \"quoted\" tab\t back\\slash");
}

TEST_CASE("multiple calls and background markers") {
    auto out = parse("Action: A(x=1) && B(y=2) && C()");
    REQUIRE_FALSE(out.malformed());
    REQUIRE(out.actions.size() == 3);
    for (const auto& a : out.actions) CHECK(a.mode == CallMode::Blocking);
    CHECK(out.actions[2].tool == "C");

    auto bg = parse("Action: Long(x=1) &");
    REQUIRE_FALSE(bg.malformed());
    REQUIRE(bg.actions.size() == 1);
    CHECK(bg.actions[0].mode == CallMode::Background);

    auto mixed = parse("Action: A() & && B()");
    REQUIRE_FALSE(mixed.malformed());
    REQUIRE(mixed.actions.size() == 2);
    CHECK(mixed.actions[0].mode == CallMode::Background);
    CHECK(mixed.actions[1].mode == CallMode::Blocking);
}

TEST_CASE("every call on a line shares the group id") {
    auto out = parse_planner_output("Action: A() && B() &", 42);
    REQUIRE(out.actions.size() == 2);
    CHECK(out.actions[0].group == 42);
    CHECK(out.actions[1].group == 42);
}

TEST_CASE("malformed inputs carry errors and keep the decided prefix") {
    auto empty = parse("");
    CHECK(empty.malformed());
    CHECK(*empty.parse_error == "planner output is empty");

    auto lonely = parse("Thought: just thinking");
    CHECK(lonely.malformed());
    CHECK(*lonely.parse_error == "thought line without an action or final answer");

    auto twice = parse("Thought: a\nThought: b\nAction: A()");
    CHECK(twice.malformed());
    CHECK(*twice.parse_error == "multiple thought lines");

    auto junk = parse("I will now search the web.");
    CHECK(junk.malformed());
    CHECK(*junk.parse_error == "expected a Thought, Action, or Final Answer line");

    auto unterminated = parse("Action: A(x=\"oops");
    CHECK(unterminated.malformed());

    auto noparen = parse("Action: A(x=1");
    CHECK(noparen.malformed());

    auto nocall = parse("Action:   ");
    CHECK(nocall.malformed());
    CHECK(*nocall.parse_error == "action line contains no calls");

    auto straggler = parse("Action: A() && ");
    CHECK(straggler.malformed());
    CHECK(*straggler.parse_error == "trailing separator without a call");
    CHECK(straggler.actions.size() == 1);  // A() was decided before the violation

    auto stray = parse("Action: A() & & B()");
    CHECK(stray.malformed());
    CHECK(stray.actions.size() == 1);

    auto adjacent = parse("Action: A() B()");
    CHECK(adjacent.malformed());

    auto overflow = parse("Action: A(x=9223372036854775808)");
    CHECK(overflow.malformed());

    auto bareword = parse("Action: A(x=yes)");
    CHECK(bareword.malformed());

    auto mixed_list = parse("Action: A(x=[\"a\", 3])");
    CHECK(mixed_list.malformed());

    auto unknown_shape = parse("Action: A(x={\"k\":1})");
    CHECK(unknown_shape.malformed());
}

TEST_CASE("large integers survive exactly") {
    auto out = parse("Action: T(lo=-9223372036854775808, hi=9223372036854775807)");
    REQUIRE_FALSE(out.malformed());
    CHECK(std::get<std::int64_t>(*out.actions[0].find_arg("lo")) ==
          std::numeric_limits<std::int64_t>::min());
    CHECK(std::get<std::int64_t>(*out.actions[0].find_arg("hi")) ==
          std::numeric_limits<std::int64_t>::max());
}

// ---- streaming ----------------------------------------------------------------

TEST_CASE("stream parser emits calls at their decision points") {
    std::vector<Action> seen;
    StreamParser sp(7, [&](const Action& a) { seen.push_back(a); });
    sp.feed("Thought: split across ");
    sp.feed("chunks\nAction: First(x=1)");
    CHECK(seen.empty());  // suffix undecided: could still be '&' or '&&'
    sp.feed(" && ");
    REQUIRE(seen.size() == 1);  // separator decided the first call
    CHECK(seen[0].tool == "First");
    sp.feed("Second(y=\"z\") &");
    CHECK(seen.size() == 1);  // lone '&' at buffer end: could be '&&'
    sp.feed("\ndiscarded trailer");
    auto out = sp.finish();
    REQUIRE_FALSE(out.malformed());
    REQUIRE(seen.size() == 2);
    CHECK(seen[1].mode == CallMode::Background);
    REQUIRE(out.actions.size() == 2);
    CHECK(out.actions[0] == seen[0]);
    CHECK(out.actions[1] == seen[1]);
}

TEST_CASE("stream parser flushes the last call at finish") {
    std::vector<Action> seen;
    StreamParser sp(1, [&](const Action& a) { seen.push_back(a); });
    sp.feed("Action: Only(x=1)");
    CHECK(seen.empty());
    auto out = sp.finish();
    CHECK(seen.size() == 1);
    CHECK(out.actions.size() == 1);
}

TEST_CASE("aborted streams keep emitted calls and report the interruption") {
    std::vector<Action> seen;
    StreamParser sp(1, [&](const Action& a) { seen.push_back(a); });
    sp.feed("Action: A(x=1) && B(y=2) && C(z=");
    REQUIRE(seen.size() == 2);
    auto out = sp.abort("connection reset");
    CHECK(out.malformed());
    CHECK(*out.parse_error == "connection reset");
    CHECK(out.actions.size() == 2);
}

TEST_CASE("stream parser never emits from malformed or final outputs") {
    std::vector<Action> seen;
    StreamParser sp(1, [&](const Action& a) { seen.push_back(a); });
    sp.feed("Final Answer: all done");
    auto out = sp.finish();
    CHECK(seen.empty());
    CHECK(*out.final_answer == "all done");

    StreamParser sp2(1, [&](const Action& a) { seen.push_back(a); });
    sp2.feed("complete nonsense\nAction: A()");
    auto bad = sp2.finish();
    CHECK(seen.empty());
    CHECK(bad.malformed());
}

// ---- fuzzed round-trips ---------------------------------------------------------

namespace {

struct Fuzzer {
    std::mt19937_64 rng;
    explicit Fuzzer(std::uint64_t seed) : rng(seed) {}

    int pick(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

    std::string ident() {
        static const char* first = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_";
        static const char* rest =
            "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_0123456789";
        std::string s;
        s.push_back(first[pick(0, 52)]);
        int len = pick(0, 9);
        for (int i = 0; i < len; ++i) s.push_back(rest[pick(0, 62)]);
        return s;
    }

    std::string text() {
        // Hostile characters on purpose: quotes, escapes, separators, parens.
        static const std::string charset =
            " abcXYZ019.,()[]{}&&=\"\\\n\t\r:;!?%$#@'`~^|<>ншд日本";
        std::string s;
        int len = pick(0, 24);
        for (int i = 0; i < len; ++i) s.push_back(charset[pick(0, (int)charset.size() - 1)]);
        return s;
    }

    Value value() {
        switch (pick(0, 4)) {
            case 0: return Value{text()};
            case 1: {
                std::uniform_int_distribution<std::int64_t> d(
                    std::numeric_limits<std::int64_t>::min(),
                    std::numeric_limits<std::int64_t>::max());
                return Value{d(rng)};
            }
            case 2: {
                switch (pick(0, 3)) {
                    case 0: return Value{0.5};
                    case 1: return Value{-1.25e-3};
                    case 2: return Value{std::uniform_real_distribution<double>(-1e6, 1e6)(rng)};
                    default: return Value{1e300};
                }
            }
            case 3: return Value{pick(0, 1) == 1};
            default: {
                std::vector<std::string> items;
                int n = pick(0, 4);
                for (int i = 0; i < n; ++i) items.push_back(text());
                return Value{items};
            }
        }
    }

    Action action(std::uint64_t group) {
        Action a;
        a.tool = ident();
        int n = pick(0, 4);
        for (int i = 0; i < n; ++i) a.args.emplace_back(ident(), value());
        a.mode = pick(0, 3) == 0 ? CallMode::Background : CallMode::Blocking;
        a.group = group;
        return a;
    }

    // A well-formed planner response plus its expected parse.
    std::pair<std::string, PlannerOutput> sample(std::uint64_t group) {
        PlannerOutput expected;
        std::string raw;
        if (pick(0, 2) == 0) raw += "\n";
        if (pick(0, 1) == 1) {
            std::string th = "checking source " + ident();
            expected.thought = th;
            raw += "Thought: " + th + "\n";
        }
        if (pick(0, 3) == 0) {
            std::string fin = "answer " + ident();
            expected.final_answer = fin;
            raw += "Final Answer: " + fin;
            if (pick(0, 1) == 1) raw += "\nleftover text";
        } else {
            int n = pick(1, 4);
            for (int i = 0; i < n; ++i) expected.actions.push_back(action(group));
            raw += render_action_line(expected.actions);
            if (pick(0, 1) == 1) raw += "\nObservation: hallucinated";
        }
        return {raw, expected};
    }
};

}  // namespace

TEST_CASE("ten thousand fuzzed renders parse back exactly") {
    Fuzzer fz(20260816);
    int divergences = 0;
    for (int i = 0; i < 10000; ++i) {
        auto [raw, expected] = fz.sample(9);
        auto out = parse_planner_output(raw, 9);
        bool same = !out.malformed() && out.thought == expected.thought &&
                    out.final_answer == expected.final_answer &&
                    out.actions == expected.actions;
        if (!same) {
            ++divergences;
            if (divergences <= 3) {
                UNSCOPED_INFO("raw: " << raw);
                if (out.parse_error) UNSCOPED_INFO("error: " << *out.parse_error);
            }
        }
    }
    CHECK(divergences == 0);
}

TEST_CASE("streamed parsing matches batch parsing over random chunkings") {
    Fuzzer fz(4242);
    std::mt19937_64 chunk_rng(99);
    int divergences = 0;
    for (int i = 0; i < 2000; ++i) {
        auto [raw, expected] = fz.sample(3);
        std::vector<Action> emitted;
        StreamParser sp(3, [&](const Action& a) { emitted.push_back(a); });
        size_t pos = 0;
        while (pos < raw.size()) {
            size_t n = 1 + chunk_rng() % 7;
            n = std::min(n, raw.size() - pos);
            sp.feed(std::string_view(raw).substr(pos, n));
            pos += n;
        }
        auto streamed = sp.finish();
        auto batch = parse_planner_output(raw, 3);
        bool same = streamed.thought == batch.thought &&
                    streamed.final_answer == batch.final_answer &&
                    streamed.actions == batch.actions &&
                    streamed.parse_error == batch.parse_error && emitted == batch.actions;
        if (!same) {
            ++divergences;
            if (divergences <= 3) UNSCOPED_INFO("raw: " << raw);
        }
    }
    CHECK(divergences == 0);
}

TEST_CASE("character-by-character streaming emits every call exactly once") {
    Fuzzer fz(777);
    for (int i = 0; i < 300; ++i) {
        auto [raw, expected] = fz.sample(5);
        std::vector<Action> emitted;
        StreamParser sp(5, [&](const Action& a) { emitted.push_back(a); });
        for (char c : raw) sp.feed(std::string_view(&c, 1));
        auto out = sp.finish();
        CHECK(emitted == out.actions);
        CHECK(out.actions == expected.actions);
    }
}
