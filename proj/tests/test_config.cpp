#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "vnode/config.hpp"
#include "vnode/errors.hpp"

using namespace vnode;

TEST_CASE("sections, dotted keys, and comments") {
    const std::string text = R"(
# a comment
top = 1
[train]
epochs = 30          # trailing comment
lr = 1e-3
[model.stage1.discrete]
out = 32
model.direct = yes
)";
    auto cfg = Config::parse_string(text);
    CHECK(cfg.get_int("top") == 1);
    CHECK(cfg.get_int("train.epochs") == 30);
    CHECK(cfg.get_double("train.lr") == doctest::Approx(1e-3));
    CHECK(cfg.get_int("model.stage1.discrete.out") == 32);
    CHECK(cfg.get_bool("model.stage1.discrete.model.direct") == true); // section prefixes apply
}

TEST_CASE("overrides win") {
    auto cfg = Config::parse_string("[train]\nepochs = 30\n");
    cfg.set("train.epochs", "5");
    CHECK(cfg.get_int("train.epochs") == 5);
    cfg.set("train.fresh", "1");
    CHECK(cfg.get_int("train.fresh") == 1);
}

TEST_CASE("typed getter errors") {
    auto cfg = Config::parse_string("a = hello\nb = 2.5\nc = true\nlist = 1, 2.5, -3\n");
    CHECK_THROWS_AS(cfg.get_int("a"), ConfigError);
    CHECK_THROWS_AS(cfg.get_int("b"), ConfigError);
    CHECK_THROWS_AS(cfg.get_bool("b"), ConfigError);
    CHECK_THROWS_AS(cfg.get_str("missing"), ConfigError);
    CHECK(cfg.get_bool("c"));
    CHECK(cfg.get_list("list") == std::vector<double>{1.0, 2.5, -3.0});
    CHECK(cfg.get_int("missing", 9) == 9);
}

TEST_CASE("parse errors carry location") {
    try {
        Config::parse_string("ok = 1\nnot a pair\n", "test.cfg");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("test.cfg:2") != std::string::npos);
    }
    CHECK_THROWS_AS(Config::parse_string("[unterminated\n"), ConfigError);
    CHECK_THROWS_AS(Config::parse_string("= 3\n"), ConfigError);
    CHECK_THROWS_AS(Config::parse_file("does_not_exist.cfg"), ConfigError);
}

TEST_CASE("unconsumed keys are reported") {
    auto cfg = Config::parse_string("[train]\nepochs = 3\ntypo_key = 1\n");
    CHECK(cfg.get_int("train.epochs") == 3);
    auto leftover = cfg.unconsumed();
    REQUIRE(leftover.size() == 1);
    CHECK(leftover[0] == "train.typo_key");
    CHECK(cfg.peek("train.typo_key") == "1"); // peek does not consume
    CHECK(cfg.unconsumed().size() == 1);
}

TEST_CASE("canonical text round-trips") {
    auto cfg = Config::parse_string("[b]\nz = 3\n[a]\ny = 2\nx = 1\n");
    const std::string text = cfg.to_text();
    CHECK(text == "a.x = 1\na.y = 2\nb.z = 3\n");
    auto again = Config::parse_string(text);
    CHECK(again.get_int("a.x") == 1);
    CHECK(again.to_text() == text);
}

TEST_CASE("keys_with_prefix") {
    auto cfg = Config::parse_string("[model]\na = 1\n[train]\nb = 2\n[model.stage1]\nc = 3\n");
    auto keys = cfg.keys_with_prefix("model.");
    CHECK(keys.size() == 2);
}
