#include <doctest.h>

#include "caddi/config.hpp"

using namespace caddi;

TEST_CASE("defaults and overrides") {
  RunConfig c;
  CHECK(c.get_int("T") > 0);
  CHECK(c.get_int("window") == 5);
  c.parse_text("# comment\nT = 8\n\nkernel = uniform  # trailing\n");
  CHECK(c.get_int("T") == 8);
  CHECK(c.get("kernel") == "uniform");
  CHECK(c.explicitly_set("T"));
  CHECK_FALSE(c.explicitly_set("window"));
  c.set("T", "12");
  CHECK(c.schedule().T == 12);
}

TEST_CASE("bad configs are usage errors") {
  RunConfig c;
  CHECK_THROWS_AS(c.parse_text("nonsense = 1\n"), UsageError);
  CHECK_THROWS_AS(c.parse_text("just a line\n"), UsageError);
  CHECK_THROWS_AS(c.set("bogus", "1"), UsageError);
  c.set("T", "abc");
  CHECK_THROWS_AS(c.get_int("T"), UsageError);
  c.set("kernel", "gaussian");
  CHECK_THROWS_AS(c.setup(), UsageError);
}

TEST_CASE("typed builders") {
  RunConfig c;
  c.parse_text("attention = token_causal\nautoregressive = true\nrecon = literal\nwindow = 3\n");
  const DenoiseSetup s = c.setup();
  CHECK(s.context.attention == MaskMode::token_causal);
  CHECK(s.context.autoregressive);
  CHECK(s.recon == ReconWeight::literal);
  CHECK(s.context.window == 3);
  c.parse_text("layers = 1\nd_model = 32\nheads = 2\n");
  const ModelConfig m = c.model(9);
  CHECK(m.n_layers == 1);
  CHECK(m.vocab_augmented == 9);
  c.parse_text("train_steps = 50\n");
  CHECK(c.train_config(9).warmup_steps <= 50);
  c.parse_text("verify = threshold\np_min = 0.5\ngamma = 2\n");
  const SamplerConfig sc = c.sampler_config();
  CHECK(sc.verify == VerifyPolicy::threshold);
  CHECK(sc.p_min == 0.5);
  CHECK(sc.gamma == 2.0);
}

TEST_CASE("resolved config reparses to the same values") {
  RunConfig a;
  a.parse_text("T = 7\nprompt = ab@2\n");
  RunConfig b;
  b.parse_text(a.resolved());
  CHECK(b.resolved() == a.resolved());
}

TEST_CASE("vocabulary and prompt encoding") {
  const Vocabulary v = Vocabulary::build("ab c\n\xC3\xA9");
  const Vocabulary back = decode_symbols(encode_symbols(v));
  CHECK(back == v);
  const auto p = parse_prompt("ab@3", v);
  REQUIRE(p.size() == 2);
  CHECK(p[0].pos == 3);
  CHECK(p[1].pos == 4);
  CHECK(p[1].id == v.encode("b")[0]);
  CHECK(parse_prompt("", v).empty());
  CHECK_THROWS_AS(parse_prompt("ab", v), UsageError);
  CHECK_THROWS_AS(parse_prompt("zz@0", v), Error);
}
