#include <doctest.h>

#include "t2i/config.hpp"

using namespace t2i;
using namespace t2i::cfg;

TEST_CASE("defaults validate and survive a json round trip") {
    RunConfig c = defaults();
    CHECK_NOTHROW(c.validate());
    RunConfig back = from_json(to_json(c));
    CHECK(back.llm.hidden_dim == c.llm.hidden_dim);
    CHECK(back.dit.ref_grid == c.dit.ref_grid);
    CHECK(back.edm.sigma_max == c.edm.sigma_max);
    CHECK(back.model_digest() == c.model_digest());
}

TEST_CASE("partial configs overlay onto the defaults") {
    RunConfig c = from_json(R"({"edm": {"n_steps": 12}, "out_dir": "x"})");
    CHECK(c.edm.n_steps == 12);
    CHECK(c.out_dir == "x");
    CHECK(c.llm.hidden_dim == defaults().llm.hidden_dim);
}

TEST_CASE("cross-field invariants are named on failure") {
    RunConfig c = defaults();
    c.vae.latent_channels = 4;  // dit stays 16
    try {
        c.validate();
        CHECK(false);
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("latent_channels") != std::string::npos);
    }
}

TEST_CASE("digest tracks model sections only") {
    RunConfig a = defaults();
    RunConfig b = defaults();
    b.train_dit.total_steps = 123;  // training knob: same digest
    CHECK(a.model_digest() == b.model_digest());
    b.llm.hidden_dim = 64;
    b.dit.hidden_dim = 64;
    CHECK(a.model_digest() != b.model_digest());
}

TEST_CASE("dotted overrides rewrite nested keys") {
    std::string text = to_json(defaults());
    apply_override(text, "edm.n_steps=8");
    apply_override(text, "dit.pe_mode=interpolating");
    apply_override(text, "out_dir=somewhere");
    RunConfig c = from_json(text);
    CHECK(c.edm.n_steps == 8);
    CHECK(c.dit.pe_mode == dit::PeMode::interpolating);
    CHECK(c.out_dir == "somewhere");
    CHECK_THROWS_AS(apply_override(text, "no_equals_sign"), std::invalid_argument);
}
