#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "cas/metrics.hpp"

using namespace cas;

TEST_CASE("rouge: identical and disjoint texts") {
    auto same = rouge_scores("the quick brown fox", "the quick brown fox");
    CHECK(same.rouge1_f1 == Catch::Approx(1.0));
    CHECK(same.rouge2_f1 == Catch::Approx(1.0));
    CHECK(same.rougeL_f1 == Catch::Approx(1.0));

    auto disjoint = rouge_scores("alpha beta gamma", "delta epsilon zeta");
    CHECK(disjoint.rouge1_f1 == 0.0);
    CHECK(disjoint.rouge2_f1 == 0.0);
    CHECK(disjoint.rougeL_f1 == 0.0);
}

TEST_CASE("rouge hand-computed oracle case") {
    // candidate "the cat sat", reference "the cat ran":
    //   R1: overlap 2 of 3 -> P=R=2/3 -> F1=2/3
    //   R2: bigrams {the cat, cat sat} vs {the cat, cat ran}: overlap 1 of 2 -> F1=1/2
    //   RL: LCS "the cat" = 2 -> P=R=2/3 -> F1=2/3
    auto r = rouge_scores("the cat sat", "the cat ran");
    CHECK(r.rouge1_f1 == Catch::Approx(2.0 / 3.0).margin(1e-12));
    CHECK(r.rouge2_f1 == Catch::Approx(0.5).margin(1e-12));
    CHECK(r.rougeL_f1 == Catch::Approx(2.0 / 3.0).margin(1e-12));
}

TEST_CASE("rouge: empty reference yields zero scores") {
    auto r = rouge_scores("anything", "");
    CHECK(r.rouge1_f1 == 0.0);
    CHECK(r.rougeL_f1 == 0.0);
}

TEST_CASE("rouge normalization is case and punctuation insensitive") {
    auto r = rouge_scores("The Cat! Sat.", "the cat sat");
    CHECK(r.rouge1_f1 == Catch::Approx(1.0));
}

TEST_CASE("em_f1 normalization pipeline") {
    auto r = em_f1("The  Answer!", "answer");
    CHECK(r.em == 1.0);
    CHECK(r.f1 == 1.0);

    auto disjoint = em_f1("red blue", "green yellow");
    CHECK(disjoint.em == 0.0);
    CHECK(disjoint.f1 == 0.0);

    // partial overlap "red blue" vs "blue green": overlap 1, P=R=1/2 -> F1=1/2
    auto partial = em_f1("red blue", "blue green");
    CHECK(partial.em == 0.0);
    CHECK(partial.f1 == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("em_f1 metric symmetry sanity: any text matches itself") {
    for (const char* s : {"a plain sentence", "Numbers 123 and CAPS", "with, punctuation; everywhere!"}) {
        auto r = em_f1(s, s);
        CHECK(r.em == 1.0);
        CHECK(r.f1 == 1.0);
        auto rs = rouge_scores(s, s);
        CHECK(rs.rouge1_f1 == Catch::Approx(1.0));
        CHECK(rs.rougeL_f1 == Catch::Approx(1.0));
    }
}

TEST_CASE("stopword-only strings normalize to empty and match") {
    auto r = em_f1("the of and", "a an");
    CHECK(r.em == 1.0);
    CHECK(r.f1 == 1.0);
}

TEST_CASE("token_f1 on id sequences") {
    CHECK(token_f1({1, 2, 3}, {1, 2, 3}) == Catch::Approx(1.0));
    CHECK(token_f1({1, 2}, {3, 4}) == 0.0);
    CHECK(token_f1({1, 2}, {2, 3}) == Catch::Approx(0.5));
    CHECK(token_f1({}, {}) == 1.0);
}

TEST_CASE("shipped stopword fixture matches the compiled-in list") {
    auto fixture = load_stopwords(std::string(CAS_SOURCE_DIR) + "/fixtures/stopwords_en.txt");
    const auto& builtin = default_stopwords();
    REQUIRE(fixture.size() == builtin.size());
    for (const auto& w : builtin) CHECK(fixture.count(w) == 1);
}

TEST_CASE("custom stopword set is honored") {
    std::set<std::string> stops = {"foo"};
    auto r = em_f1("foo bar", "bar", &stops);
    CHECK(r.em == 1.0);
}
