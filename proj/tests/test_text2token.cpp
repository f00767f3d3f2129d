#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "forge/corpus.hpp"
#include "forge/text2token.hpp"
#include "testutil.hpp"

using namespace forge;

namespace {

// Two-letter consonant-vowel words: one unit each under 2-character chunking.
std::vector<std::string> cv_words(std::size_t n) {
  const std::string cons = "bdfgklmnprstvz", vow = "aeiou";
  std::vector<std::string> out;
  for (char c : cons)
    for (char v : vow)
      if (out.size() < n) out.push_back(std::string{c, v});
  return out;
}

struct Toy {
  Vocab vocab;
  UnitLexicon lex;
};

Toy toy(const std::vector<std::string>& words, DurationModel d = {}) {
  Vocab text = Vocab::specials_only();
  for (const auto& w : words) text.add_word(w);
  auto lex = UnitLexicon::build(words, 4096, d);
  return {Vocab::combine(text, lex.inventory_size()), lex};
}

}  // namespace

TEST_CASE("word_to_units chunks graphemes") {
  const std::vector<std::string> words = {"abcd", "a", "cdab"};
  const auto lex = UnitLexicon::build(words, 100);
  const auto ab = word_to_units("ab", lex), cd = word_to_units("cd", lex);
  REQUIRE(ab.size() == 1);
  REQUIRE(cd.size() == 1);
  CHECK(word_to_units("abcd", lex) == std::vector<std::uint32_t>{ab[0], cd[0]});
  CHECK(word_to_units("a", lex).size() == 1);
  CHECK(word_to_units("cdab", lex) == std::vector<std::uint32_t>{cd[0], ab[0]});
  CHECK(word_to_units("abcd", lex) == word_to_units("abcd", lex));
  CHECK_THROWS_AS(word_to_units("", lex), Error);
}

TEST_CASE("unit inventory respects the cap") {
  Rng rng(2);
  std::vector<std::string> words;
  for (int i = 0; i < 500; ++i) {
    std::string w;
    for (int k = 0; k < 6; ++k) w += static_cast<char>('a' + rng() % 26);
    words.push_back(w);
  }
  for (std::uint32_t cap : {16u, 64u, 4096u}) {
    const auto lex = UnitLexicon::build(words, cap);
    CHECK(lex.inventory_size() <= cap);
    std::set<std::uint32_t> seen;
    for (const auto& w : words)
      for (auto u : word_to_units(w, lex)) seen.insert(u);
    CHECK(seen.size() <= cap);
    CHECK(*seen.rbegin() < lex.inventory_size());
  }
  SUBCASE("unseen chunks hash into the inventory") {
    const auto lex = UnitLexicon::build(words, 50);
    for (auto u : word_to_units("qqqqxx", lex)) CHECK(u < lex.inventory_size());
  }
}

TEST_CASE("lexicon JSON round trip") {
  const auto lex = UnitLexicon::build(cv_words(20), 64, {3, 0.2});
  CHECK(UnitLexicon::from_json(lex.to_json()) == lex);
}

TEST_CASE("synthesize_span") {
  const std::vector<std::string> words = {"abcd"};
  const auto lex = UnitLexicon::build(words, 100, {2, 0.0});
  Rng rng(1);
  const auto s = synthesize_span(words, lex, rng, 50);
  CHECK(s.size() == 4);
  for (auto id : s.ids) CHECK(id >= 50);
  CHECK(s.ids[0] == s.ids[1]);
  CHECK(s.ids[2] == s.ids[3]);
  CHECK(s.ids[0] != s.ids[2]);
  CHECK(synthesize_span({}, lex, rng, 50).empty());

  SUBCASE("same seed, same output") {
    auto l2 = lex;
    l2.set_duration({2, 0.4});
    Rng a(9), b(9);
    const std::vector<std::string> ws = {"abcd", "cdab", "ab"};
    CHECK(synthesize_span(ws, l2, a, 50) == synthesize_span(ws, l2, b, 50));
  }
}

TEST_CASE("mean synthesized length matches units x (d + p)") {
  const auto words = cv_words(70);
  std::vector<std::string> long_words;
  Rng pick(4);
  for (int i = 0; i < 200; ++i) long_words.push_back(words[pick() % 70] + words[pick() % 70] + words[pick() % 70]);
  const auto lex = UnitLexicon::build(long_words, 4096, {2, 0.1});
  Rng rng(4);
  std::size_t units = 0, tokens = 0;
  for (int i = 0; i < 10000; ++i) {
    const std::vector<std::string> w = {long_words[rng() % long_words.size()]};
    units += word_to_units(w[0], lex).size();
    tokens += synthesize_span(w, lex, rng, 0).size();
  }
  const double expected = static_cast<double>(units) * 2.1;
  CHECK(std::abs(static_cast<double>(tokens) - expected) / expected < 0.02);
}

TEST_CASE("larger expansion gives longer output") {
  const auto words = cv_words(30);
  double prev = 0;
  for (std::uint32_t d : {1u, 2u, 4u, 8u}) {
    const auto lex = UnitLexicon::build(words, 4096, {d, 0.1});
    const double e = expected_span_length(words, lex);
    CHECK(e > prev);
    prev = e;
  }
}

TEST_CASE("oracle output stays in the speech range") {
  const auto t = toy(cv_words(40), {2, 0.3});
  const OracleSynthesizer oracle(t.lex, t.vocab.speech_base());
  Rng rng(3);
  const auto words = cv_words(40);
  const auto s = oracle.synthesize(words, rng);
  for (auto id : s.ids) CHECK(t.vocab.is_speech(id));
  // every jittered rendering contains the jitter-free runs
  const auto r = render_speech(words, t.lex, t.vocab.speech_base());
  CHECK(s.size() >= r.size());
}

TEST_CASE("token error rate") {
  const std::vector<TokenId> ref = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  CHECK(token_error_rate(ref, ref) == 0.0);
  auto sub = ref;
  sub[4] = 99;
  CHECK(token_error_rate(ref, sub) == doctest::Approx(0.1));
  CHECK(token_error_rate(ref, {}) == 1.0);
  CHECK(token_error_rate(std::vector<TokenId>{1}, std::vector<TokenId>{2, 3, 4}) == 3.0);
  CHECK_THROWS_AS(token_error_rate({}, ref), Error);
  CHECK(levenshtein(std::vector<TokenId>{1, 2, 3}, std::vector<TokenId>{2, 3}) == 1);

  SUBCASE("random hypotheses sit near 1 - 1/V") {
    const std::uint32_t V = 1000;
    Rng rng(12);
    double sum = 0;
    const int trials = 5000;
    for (int t = 0; t < trials; ++t) {
      std::vector<TokenId> r(10), h(10);
      for (auto& x : r) x = static_cast<TokenId>(rng() % V);
      for (auto& x : h) x = static_cast<TokenId>(rng() % V);
      sum += token_error_rate(r, h);
    }
    CHECK(sum / trials == doctest::Approx(1.0 - 1.0 / V).epsilon(0.01));
  }
}

TEST_CASE("t2t rows put targets on speech and eoa only") {
  const auto t = toy(cv_words(10));
  const auto pairs = make_parallel_pairs(std::vector<std::string>{"ba be", "bi"}, t.vocab, t.lex, 1);
  REQUIRE(pairs.size() == 2);
  const auto row = t2t_row(pairs[0]);
  REQUIRE(row.size() == 2 + 1 + 4 + 1);
  CHECK(row.loss_mask == std::vector<std::uint8_t>{0, 0, 0, 1, 1, 1, 1, 1});
  CHECK(row.ids[2] == special::begin_of_audio);
  CHECK(row.ids.back() == special::end_of_audio);
}

TEST_CASE("t2t loss ignores logits at text positions") {
  const auto t = toy(cv_words(10));
  const auto pairs = make_parallel_pairs(std::vector<std::string>{"ba be bi", "bo bu"}, t.vocab, t.lex, 1);
  lm::LMConfig cfg;
  cfg.vocab_size = t.vocab.size();
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.ffn_dim = 32;
  cfg.max_seq_len = 32;
  cfg.seed = 3;
  const auto p = lm::init_params<double>(cfg);
  Rng rng(1);
  const auto b = t2t_batch(pairs, 4, rng);
  const auto logits = lm::forward(p, b.tokens, b.rows, b.seq_len);
  const std::size_t V = cfg.vocab_size;

  // masked NLL from raw logits, with noise added at every position whose
  // next token is not a target
  auto masked_nll = [&](double noise_scale) {
    Rng nr(77);
    std::normal_distribution<double> noise(0.0, noise_scale);
    double total = 0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < b.rows; ++r)
      for (std::size_t t = 0; t + 1 < b.seq_len; ++t) {
        const bool target = b.mask[r * b.seq_len + t + 1];
        std::vector<double> z(logits.begin() + (r * b.seq_len + t) * V, logits.begin() + (r * b.seq_len + t + 1) * V);
        if (!target) {
          for (auto& x : z) x += noise(nr);
          continue;
        }
        double mx = *std::max_element(z.begin(), z.end()), s = 0;
        for (auto x : z) s += std::exp(x - mx);
        total += -(z[b.tokens[r * b.seq_len + t + 1]] - mx - std::log(s));
        ++n;
      }
    return total / static_cast<double>(n);
  };
  const double base = lm::loss_only(p, b);
  CHECK(masked_nll(0.0) == doctest::Approx(base).epsilon(1e-9));
  CHECK(masked_nll(5.0) == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("t2t memorizes a single pair") {
  const auto t = toy(cv_words(10));
  const auto pairs = make_parallel_pairs(std::vector<std::string>{"ba be bi"}, t.vocab, t.lex, 1);
  lm::LMConfig cfg;
  cfg.vocab_size = t.vocab.size();
  cfg.dim = 32;
  cfg.heads = 2;
  cfg.ffn_dim = 64;
  cfg.max_seq_len = 16;
  cfg.seed = 5;
  lm::TrainConfig tc;
  tc.steps = 300;
  tc.batch_size = 2;
  tc.weight_decay = 0;
  const auto res = train_t2t(pairs, cfg, tc, 5);
  REQUIRE_FALSE(res.diverged);
  CHECK(res.history.back().loss < 0.01);
  const LearnedSynthesizer synth(res.params, t.vocab, 16);
  Rng rng(0);
  const std::vector<std::string> ws = {"ba", "be", "bi"};
  CHECK(synth.synthesize(ws, rng) == pairs[0].speech);
}

TEST_CASE("learned t2t beats the random baseline on held-out sentences") {
  const auto words = cv_words(16);
  const auto t = toy(words);
  Rng rng(8);
  std::vector<std::string> sentences;
  for (int i = 0; i < 400; ++i) {
    std::string s;
    const int n = 1 + static_cast<int>(rng() % 3);
    for (int k = 0; k < n; ++k) s += (k ? " " : "") + words[rng() % words.size()];
    sentences.push_back(s);
  }
  const auto pairs = make_parallel_pairs(sentences, t.vocab, t.lex, 8);
  const std::span<const ParallelPair> held(pairs.data(), 40), train(pairs.data() + 40, pairs.size() - 40);
  lm::LMConfig cfg;
  cfg.vocab_size = t.vocab.size();
  cfg.dim = 32;
  cfg.heads = 2;
  cfg.ffn_dim = 64;
  cfg.max_seq_len = 24;
  cfg.seed = 8;
  lm::TrainConfig tc;
  tc.steps = 400;
  tc.batch_size = 16;
  const auto res = train_t2t(train, cfg, tc, 8);
  REQUIRE_FALSE(res.diverged);
  const LearnedSynthesizer synth(res.params, t.vocab, 16);
  double ter = 0;
  for (const auto& p : held) {
    const auto ws = split_words(decode_text(p.text.ids, t.vocab));
    ter += token_error_rate(render_speech(ws, t.lex, t.vocab.speech_base()).ids, synth.synthesize(ws, rng).ids);
  }
  ter /= static_cast<double>(held.size());
  const double baseline = 1.0 - 1.0 / t.vocab.speech_size();
  MESSAGE("held-out TER " << ter << " vs random " << baseline);
  CHECK(ter < 0.5 * baseline);
}

TEST_CASE("train_t2t rejects bad pairs") {
  const auto t = toy(cv_words(4));
  lm::LMConfig cfg;
  cfg.vocab_size = t.vocab.size();
  std::vector<ParallelPair> empty_side = {{TokenSequence({special::count}), TokenSequence()}};
  CHECK_THROWS_AS(train_t2t(empty_side, cfg, {}, 0), Error);
  CHECK_THROWS_AS(train_t2t({}, cfg, {}, 0), Error);
}

TEST_CASE("TER by span length") {
  CHECK(TerByLength::bucket(1) == 0);
  CHECK(TerByLength::bucket(2) == 0);
  CHECK(TerByLength::bucket(3) == 1);
  CHECK(TerByLength::bucket(10) == 2);
  CHECK(TerByLength::bucket(11) == 3);
  CHECK(TerByLength::bucket(21) == 4);
  TerByLength t;
  t.add(1, 0.5);
  t.add(2, 0.0);
  t.add(30, 1.0);
  const auto j = t.to_json();
  CHECK(j.size() == 2);
  CHECK(j.at("1-2").at("spans") == 2);
  CHECK(j.at("1-2").at("ter").get<double>() == doctest::Approx(0.25));
  CHECK(j.at("21+").at("ter").get<double>() == 1.0);
}
