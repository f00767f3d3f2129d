#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>

#include "forge/mixer.hpp"

using namespace forge;

namespace {

constexpr TokenId kSpeechBase = 100;

// Content ids only: never pad or sep.
TokenSequence doc_of(std::size_t len, std::uint64_t seed, TokenId lo = special::count, TokenId hi = 99) {
  Rng rng(seed);
  TokenSequence d;
  for (std::size_t i = 0; i < len; ++i) d.ids.push_back(lo + static_cast<TokenId>(rng() % (hi - lo + 1)));
  return d;
}

std::vector<TokenSequence> docs_of(std::size_t n, std::size_t lo, std::size_t hi, std::uint64_t seed,
                                   TokenId id_lo = special::count, TokenId id_hi = 99) {
  Rng rng(seed);
  std::vector<TokenSequence> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(doc_of(lo + rng() % (hi - lo + 1), seed * 1000 + i, id_lo, id_hi));
  return out;
}

ParallelPair pair_of(std::size_t text_len, std::size_t speech_len, std::uint64_t seed) {
  return {doc_of(text_len, seed), doc_of(speech_len, seed + 1, kSpeechBase, kSpeechBase + 50)};
}

}  // namespace

TEST_CASE("pack_sequences") {
  SUBCASE("one doc of seq_len - 1 fills one row with its separator") {
    const auto d = doc_of(7, 1);
    const auto rows = pack_sequences(std::vector<TokenSequence>{d}, 8);
    REQUIRE(rows.size() == 1);
    auto want = d.ids;
    want.push_back(special::sep);
    CHECK(rows[0].ids == want);
    CHECK(rows[0].loss_mask == std::vector<std::uint8_t>(8, 1));
  }
  SUBCASE("two docs that fill two rows exactly leave no padding") {
    const std::vector<TokenSequence> d = {doc_of(5, 2), doc_of(9, 3)};  // 5 + 1 + 9 + 1 = 16
    const auto rows = pack_sequences(d, 8);
    REQUIRE(rows.size() == 2);
    for (const auto& r : rows) CHECK(std::count(r.ids.begin(), r.ids.end(), special::pad) == 0);
  }
  SUBCASE("empty stream gives zero rows") { CHECK(pack_sequences({}, 8).empty()); }
  SUBCASE("padding is never a target") {
    const auto rows = pack_sequences(std::vector<TokenSequence>{doc_of(3, 4)}, 8);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].ids == std::vector<TokenId>{rows[0].ids[0], rows[0].ids[1], rows[0].ids[2], special::sep,
                                              special::pad, special::pad, special::pad, special::pad});
    CHECK(rows[0].loss_mask == std::vector<std::uint8_t>{1, 1, 1, 1, 0, 0, 0, 0});
  }
  SUBCASE("masked docs keep their mask, separator not a target") {
    TokenSequence d({10, 11, 12}, {0, 1, 1});
    const auto rows = pack_sequences(std::vector<TokenSequence>{d}, 4);
    CHECK(rows[0].loss_mask == std::vector<std::uint8_t>{0, 1, 1, 0});
  }
  SUBCASE("every row holds seq_len ids; concatenation is docs joined by separators") {
    const auto d = docs_of(50, 1, 40, 5);
    const auto rows = pack_sequences(d, 16);
    std::vector<TokenId> flat, want;
    for (const auto& r : rows) {
      CHECK(r.size() == 16);
      flat.insert(flat.end(), r.ids.begin(), r.ids.end());
    }
    for (const auto& x : d) {
      want.insert(want.end(), x.ids.begin(), x.ids.end());
      want.push_back(special::sep);
    }
    want.resize(rows.size() * 16, special::pad);
    CHECK(flat == want);
  }
  CHECK_THROWS_AS(pack_sequences({}, 1), ConfigError);
}

TEST_CASE("unpack inverts pack") {
  std::vector<TokenSequence> d = docs_of(30, 1, 25, 6);
  d.push_back(TokenSequence({20, 21, 22}, {0, 0, 1}));
  const auto back = unpack_sequences(pack_sequences(d, 12));
  CHECK(back == d);
  auto rows = pack_sequences(std::vector<TokenSequence>{doc_of(10, 7)}, 6);
  rows[1].ids[4] = 50;  // overwrite the separator
  rows[1].ids[5] = 51;
  CHECK_THROWS_AS(unpack_sequences(rows), Error);
}

TEST_CASE("supervised_pair_format") {
  SUBCASE("tts of 2 text and 3 speech tokens") {
    const auto p = pair_of(2, 3, 1);
    const auto r = supervised_pair_format(p, SourceKind::supervised_tts);
    CHECK(r.loss_mask == std::vector<std::uint8_t>{0, 0, 0, 1, 1, 1, 1});
    CHECK(r.ids[2] == special::begin_of_audio);
    CHECK(r.ids.back() == special::end_of_audio);
  }
  SUBCASE("asr layout, mask sums to the text length, prefix is the speech side") {
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto p = pair_of(1 + s % 5, 1 + s % 7, s * 3);
      const auto r = supervised_pair_format(p, SourceKind::supervised_asr);
      CHECK(static_cast<std::size_t>(std::count(r.loss_mask.begin(), r.loss_mask.end(), 1)) == p.text.size());
      std::size_t k = 0;
      while (k < r.size() && !r.loss_mask[k]) ++k;
      REQUIRE(k == p.speech.size() + 2);
      CHECK(r.ids.front() == special::begin_of_audio);
      CHECK(r.ids[k - 1] == special::end_of_audio);
      CHECK(std::vector<TokenId>(r.ids.begin() + 1, r.ids.begin() + static_cast<std::ptrdiff_t>(k) - 1) ==
            p.speech.ids);
      CHECK(std::vector<TokenId>(r.ids.begin() + static_cast<std::ptrdiff_t>(k), r.ids.end()) == p.text.ids);
    }
  }
  SUBCASE("empty sides are rejected") {
    ParallelPair p = pair_of(2, 3, 1);
    p.speech.ids.clear();
    CHECK_THROWS_AS(supervised_pair_format(p, SourceKind::supervised_asr), Error);
  }
}

TEST_CASE("compose_mixture: 1000 rows") {
  MixtureSpec spec;
  spec.budget_rows = 1000;
  spec.seq_len = 8;
  spec.batch_rows = 10;
  // one doc of seq_len - 1 is one packed row
  std::vector<Source> sources = {
      {"text", SourceKind::text, docs_of(40, 7, 7, 1)},
      {"speech", SourceKind::speech, docs_of(100, 7, 7, 2, kSpeechBase, kSpeechBase + 50)},
      {"asr", SourceKind::supervised_asr, {}},
      {"inter", SourceKind::interleaved, docs_of(40, 7, 7, 3)},
  };
  for (std::uint64_t i = 0; i < 100; ++i)
    sources[2].docs.push_back(supervised_pair_format(pair_of(3, 2, i), SourceKind::supervised_asr));
  const auto sched = compose_mixture(spec, sources);
  CHECK(sched.source_rows == std::vector<std::size_t>{300, 100, 100, 500});
  CHECK(sched.row_source.size() == 1000);
  CHECK(sched.batches() == 100);
  for (std::size_t b = 0; b < sched.batches(); ++b) CHECK(sched.batch_composition(b)[0] == 3);

  SUBCASE("materialized rows carry their source tags") {
    const auto batches = materialize(sched, sources);
    REQUIRE(batches.size() == 100);
    std::size_t r = 0;
    for (const auto& b : batches)
      for (std::size_t i = 0; i < b.rows.size(); ++i, ++r) {
        CHECK(b.rows[i].size() == 8);
        CHECK(b.tags[i] == static_cast<std::uint8_t>(sources[sched.row_source[r]].kind));
      }
    const auto rep = report_mixture(sched, batches);
    CHECK(rep.rows == 1000);
    CHECK(rep.text_rows == 300);
    CHECK(rep.text_row_share() == doctest::Approx(0.3));
  }
  SUBCASE("deterministic") {
    CHECK(materialize(sched, sources)[37].rows == materialize(compose_mixture(spec, sources), sources)[37].rows);
  }
}

TEST_CASE("compose_mixture: infeasible and boundary specs") {
  MixtureSpec spec;
  spec.budget_rows = 100;
  spec.seq_len = 8;
  SUBCASE("one-epoch sources larger than their share") {
    const std::vector<Source> s = {{"text", SourceKind::text, docs_of(5, 7, 7, 1)},
                                   {"speech", SourceKind::speech, docs_of(90, 7, 7, 2)},
                                   {"inter", SourceKind::interleaved, docs_of(5, 7, 7, 3)}};
    // 90 rows need R - round(0.3 R) >= 90: R = 128
    CHECK_THROWS_WITH_AS(compose_mixture(spec, s), doctest::Contains("at least 128"), ConfigError);
  }
  SUBCASE("filler rows without an interleaved source") {
    const std::vector<Source> s = {{"text", SourceKind::text, docs_of(5, 7, 7, 1)}};
    CHECK_THROWS_AS(compose_mixture(spec, s), ConfigError);
  }
  SUBCASE("text ratio 1 is pure text") {
    spec.text_ratio = 1.0;
    const std::vector<Source> s = {{"text", SourceKind::text, docs_of(5, 7, 7, 1)},
                                   {"inter", SourceKind::interleaved, {}},
                                   {"speech", SourceKind::speech, {}}};
    const auto sched = compose_mixture(spec, s);
    CHECK(sched.source_rows == std::vector<std::size_t>{100, 0, 0});
    const std::vector<Source> bad = {{"text", SourceKind::text, docs_of(5, 7, 7, 1)},
                                     {"speech", SourceKind::speech, docs_of(1, 7, 7, 2)}};
    CHECK_THROWS_AS(compose_mixture(spec, bad), ConfigError);
  }
  SUBCASE("spec validation") {
    spec.text_ratio = 1.2;
    CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("text_ratio"), ConfigError);
    spec = {};
    CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("budget_rows"), ConfigError);
    spec.budget_rows = 5;
    CHECK(MixtureSpec::from_json(spec.to_json()) == spec);
  }
}

TEST_CASE("mixture properties over random specs") {
  Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    MixtureSpec spec;
    spec.seq_len = 4 + static_cast<std::uint32_t>(rng() % 30);
    spec.batch_rows = 1 + static_cast<std::uint32_t>(rng() % 20);
    spec.text_ratio = 0.3;
    spec.seed = trial;
    std::vector<Source> sources = {
        {"text", SourceKind::text, docs_of(20, 1, 40, 100 + trial)},
        {"speech", SourceKind::speech, docs_of(rng() % 30, 1, 40, 200 + trial, kSpeechBase, kSpeechBase + 50)},
        {"asr", SourceKind::supervised_asr, {}},
        {"tts", SourceKind::supervised_tts, {}},
        {"inter", SourceKind::interleaved, docs_of(20, 1, 60, 300 + trial)},
    };
    for (std::uint64_t i = 0; i < rng() % 20; ++i) {
      sources[2].docs.push_back(supervised_pair_format(pair_of(1 + i % 4, 2 + i % 5, i), SourceKind::supervised_asr));
      sources[3].docs.push_back(supervised_pair_format(pair_of(1 + i % 3, 1 + i % 6, i), SourceKind::supervised_tts));
    }
    std::size_t fixed = 0;
    for (const auto& s : sources)
      if (is_one_epoch(s.kind)) fixed += pack_sequences(s.docs, spec.seq_len).size();
    spec.budget_rows = budget_for(fixed, 50 + rng() % 200, spec.text_ratio);
    const auto sched = compose_mixture(spec, sources);
    const auto batches = materialize(sched, sources);

    // text share in tokens within seq_len / budget of the ratio, per the row count
    std::size_t text_tok = 0, all_tok = 0;
    std::map<std::uint8_t, std::vector<TokenSequence>> by_kind;
    for (const auto& b : batches) {
      std::size_t text_rows = 0;
      for (std::size_t i = 0; i < b.rows.size(); ++i) {
        const std::size_t n = static_cast<std::size_t>(
            std::count_if(b.rows[i].ids.begin(), b.rows[i].ids.end(), [](TokenId t) { return t != special::pad; }));
        all_tok += n;
        if (b.tags[i] == static_cast<std::uint8_t>(SourceKind::text)) {
          text_tok += n;
          ++text_rows;
        }
        by_kind[b.tags[i]].push_back(b.rows[i]);
        // mask soundness
        for (std::size_t t = 0; t < b.rows[i].size(); ++t) {
          const auto id = b.rows[i].ids[t];
          if (id == special::pad) CHECK_FALSE(b.rows[i].target(t));
          else if (!is_one_epoch(static_cast<SourceKind>(b.tags[i])) || b.tags[i] == static_cast<std::uint8_t>(SourceKind::speech))
            CHECK(b.rows[i].target(t));
        }
      }
      CHECK(std::abs(static_cast<double>(text_rows) - 0.3 * static_cast<double>(b.rows.size())) <= 1.0);
    }
    const double delta = static_cast<double>(spec.seq_len) / static_cast<double>(spec.budget_rows) +
                         static_cast<double>(fixed) / static_cast<double>(spec.budget_rows);
    CHECK(std::abs(static_cast<double>(text_tok) / static_cast<double>(all_tok) - 0.3) <= delta + 0.5 / spec.budget_rows);

    // one-epoch sources come back whole, each document exactly once
    for (std::size_t s = 1; s <= 3; ++s) {
      auto got = unpack_sequences(by_kind[static_cast<std::uint8_t>(sources[s].kind)]);
      auto want = sources[s].docs;
      auto key = [](const TokenSequence& a, const TokenSequence& b) {
        return std::tie(a.ids, a.loss_mask) < std::tie(b.ids, b.loss_mask);
      };
      std::sort(got.begin(), got.end(), key);
      std::sort(want.begin(), want.end(), key);
      CHECK(got == want);
    }
  }
}

TEST_CASE("budget_for") {
  for (std::size_t need : {1u, 7u, 100u, 700u, 12345u}) {
    const auto r = budget_for(need, 0, 0.3);
    CHECK(r - text_rows_for(r, 0.3) == need);
    CHECK(r - 1 - text_rows_for(r - 1, 0.3) < need);
  }
  CHECK(budget_for(0, 0, 0.3) == 0);
  CHECK(text_rows_for(1000, 0.3) == 300);
  CHECK(text_rows_for(5, 0.3) == 2);  // 1.5 rounds up
}
