#include <doctest.h>

#include <random>

#include "forge/corpus.hpp"
#include "testutil.hpp"

using namespace forge;
using forge::testing::TempDir;

namespace {

std::vector<TokenSequence> random_seqs(std::size_t n, std::size_t len, std::uint32_t vocab, std::uint64_t seed,
                                       bool masks) {
  Rng rng(seed);
  std::vector<TokenSequence> out(n);
  for (auto& s : out) {
    for (std::size_t i = 0; i < len; ++i) s.ids.push_back(static_cast<TokenId>(rng() % vocab));
    if (masks)
      for (std::size_t i = 0; i < len; ++i) s.loss_mask.push_back(rng() % 2);
  }
  return out;
}

}  // namespace

TEST_CASE("normalize and split") {
  CHECK(normalize_text("  Hello\t\tWORLD \n") == "hello world");
  CHECK(normalize_text("") == "");
  CHECK(split_words("a bb c") == std::vector<std::string>{"a", "bb", "c"});
  CHECK(split_words("").empty());
}

TEST_CASE("load_jsonl") {
  TempDir dir;
  SUBCASE("one field") {
    testing::spit(dir / "c.jsonl", "{\"text\":\"hello world\"}\n");
    const auto c = load_jsonl(dir / "c.jsonl");
    REQUIRE(c.docs.size() == 1);
    CHECK(c.docs[0].text == "hello world");
    CHECK(c.skipped == 0);
  }
  SUBCASE("empty file") {
    testing::spit(dir / "c.jsonl", "");
    const auto c = load_jsonl(dir / "c.jsonl");
    CHECK(c.docs.empty());
    CHECK(c.skipped == 0);
  }
  SUBCASE("three valid lines and one malformed") {
    testing::spit(dir / "c.jsonl",
                  "{\"id\":\"a\",\"text\":\"one\"}\n{\"id\":\"b\",\"text\":\"two\"}\n{not json\n"
                  "{\"id\":\"c\",\"text\":\"Three  Words here\"}\n");
    const auto c = load_jsonl(dir / "c.jsonl");
    REQUIRE(c.docs.size() == 3);
    CHECK(c.skipped == 1);
    CHECK(c.docs[0].id == "a");
    CHECK(c.docs[2].text == "three words here");
  }
  SUBCASE("duplicate ids and blank text are skipped") {
    testing::spit(dir / "c.jsonl",
                  "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n{\"id\":\"b\",\"text\":\"   \"}\n");
    const auto c = load_jsonl(dir / "c.jsonl");
    CHECK(c.docs.size() == 1);
    CHECK(c.skipped == 2);
  }
  SUBCASE("missing file is fatal") { CHECK_THROWS_AS(load_jsonl(dir / "nope.jsonl"), Error); }
  SUBCASE("write then load") {
    const std::vector<TextDoc> docs = {{"d1", "alpha beta"}, {"d2", "gamma"}};
    write_jsonl(dir / "w.jsonl", docs);
    const auto c = load_jsonl(dir / "w.jsonl");
    REQUIRE(c.docs.size() == 2);
    CHECK(c.docs[1].id == "d2");
    CHECK(c.docs[1].text == "gamma");
  }
}

TEST_CASE("fixture corpus loads with its two bad lines counted") {
  const auto c = load_jsonl(std::filesystem::path(FORGE_TEST_DATA_DIR) / "fixture.jsonl");
  CHECK(c.docs.size() == 60);
  CHECK(c.skipped == 2);
}

TEST_CASE("build_text_vocab") {
  const std::vector<TextDoc> docs = {{"1", "a a b"}};
  SUBCASE("specials then frequency order") {
    const auto v = build_text_vocab(docs, 100);
    CHECK(v.size() == special::count + 2);
    CHECK(v.id("a") == special::count);
    CHECK(v.id("b") == special::count + 1);
    CHECK(v.surface(special::pad) != v.surface(special::unk));
  }
  SUBCASE("truncation keeps the most frequent word") {
    const auto v = build_text_vocab(docs, special::count + 1);
    CHECK(v.size() == special::count + 1);
    CHECK(v.find("a").has_value());
    CHECK_FALSE(v.find("b").has_value());
  }
  SUBCASE("ties break by first occurrence") {
    const std::vector<TextDoc> t = {{"1", "z y z y x"}};
    const auto v = build_text_vocab(t, 100);
    CHECK(v.words() == std::vector<std::string>{"z", "y", "x"});
  }
  SUBCASE("min_freq") {
    const auto v = build_text_vocab(docs, 100, 2);
    CHECK(v.words() == std::vector<std::string>{"a"});
  }
  SUBCASE("empty corpus gives specials only") {
    const auto v = build_text_vocab({}, 100);
    CHECK(v.size() == special::count);
    CHECK(v == Vocab::specials_only());
  }
  SUBCASE("1000 synthetic documents build the same vocab twice") {
    Rng rng(3);
    std::vector<TextDoc> many;
    for (int i = 0; i < 1000; ++i) {
      std::string s;
      for (int k = 0; k < 12; ++k) s += (k ? " " : "") + std::string("w") + std::to_string(rng() % 400);
      many.push_back({std::to_string(i), s});
    }
    CHECK(build_text_vocab(many, 300) == build_text_vocab(many, 300));
  }
}

TEST_CASE("combined vocab keeps text and speech ranges disjoint") {
  const auto text = build_text_vocab(std::vector<TextDoc>{{"1", "a b c"}}, 100);
  const auto v = Vocab::combine(text, 7);
  CHECK(v.size() == text.size() + 7);
  CHECK(v.speech_base() == text.size());
  for (TokenId id = 0; id < v.size(); ++id) {
    CHECK(v.is_speech(id) == (id >= text.size()));
    CHECK_FALSE((v.is_speech(id) && v.is_text_content(id)));
  }
  CHECK(v.is_special(special::end_of_audio));
  CHECK_FALSE(v.is_special(v.speech_id(0)));
  CHECK(Vocab::from_json(v.to_json()) == v);
}

TEST_CASE("encode and decode") {
  const auto v = build_text_vocab(std::vector<TextDoc>{{"1", "hello world"}}, 100);
  CHECK(encode_text({"x", "hello world"}, v).ids == std::vector<TokenId>{v.id("hello"), v.id("world")});
  CHECK(encode_text({"x", ""}, v).ids.empty());
  const auto oov = encode_text({"x", "hello there world"}, v);
  REQUIRE(oov.size() == 3);
  CHECK(oov.ids[1] == special::unk);
  CHECK(std::count(oov.ids.begin(), oov.ids.end(), special::unk) == 1);
  CHECK(decode_text(encode_text({"x", "world hello world"}, v).ids, v) == "world hello world");
}

TEST_CASE("shard round trip") {
  TempDir dir;
  const auto seqs = random_seqs(10, 16, 50, 1, true);
  std::vector<std::uint8_t> tags(10);
  for (std::size_t i = 0; i < tags.size(); ++i) tags[i] = static_cast<std::uint8_t>(i % 5 + 1);
  const auto info = write_shard(dir / "a.shard", seqs, 40, 10, 16, tags);
  CHECK(info.count == 10);
  const auto back = read_shard(dir / "a.shard");
  CHECK(back.seqs == seqs);
  CHECK(back.tags == tags);
  CHECK(back.info.text_vocab_size == 40);
  CHECK(back.info.speech_vocab_size == 10);

  SUBCASE("rewriting gives identical bytes") {
    write_shard(dir / "b.shard", back.seqs, 40, 10, 16, back.tags);
    CHECK(testing::slurp(dir / "a.shard") == testing::slurp(dir / "b.shard"));
  }
  SUBCASE("unmasked sequences read back with a full mask") {
    const auto plain = random_seqs(3, 8, 50, 2, false);
    write_shard(dir / "p.shard", plain, 50, 0, 8);
    for (const auto& s : read_shard(dir / "p.shard").seqs) CHECK(s.loss_mask == std::vector<std::uint8_t>(8, 1));
  }
}

TEST_CASE("shard layout matches an independent reader") {
  TempDir dir;
  const auto seqs = random_seqs(3, 5, 30, 4, true);
  write_shard(dir / "s.shard", seqs, 20, 10, 5);
  const auto bytes = testing::slurp(dir / "s.shard");
  // ids, 15 mask bits in 2 bytes, one zero tag per row
  REQUIRE(bytes.size() == kShardHeaderBytes + 3 * 5 * 4 + 2 + 3);
  CHECK(bytes.substr(bytes.size() - 3) == std::string(3, '\0'));
  CHECK(bytes.substr(0, 8) == "FRGSHARD");
  CHECK(testing::le32(bytes, 8) == kShardVersion);
  CHECK(testing::le32(bytes, 12) == 20);
  CHECK(testing::le32(bytes, 16) == 10);
  CHECK(testing::le32(bytes, 20) == 5);
  CHECK(testing::le64(bytes, 24) == 3);
  CHECK(testing::le32(bytes, 32) == testing::crc32_bitwise(bytes, kShardHeaderBytes, bytes.size()));
  CHECK(testing::le32(bytes, 36) == testing::crc32_bitwise(bytes, 0, 36));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t t = 0; t < 5; ++t) {
      const std::size_t k = r * 5 + t;
      CHECK(testing::le32(bytes, kShardHeaderBytes + 4 * k) == seqs[r].ids[t]);
      const auto byte = static_cast<unsigned char>(bytes[kShardHeaderBytes + 60 + k / 8]);
      CHECK(((byte >> (k % 8)) & 1) == seqs[r].loss_mask[t]);
    }
}

TEST_CASE("shard corruption is detected") {
  TempDir dir;
  write_shard(dir / "s.shard", random_seqs(4, 8, 30, 5, true), 30, 0, 8);
  const auto good = testing::slurp(dir / "s.shard");
  SUBCASE("payload byte flipped") {
    auto bad = good;
    bad[kShardHeaderBytes + 9] ^= 0x10;
    testing::spit(dir / "s.shard", bad);
    CHECK_THROWS_WITH_AS(read_shard(dir / "s.shard"), doctest::Contains("checksum"), Error);
  }
  SUBCASE("header byte flipped") {
    auto bad = good;
    bad[13] ^= 0x01;
    testing::spit(dir / "s.shard", bad);
    CHECK_THROWS_WITH_AS(read_shard(dir / "s.shard"), doctest::Contains("checksum"), Error);
  }
  SUBCASE("truncated") {
    testing::spit(dir / "s.shard", good.substr(0, good.size() - 3));
    CHECK_THROWS_AS(read_shard(dir / "s.shard"), Error);
  }
  SUBCASE("wrong version") {
    auto bad = good;
    bad[8] = 9;
    testing::spit(dir / "s.shard", bad);
    CHECK_THROWS_AS(read_shard(dir / "s.shard"), Error);
  }
}

TEST_CASE("empty shard is valid") {
  TempDir dir;
  const auto info = write_shard(dir / "e.shard", std::vector<TokenSequence>{}, 10, 0, 4);
  CHECK(info.count == 0);
  const auto back = read_shard(dir / "e.shard");
  CHECK(back.seqs.empty());
  CHECK(back.info.seq_len == 4);
}

TEST_CASE("write_shard rejects bad input") {
  TempDir dir;
  SUBCASE("wrong length") {
    CHECK_THROWS_AS(write_shard(dir / "x.shard", random_seqs(1, 3, 5, 1, false), 5, 0, 4), Error);
  }
  SUBCASE("id outside the vocab") {
    const std::vector<TokenSequence> s = {TokenSequence({1, 2, 5, 0})};
    CHECK_THROWS_AS(write_shard(dir / "x.shard", s, 5, 0, 4), Error);
  }
}

TEST_CASE("list_shards sorts by name") {
  TempDir dir;
  for (const char* n : {"b.shard", "a.shard", "c.txt"}) write_shard(dir / n, std::vector<TokenSequence>{}, 10, 0, 2);
  const auto l = list_shards(dir.path());
  REQUIRE(l.size() == 2);
  CHECK(l[0].filename() == "a.shard");
  CHECK(l[1].filename() == "b.shard");
}
