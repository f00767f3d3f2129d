#include <doctest.h>

#include <set>

#include "forge/eval.hpp"

using namespace forge;
using namespace forge::eval;

namespace {

constexpr std::array<Setting, 4> kAll = {Setting::S, Setting::TS, Setting::ST, Setting::T};

WorldConfig small_world() {
  WorldConfig c;
  c.n_entities = 4;
  c.n_relations = 4;
  c.n_values = 6;
  c.distractors = 3;
  c.syllables_per_word = 1;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("toy world") {
  const auto w = gen_toy_world(small_world());
  CHECK(w.facts.size() == 16);
  CHECK(w.fact_ids(true).size() == 4);  // one held-out relation per entity
  for (std::uint32_t e = 0; e < 4; ++e) {
    int held = 0;
    for (std::uint32_t r = 0; r < 4; ++r) held += w.fact(e, r).heldout;
    CHECK(held == 1);
  }
  std::set<std::string> words(w.entities.begin(), w.entities.end());
  words.insert(w.relations.begin(), w.relations.end());
  words.insert(w.values.begin(), w.values.end());
  CHECK(words.size() == 4 + 4 + 6);
  std::set<std::string> first_syll;
  for (const auto& v : w.values) first_syll.insert(v.substr(0, 2));
  CHECK(first_syll.size() == 6);
  CHECK(w.sentence(w.facts[0]) ==
        std::vector<std::string>{w.entities[0], w.relations[0], "is", w.values[w.facts[0].value], "."});

  SUBCASE("values are dealt evenly inside each split") {
    for (bool split : {true, false}) {
      std::vector<int> count(6, 0);
      for (auto i : w.fact_ids(split)) ++count[w.facts[i].value];
      CHECK(*std::max_element(count.begin(), count.end()) - *std::min_element(count.begin(), count.end()) <= 1);
    }
  }
  SUBCASE("same seed, same world; other seed, other world") {
    const auto again = gen_toy_world(small_world());
    CHECK(again.entities == w.entities);
    CHECK(again.vocab == w.vocab);
    auto c = small_world();
    c.seed = 6;
    CHECK(gen_toy_world(c).entities != w.entities);
  }
  SUBCASE("documents draw only from their pool") {
    Rng rng(1);
    const auto pool = w.fact_ids(false);
    const auto doc = w.document(pool, rng, "d");
    const auto toks = split_words(doc.text);
    CHECK(toks.size() == 5 * w.config.facts_per_doc);
    for (std::size_t i = 0; i < toks.size(); i += 5) {
      const auto e = std::find(w.entities.begin(), w.entities.end(), toks[i]) - w.entities.begin();
      const auto r = std::find(w.relations.begin(), w.relations.end(), toks[i + 1]) - w.relations.begin();
      const auto& f = w.fact(static_cast<std::uint32_t>(e), static_cast<std::uint32_t>(r));
      CHECK_FALSE(f.heldout);
      CHECK(toks[i + 3] == w.values[f.value]);
    }
  }
  CHECK_THROWS_AS(gen_toy_world([] {
                    auto c = small_world();
                    c.n_values = 1;
                    return c;
                  }()),
                  ConfigError);
}

TEST_CASE("continuation items") {
  const auto w = gen_toy_world(small_world());
  const auto items = make_items(w, true, kAll);
  CHECK(items.size() == 4 * 4 * 3);
  std::size_t k = 0, first_correct = 0;
  for (auto s : kAll)
    for (auto fi : w.fact_ids(true)) {
      std::set<std::vector<TokenId>> distractors;
      for (std::uint32_t d = 0; d < 3; ++d, ++k) {
        const auto& it = items[k];
        CHECK(it.setting == s);
        CHECK(check_item(w, w.facts[fi], it));
        CHECK(it.candidates[0] != it.candidates[1]);
        distractors.insert(it.candidates[1 - it.correct].ids);
        first_correct += it.correct == 0;
        const bool speech_ctx = s == Setting::S || s == Setting::ST;
        CHECK((it.context.ids.front() == special::begin_of_audio) == speech_ctx);
        if (s == Setting::ST) CHECK(it.context.ids.back() == special::end_of_audio);
        if (s == Setting::TS) CHECK(it.context.ids.back() == special::begin_of_audio);
        for (auto id : it.context.ids)
          if (!w.vocab.is_special(id)) CHECK(w.vocab.is_speech(id) == speech_ctx);
      }
      CHECK(distractors.size() == 3);
    }
  CHECK(first_correct > 0);
  CHECK(first_correct < items.size());
  CHECK_THROWS_AS(make_item(w, w.facts[0], w.facts[0].value, Setting::T), Error);

  SUBCASE("items are reproducible and survive json") {
    const auto again = make_items(w, true, kAll);
    for (std::size_t i = 0; i < items.size(); ++i) {
      CHECK(again[i].candidates == items[i].candidates);
      const auto back = ContinuationItem::from_json(items[i].to_json());
      CHECK(back.context == items[i].context);
      CHECK(back.correct == items[i].correct);
      CHECK(back.setting == items[i].setting);
    }
  }
  SUBCASE("check_item rejects a swapped answer") {
    auto bad = items[0];
    bad.correct = 1 - bad.correct;
    CHECK_FALSE(check_item(w, w.facts[w.fact_ids(true)[0]], bad));
  }
}

TEST_CASE("qa items") {
  const auto w = gen_toy_world(small_world());
  const auto qa = make_qa_items(w, true);
  CHECK(qa.size() == 8);
  for (const auto& it : qa) {
    CHECK(it.question_text.size() == 2);
    for (auto id : it.question_speech) CHECK(w.vocab.is_speech(id));
    for (auto id : it.answer) CHECK(w.vocab.is_speech(id) == (it.setting == Setting::S));
    CHECK(ToyQAItem::from_json(it.to_json()).answer == it.answer);
  }
}

TEST_CASE("pick_candidate") {
  const std::vector<std::size_t> n2 = {2, 2};
  CHECK(pick_candidate(std::vector<double>{-1.0, -1.0}, n2, true) == 0);
  CHECK(pick_candidate(std::vector<double>{-3.0, -1.0, -1.0}, std::vector<std::size_t>{1, 1, 1}, false) == 1);
  // equal lengths: normalized and raw agree
  Rng rng(2);
  std::uniform_real_distribution<double> u(-20, 0);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> lp = {u(rng), u(rng), u(rng)};
    const std::vector<std::size_t> n = {4, 4, 4};
    CHECK(pick_candidate(lp, n, true) == pick_candidate(lp, n, false));
  }
  // a per-token shift c moves every normalized score by c
  for (int t = 0; t < 200; ++t) {
    std::vector<double> lp = {u(rng), u(rng), u(rng)}, shifted(3);
    const std::vector<std::size_t> n = {1 + rng() % 5, 1 + rng() % 5, 1 + rng() % 5};
    for (std::size_t i = 0; i < 3; ++i) shifted[i] = lp[i] - 1.5 * static_cast<double>(n[i]);
    CHECK(pick_candidate(lp, n, true) == pick_candidate(shifted, n, true));
  }
  // length normalization changes the pick
  CHECK(pick_candidate(std::vector<double>{-3.0, -4.0}, std::vector<std::size_t>{1, 4}, false) == 0);
  CHECK(pick_candidate(std::vector<double>{-3.0, -4.0}, std::vector<std::size_t>{1, 4}, true) == 1);
}

TEST_CASE("uniform model scores chance") {
  const auto w = gen_toy_world([] {
    auto c = small_world();
    c.n_entities = 40;
    return c;
  }());
  lm::LMConfig cfg;
  cfg.vocab_size = w.vocab.size();
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.ffn_dim = 16;
  cfg.layers = 1;
  cfg.max_seq_len = 32;
  auto p = lm::init_params<double>(cfg);
  std::fill(p.values.begin(), p.values.end(), 0.0);
  const auto items = make_items(w, true, kAll);
  const auto sc = continuation_accuracy(p, items);
  std::size_t first = 0;
  for (const auto& it : items) first += it.correct == 0;
  // every candidate ties, so the pick is always index 0
  std::size_t correct = 0, total = 0;
  for (const auto& s : sc) {
    correct += s.correct;
    total += s.total;
  }
  CHECK(total == items.size());
  CHECK(correct == first);
  const double acc = static_cast<double>(correct) / static_cast<double>(total);
  CHECK(std::abs(acc - 0.5) < 3 * std::sqrt(0.25 / static_cast<double>(total)));

  SUBCASE("qa over a zero model answers nothing") {
    const auto qa = qa_accuracy(p, make_qa_items(w, true), w.vocab, 4);
    CHECK(qa[0].total == 40);
    CHECK(qa[0].correct == 0);
  }
}

TEST_CASE("SettingScore") {
  SettingScore s{50, 100};
  CHECK(s.accuracy() == doctest::Approx(0.5));
  CHECK(s.ci95() == doctest::Approx(1.96 * 0.05));
  CHECK(SettingScore{}.accuracy() == 0.0);
  Scores all{};
  all[1] = s;
  const auto j = scores_json(all);
  CHECK(j.size() == 1);
  CHECK(j.at("TS").at("correct") == 50);
  CHECK(setting_from_name("ST") == Setting::ST);
  CHECK_THROWS(setting_from_name("X"));
}

TEST_CASE("dialogue templates") {
  const std::vector<TokenId> instr = {40, 41, 42}, text = {12, 13}, speech = {50, 51};
  SUBCASE("direct") {
    const auto d = format_dialogue(instr, DialogueMode::direct, {}, speech);
    CHECK(d.ids == std::vector<TokenId>{special::system, special::user, special::begin_of_audio, 40, 41, 42,
                                        special::end_of_audio, special::assistant, special::begin_of_audio, 50, 51,
                                        special::end_of_audio});
    const auto p = parse_dialogue(d.ids);
    REQUIRE(p);
    CHECK(p->mode == DialogueMode::direct);
    CHECK(p->instruction == instr);
    CHECK(p->speech_response == speech);
    CHECK(p->text_response.empty());
  }
  SUBCASE("text guided") {
    const auto d = format_dialogue(instr, DialogueMode::text_guided, text, speech);
    const auto p = parse_dialogue(d.ids);
    REQUIRE(p);
    CHECK(p->mode == DialogueMode::text_guided);
    CHECK(p->text_response == text);
    CHECK(p->speech_response == speech);
  }
  SUBCASE("open prompt ends at the assistant marker") {
    const auto d = format_dialogue(instr, DialogueMode::direct);
    CHECK(d.ids.back() == special::assistant);
    const auto p = parse_dialogue(d.ids);
    REQUIRE(p);
    CHECK(p->speech_response.empty());
  }
  SUBCASE("malformed") {
    CHECK_FALSE(parse_dialogue(std::vector<TokenId>{special::user, 1, 2, 3, 4}));
    CHECK_FALSE(parse_dialogue(std::vector<TokenId>{special::system, special::user, special::begin_of_audio,
                                                    special::end_of_audio, special::assistant}));
    auto d = format_dialogue(instr, DialogueMode::direct, {}, speech).ids;
    d.pop_back();
    CHECK_FALSE(parse_dialogue(d));
    CHECK_THROWS_AS(format_dialogue({}, DialogueMode::direct), Error);
  }
}

TEST_CASE("experiment config") {
  ExperimentConfig c;
  c.world = small_world();
  c.interleaved_rows = 500;
  c.speech_only_control = true;
  c.seed = 9;
  const auto back = ExperimentConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.world == c.world);
  CHECK(back.interleaved_rows == std::optional<std::size_t>(500));
  CHECK(back.speech_only_control);
  CHECK(axis_from_name(axis_name(Axis::eta)) == Axis::eta);
}

TEST_CASE("experiment data and a short run") {
  ExperimentConfig c;
  c.world = small_world();
  c.world.n_entities = 8;
  c.sources = {40, 80, 4, 10, 10};
  c.interleave.eta = 0.5;
  c.mix.seq_len = 32;
  c.mix.batch_rows = 8;
  c.interleaved_rows = 80;
  c.lm.layers = 1;
  c.lm.dim = 16;
  c.lm.heads = 2;
  c.lm.ffn_dim = 32;
  c.lm.max_seq_len = 32;
  c.seed = 3;
  const auto d = build_experiment_data(c);
  CHECK(d.sources.size() == 5);
  const auto rep = report_mixture(d.schedule, d.batches);
  CHECK(rep.text_row_share() == doctest::Approx(0.3).epsilon(0.02));
  for (const auto& b : d.batches)
    for (const auto& r : b.rows)
      for (auto id : r.ids) CHECK(id < d.world.vocab.size());

  SUBCASE("control swaps interleaved rows for speech-only renderings") {
    auto cc = c;
    cc.speech_only_control = true;
    const auto dc = build_experiment_data(cc);
    REQUIRE(dc.schedule.source_rows == d.schedule.source_rows);
    for (std::size_t i = 0; i < dc.sources.size(); ++i) {
      if (dc.sources[i].kind != SourceKind::interleaved) continue;
      for (const auto& doc : dc.sources[i].docs) {
        // one speech span per document: no text content between boa and eoa
        std::size_t boas = std::count(doc.ids.begin(), doc.ids.end(), special::begin_of_audio);
        CHECK(boas == 1);
        for (std::size_t t = 1; t + 1 < doc.ids.size(); ++t) CHECK(dc.world.vocab.is_speech(doc.ids[t]));
      }
    }
  }

  const auto r1 = run_experiment(c);
  const auto r2 = run_experiment(c);
  CHECK_FALSE(r1.diverged);
  CHECK(r1.steps == d.batches.size());
  CHECK(r1.heldout[1].total == 8 * 3);  // one held-out fact per entity
  CHECK(r1.final_loss == r2.final_loss);
  for (std::size_t i = 0; i < kSettings; ++i) CHECK(r1.heldout[i].correct == r2.heldout[i].correct);
  CHECK(r1.cross_modal() == doctest::Approx((r1.heldout[1].accuracy() + r1.heldout[2].accuracy()) / 2));
}
