#include "forge/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <map>
#include <set>

namespace forge::eval {

namespace {

constexpr std::string_view kConsonants = "bdfgklmnprstvz";
constexpr std::string_view kVowels = "aeiou";
constexpr const char* kCopula = "is";
constexpr const char* kStop = ".";

std::vector<TokenId> concat(std::initializer_list<std::span<const TokenId>> parts) {
  std::vector<TokenId> out;
  for (auto p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

std::vector<TokenId> text_ids(const ToyWorld& w, std::span<const std::string> words) {
  return encode_words(words, w.vocab).ids;
}

std::vector<TokenId> speech_ids(const ToyWorld& w, std::span<const std::string> words) {
  return render_speech(words, w.lexicon, w.vocab.speech_base()).ids;
}

bool contains_run(std::span<const TokenId> hay, std::span<const TokenId> needle) {
  if (needle.empty()) return true;
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

}  // namespace

const char* setting_name(Setting s) {
  switch (s) {
    case Setting::S: return "S";
    case Setting::TS: return "TS";
    case Setting::ST: return "ST";
    case Setting::T: return "T";
  }
  return "S";
}

Setting setting_from_name(std::string_view s) {
  for (auto v : {Setting::S, Setting::TS, Setting::ST, Setting::T})
    if (s == setting_name(v)) return v;
  throw ConfigError("eval.settings", "unknown setting '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------

void WorldConfig::validate() const {
  if (n_entities < 4) throw ConfigError("world.n_entities", "must be >= 4");
  if (n_relations < 1) throw ConfigError("world.n_relations", "must be >= 1");
  if (n_values < 2 || n_values > kConsonants.size() * kVowels.size())
    throw ConfigError("world.n_values", "must be in [2, 70]");
  if (!(heldout_fraction >= 0 && heldout_fraction < 1))
    throw ConfigError("world.heldout_fraction", "must be in [0, 1)");
  if (syllables_per_word < 1 || syllables_per_word > 4)
    throw ConfigError("world.syllables_per_word", "must be in [1, 4]");
  if (syllables_per_word == 1 && n_entities + n_relations + n_values > kConsonants.size() * kVowels.size())
    throw ConfigError("world.n_entities", "one-syllable words allow at most 70 words");
  if (facts_per_doc < 1) throw ConfigError("world.facts_per_doc", "must be >= 1");
  if (distractors < 1 || distractors >= n_values) throw ConfigError("world.distractors", "must be in [1, n_values)");
}

nlohmann::json WorldConfig::to_json() const {
  return {{"n_entities", n_entities},   {"n_relations", n_relations},     {"n_values", n_values},
          {"heldout_fraction", heldout_fraction}, {"facts_per_doc", facts_per_doc},
          {"syllables_per_word", syllables_per_word},
          {"distractors", distractors}, {"seed", seed}};
}

WorldConfig WorldConfig::from_json(const nlohmann::json& j) {
  WorldConfig c;
  c.n_entities = j.value("n_entities", c.n_entities);
  c.n_relations = j.value("n_relations", c.n_relations);
  c.n_values = j.value("n_values", c.n_values);
  c.heldout_fraction = j.value("heldout_fraction", c.heldout_fraction);
  c.facts_per_doc = j.value("facts_per_doc", c.facts_per_doc);
  c.syllables_per_word = j.value("syllables_per_word", c.syllables_per_word);
  c.distractors = j.value("distractors", c.distractors);
  c.seed = j.value("seed", c.seed);
  return c;
}

std::vector<std::string> ToyWorld::sentence(const Fact& f) const {
  return {entities[f.entity], relations[f.relation], kCopula, values[f.value], kStop};
}

TextDoc ToyWorld::document(std::span<const std::uint32_t> pool, Rng& rng, std::string id) const {
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::string text;
  for (std::uint32_t k = 0; k < config.facts_per_doc; ++k) {
    for (const auto& word : sentence(facts[pool[pick(rng)]])) {
      if (!text.empty()) text.push_back(' ');
      text += word;
    }
  }
  return {std::move(id), std::move(text)};
}

std::vector<std::uint32_t> ToyWorld::fact_ids(bool heldout) const {
  std::vector<std::uint32_t> out;
  for (std::uint32_t i = 0; i < facts.size(); ++i)
    if (facts[i].heldout == heldout) out.push_back(i);
  return out;
}

std::vector<std::uint32_t> ToyWorld::all_fact_ids() const {
  std::vector<std::uint32_t> out(facts.size());
  std::iota(out.begin(), out.end(), 0u);
  return out;
}

ToyWorld gen_toy_world(const WorldConfig& cfg, DurationModel duration) {
  cfg.validate();
  ToyWorld w;
  w.config = cfg;
  Rng rng = derive_rng(cfg.seed, {stable_hash("world")});
  std::vector<std::string> syll;
  for (char c : kConsonants)
    for (char v : kVowels) syll.push_back(std::string{c, v});
  std::ranges::shuffle(syll, rng);
  std::uniform_int_distribution<std::size_t> any(0, syll.size() - 1);
  std::set<std::string> used;
  for (std::uint32_t i = 0; i < cfg.n_values; ++i) {
    std::string word;
    do {
      word = syll[i];
      for (std::uint32_t k = 1; k < cfg.syllables_per_word; ++k) word += syll[any(rng)];
    } while (used.count(word));
    used.insert(word);
    w.values.push_back(word);
  }
  auto fresh = [&](std::size_t n_syll) {
    std::string word;
    do {
      word.clear();
      for (std::size_t k = 0; k < n_syll; ++k) word += syll[any(rng)];
    } while (used.count(word));
    used.insert(word);
    return word;
  };
  for (std::uint32_t i = 0; i < cfg.n_relations; ++i) w.relations.push_back(fresh(cfg.syllables_per_word));
  for (std::uint32_t i = 0; i < cfg.n_entities; ++i) w.entities.push_back(fresh(cfg.syllables_per_word));

  const auto held_per_entity =
      static_cast<std::uint32_t>(std::llround(cfg.heldout_fraction * cfg.n_relations));
  std::vector<std::uint32_t> rel(cfg.n_relations);
  std::iota(rel.begin(), rel.end(), 0u);
  for (std::uint32_t e = 0; e < cfg.n_entities; ++e) {
    std::ranges::shuffle(rel, rng);
    std::vector<bool> held(cfg.n_relations, false);
    for (std::uint32_t k = 0; k < held_per_entity && k < cfg.n_relations; ++k) held[rel[k]] = true;
    for (std::uint32_t r = 0; r < cfg.n_relations; ++r) w.facts.push_back({e, r, 0, held[r]});
  }
  // Values are dealt evenly within each split, so a model with a fixed value
  // preference scores exactly chance over all-distractor items.
  for (bool split : {true, false}) {
    std::vector<std::uint32_t> idx;
    for (std::uint32_t i = 0; i < w.facts.size(); ++i)
      if (w.facts[i].heldout == split) idx.push_back(i);
    std::vector<std::uint32_t> deck(idx.size());
    for (std::size_t i = 0; i < deck.size(); ++i) deck[i] = static_cast<std::uint32_t>(i % cfg.n_values);
    std::ranges::shuffle(deck, rng);
    for (std::size_t i = 0; i < idx.size(); ++i) w.facts[idx[i]].value = deck[i];
  }

  Vocab text = Vocab::specials_only();
  std::vector<std::string> words{kCopula, kStop};
  words.insert(words.end(), w.entities.begin(), w.entities.end());
  words.insert(words.end(), w.relations.begin(), w.relations.end());
  words.insert(words.end(), w.values.begin(), w.values.end());
  for (const auto& word : words) text.add_word(word);
  w.lexicon = UnitLexicon::build(words, 4096, duration);
  w.vocab = Vocab::combine(text, w.lexicon.inventory_size());
  return w;
}

// ---------------------------------------------------------------------------

nlohmann::json ContinuationItem::to_json() const {
  nlohmann::json c = nlohmann::json::array();
  for (const auto& x : candidates) c.push_back(x.ids);
  return {{"setting", setting_name(setting)}, {"context", context.ids}, {"candidates", c}, {"correct", correct}};
}

ContinuationItem ContinuationItem::from_json(const nlohmann::json& j) {
  ContinuationItem it;
  it.setting = setting_from_name(j.at("setting").get<std::string>());
  it.context.ids = j.at("context").get<std::vector<TokenId>>();
  for (const auto& c : j.at("candidates")) it.candidates.emplace_back(c.get<std::vector<TokenId>>());
  it.correct = j.at("correct").get<std::size_t>();
  if (it.candidates.size() < 2) throw Error("item needs at least two candidates", "candidates");
  if (it.correct >= it.candidates.size()) throw Error("correct index out of range", "correct");
  return it;
}

nlohmann::json ToyQAItem::to_json() const {
  return {{"setting", setting_name(setting)}, {"question_text", question_text},
          {"question_speech", question_speech}, {"answer", answer}};
}

ToyQAItem ToyQAItem::from_json(const nlohmann::json& j) {
  ToyQAItem it;
  it.setting = setting_from_name(j.at("setting").get<std::string>());
  it.question_text = j.at("question_text").get<std::vector<TokenId>>();
  it.question_speech = j.at("question_speech").get<std::vector<TokenId>>();
  it.answer = j.at("answer").get<std::vector<TokenId>>();
  if (it.answer.empty()) throw Error("empty answer", "answer");
  return it;
}

ContinuationItem make_item(const ToyWorld& w, const Fact& f, std::uint32_t distractor, Setting s) {
  if (distractor == f.value) throw Error("distractor equals the answer");
  const std::vector<std::string> prompt{w.entities[f.entity], w.relations[f.relation], kCopula};
  const std::vector<std::string> right{w.values[f.value]}, wrong{w.values[distractor]};
  const bool speech_out = s == Setting::S || s == Setting::TS;
  ContinuationItem it;
  it.setting = s;
  const TokenId boa = special::begin_of_audio, eoa = special::end_of_audio;
  switch (s) {
    case Setting::T: it.context.ids = text_ids(w, prompt); break;
    case Setting::TS: it.context.ids = concat({text_ids(w, prompt), std::span(&boa, 1)}); break;
    case Setting::ST:
      it.context.ids = concat({std::span(&boa, 1), speech_ids(w, prompt), std::span(&eoa, 1)});
      break;
    case Setting::S: it.context.ids = concat({std::span(&boa, 1), speech_ids(w, prompt)}); break;
  }
  auto render = [&](const std::vector<std::string>& v) {
    return TokenSequence(speech_out ? speech_ids(w, v) : text_ids(w, v));
  };
  it.candidates = {render(right), render(wrong)};
  return it;
}

std::vector<ContinuationItem> make_items(const ToyWorld& w, bool heldout, std::span<const Setting> settings) {
  std::vector<ContinuationItem> out;
  for (auto s : settings) {
    auto rng = derive_rng(w.config.seed, {stable_hash("items"), heldout ? 1u : 2u, static_cast<std::uint64_t>(s)});
    for (auto fi : w.fact_ids(heldout)) {
      const auto& f = w.facts[fi];
      std::vector<std::uint32_t> others;
      for (std::uint32_t v = 0; v < w.config.n_values; ++v)
        if (v != f.value) others.push_back(v);
      std::ranges::shuffle(others, rng);
      for (std::uint32_t k = 0; k < w.config.distractors; ++k) {
        auto it = make_item(w, f, others[k], s);
        if (std::bernoulli_distribution(0.5)(rng)) {
          std::swap(it.candidates[0], it.candidates[1]);
          it.correct = 1;
        }
        out.push_back(std::move(it));
      }
    }
  }
  return out;
}

std::vector<ToyQAItem> make_qa_items(const ToyWorld& w, bool heldout) {
  std::vector<ToyQAItem> out;
  for (auto s : {Setting::S, Setting::ST}) {
    for (auto fi : w.fact_ids(heldout)) {
      const auto& f = w.facts[fi];
      const std::vector<std::string> q{w.entities[f.entity], w.relations[f.relation]};
      const std::vector<std::string> a{w.values[f.value]};
      ToyQAItem it;
      it.setting = s;
      it.question_text = text_ids(w, q);
      it.question_speech = speech_ids(w, q);
      it.answer = s == Setting::S ? speech_ids(w, a) : text_ids(w, a);
      out.push_back(std::move(it));
    }
  }
  return out;
}

bool check_item(const ToyWorld& w, const Fact& f, const ContinuationItem& item) {
  const bool speech_out = item.setting == Setting::S || item.setting == Setting::TS;
  const std::vector<std::string> right{w.values[f.value]};
  const auto want = speech_out ? speech_ids(w, right) : text_ids(w, right);
  for (std::size_t i = 0; i < item.candidates.size(); ++i)
    if ((item.candidates[i].ids == want) != (i == item.correct)) return false;
  for (const auto& c : item.candidates)
    for (auto id : c.ids)
      if (w.vocab.is_speech(id) != speech_out) return false;
  return true;
}

// ---------------------------------------------------------------------------

double SettingScore::ci95() const noexcept {
  if (!total) return 0.0;
  const double p = accuracy();
  return 1.96 * std::sqrt(p * (1 - p) / static_cast<double>(total));
}

std::size_t pick_candidate(std::span<const double> logprobs, std::span<const std::size_t> counts,
                           bool normalize) {
  std::size_t best = 0;
  double best_s = -INFINITY;
  for (std::size_t i = 0; i < logprobs.size(); ++i) {
    const double s = normalize ? logprobs[i] / static_cast<double>(counts[i]) : logprobs[i];
    if (s > best_s) {
      best_s = s;
      best = i;
    }
  }
  return best;
}

template <typename T>
Scores continuation_accuracy(const lm::Params<T>& params, std::span<const ContinuationItem> items,
                             bool normalize) {
  Scores out{};
  std::vector<double> lp;
  std::vector<std::size_t> n;
  for (const auto& it : items) {
    lp.clear();
    n.clear();
    for (const auto& c : it.candidates) {
      auto seq = it.context.ids;
      seq.insert(seq.end(), c.ids.begin(), c.ids.end());
      const auto s = lm::score_sequence(params, seq, it.context.size());
      lp.push_back(s.logprob);
      n.push_back(s.count);
    }
    auto& sc = out[static_cast<std::size_t>(it.setting)];
    ++sc.total;
    if (pick_candidate(lp, n, normalize) == it.correct) ++sc.correct;
  }
  return out;
}

template <typename T>
Scores qa_accuracy(const lm::Params<T>& params, std::span<const ToyQAItem> items, const Vocab& vocab,
                   std::size_t max_gen) {
  Scores out{};
  const TokenId boa = special::begin_of_audio, eoa = special::end_of_audio;
  const TokenId cue = vocab.id(kCopula);
  Rng rng(0);
  for (const auto& it : items) {
    auto prefix = concat({std::span(&boa, 1), it.question_speech, std::span(&eoa, 1), std::span(&cue, 1)});
    lm::GenerateConfig gc;
    if (it.setting == Setting::S) {
      prefix.push_back(boa);
      gc.stop_ids = {eoa};
    } else {
      gc.stop_ids = {vocab.id(kStop), special::sep};
    }
    const auto seq = lm::generate(params, prefix, max_gen, rng, gc);
    const std::span<const TokenId> gen(seq.begin() + static_cast<std::ptrdiff_t>(prefix.size()), seq.end());
    bool ok = contains_run(gen, it.answer);
    if (it.setting == Setting::ST)
      ok = ok && std::none_of(gen.begin(), gen.end(), [&](TokenId id) { return vocab.is_speech(id); });
    auto& sc = out[static_cast<std::size_t>(it.setting)];
    ++sc.total;
    if (ok) ++sc.correct;
  }
  return out;
}

nlohmann::json scores_json(const Scores& s) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < kSettings; ++i) {
    if (!s[i].total) continue;
    j[setting_name(static_cast<Setting>(i))] = {{"accuracy", s[i].accuracy()},
                                                 {"correct", s[i].correct},
                                                 {"total", s[i].total},
                                                 {"ci95", s[i].ci95()}};
  }
  return j;
}

// ---------------------------------------------------------------------------

TokenSequence format_dialogue(std::span<const TokenId> instr, DialogueMode mode,
                              std::span<const TokenId> text_response,
                              std::span<const TokenId> speech_response) {
  if (instr.empty()) throw Error("dialogue needs a non-empty speech instruction");
  TokenSequence out;
  auto& ids = out.ids;
  ids = {special::system, special::user, special::begin_of_audio};
  ids.insert(ids.end(), instr.begin(), instr.end());
  ids.push_back(special::end_of_audio);
  ids.push_back(special::assistant);
  if (mode == DialogueMode::text_guided) {
    ids.push_back(special::transcript);
    ids.insert(ids.end(), text_response.begin(), text_response.end());
  }
  if (!speech_response.empty()) {
    ids.push_back(special::begin_of_audio);
    ids.insert(ids.end(), speech_response.begin(), speech_response.end());
    ids.push_back(special::end_of_audio);
  }
  return out;
}

std::optional<ParsedDialogue> parse_dialogue(std::span<const TokenId> ids) {
  if (ids.size() < 5 || ids[0] != special::system || ids[1] != special::user ||
      ids[2] != special::begin_of_audio)
    return std::nullopt;
  auto eoa = std::find(ids.begin() + 3, ids.end(), special::end_of_audio);
  if (eoa == ids.end() || eoa + 1 == ids.end() || *(eoa + 1) != special::assistant) return std::nullopt;
  ParsedDialogue p;
  p.instruction.assign(ids.begin() + 3, eoa);
  if (p.instruction.empty()) return std::nullopt;
  auto it = eoa + 2;
  if (it != ids.end() && *it == special::transcript) {
    p.mode = DialogueMode::text_guided;
    auto boa = std::find(it + 1, ids.end(), special::begin_of_audio);
    p.text_response.assign(it + 1, boa);
    it = boa;
  }
  if (it == ids.end()) return p;
  if (*it != special::begin_of_audio || ids.back() != special::end_of_audio || it + 1 >= ids.end())
    return std::nullopt;
  p.speech_response.assign(it + 1, ids.end() - 1);
  return p;
}

// ---------------------------------------------------------------------------

nlohmann::json SourceSizes::to_json() const {
  return {{"text_docs", text_docs}, {"interleaved_docs", interleaved_docs}, {"speech_docs", speech_docs},
          {"asr_pairs", asr_pairs}, {"tts_pairs", tts_pairs}};
}

SourceSizes SourceSizes::from_json(const nlohmann::json& j) {
  SourceSizes s;
  s.text_docs = j.value("text_docs", s.text_docs);
  s.interleaved_docs = j.value("interleaved_docs", s.interleaved_docs);
  s.speech_docs = j.value("speech_docs", s.speech_docs);
  s.asr_pairs = j.value("asr_pairs", s.asr_pairs);
  s.tts_pairs = j.value("tts_pairs", s.tts_pairs);
  return s;
}

void ExperimentConfig::validate() const {
  world.validate();
  duration.validate();
  interleave.validate();
  MixtureSpec m = mix;
  if (interleaved_rows) m.budget_rows = 1;  // derived later
  m.validate();
  train.validate();
  if (sources.text_docs == 0 && mix.text_ratio > 0) throw ConfigError("sources.text_docs", "must be >= 1");
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j = {{"world", world.to_json()},
                      {"duration", {{"d", duration.d}, {"p_jitter", duration.p_jitter}}},
                      {"interleave", interleave.to_json()},
                      {"sources", sources.to_json()},
                      {"mix", mix.to_json()},
                      {"lm", lm.to_json()},
                      {"train", train.to_json()},
                      {"double_precision", double_precision},
                      {"speech_only_control", speech_only_control},
                      {"seed", seed}};
  if (interleaved_rows) j["interleaved_rows"] = *interleaved_rows;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  if (j.contains("world")) c.world = WorldConfig::from_json(j["world"]);
  if (j.contains("duration")) {
    c.duration.d = j["duration"].value("d", c.duration.d);
    c.duration.p_jitter = j["duration"].value("p_jitter", c.duration.p_jitter);
  }
  if (j.contains("interleave")) c.interleave = InterleaveConfig::from_json(j["interleave"]);
  if (j.contains("sources")) c.sources = SourceSizes::from_json(j["sources"]);
  if (j.contains("mix")) c.mix = MixtureSpec::from_json(j["mix"]);
  if (j.contains("lm")) c.lm = lm::LMConfig::from_json(j["lm"]);
  if (j.contains("train")) c.train = lm::TrainConfig::from_json(j["train"]);
  if (j.contains("interleaved_rows")) c.interleaved_rows = j["interleaved_rows"].get<std::size_t>();
  c.double_precision = j.value("double_precision", c.double_precision);
  c.speech_only_control = j.value("speech_only_control", c.speech_only_control);
  c.seed = j.value("seed", c.seed);
  return c;
}

ExperimentData build_experiment_data(const ExperimentConfig& cfg_in) {
  ExperimentConfig cfg = cfg_in;
  cfg.world.seed = cfg.seed;
  cfg.interleave.seed = cfg.seed;
  cfg.mix.seed = cfg.seed;
  cfg.validate();
  ExperimentData d;
  d.world = gen_toy_world(cfg.world, cfg.duration);
  const auto& w = d.world;
  const auto train_ids = w.fact_ids(false);
  const auto all_ids = w.all_fact_ids();
  const OracleSynthesizer synth(w.lexicon, w.vocab.speech_base());

  Source text{"text", SourceKind::text, {}};
  auto rng = derive_rng(cfg.seed, {stable_hash("text")});
  for (std::uint32_t i = 0; i < cfg.sources.text_docs; ++i)
    text.docs.push_back(encode_text(w.document(all_ids, rng, "t" + std::to_string(i)), w.vocab));

  Source inter{cfg.speech_only_control ? "speech_only" : "interleaved", SourceKind::interleaved, {}};
  rng = derive_rng(cfg.seed, {stable_hash("interleaved")});
  for (std::uint32_t i = 0; i < cfg.sources.interleaved_docs; ++i) {
    const auto text_doc = w.document(train_ids, rng, "i" + std::to_string(i));
    if (cfg.speech_only_control) {
      // same documents, one speech block each, no text alternation
      auto span_rng = derive_rng(cfg.seed, {stable_hash(text_doc.id)});
      auto s = synthesize_span(split_words(text_doc.text), w.lexicon, span_rng, w.vocab.speech_base());
      TokenSequence seq;
      seq.ids.push_back(special::begin_of_audio);
      seq.ids.insert(seq.ids.end(), s.ids.begin(), s.ids.end());
      seq.ids.push_back(special::end_of_audio);
      inter.docs.push_back(std::move(seq));
      continue;
    }
    auto doc = interleave_document(text_doc, cfg.interleave, synth, w.vocab);
    d.interleave_stats.add(doc, w.vocab);
    inter.docs.push_back(std::move(doc.seq));
  }

  Source speech{"speech", SourceKind::speech, {}};
  rng = derive_rng(cfg.seed, {stable_hash("speech")});
  for (std::uint32_t i = 0; i < cfg.sources.speech_docs; ++i) {
    const auto doc = w.document(train_ids, rng, "s" + std::to_string(i));
    auto s = synthesize_span(split_words(doc.text), w.lexicon, rng, w.vocab.speech_base());
    TokenSequence seq;
    seq.ids.push_back(special::begin_of_audio);
    seq.ids.insert(seq.ids.end(), s.ids.begin(), s.ids.end());
    seq.ids.push_back(special::end_of_audio);
    speech.docs.push_back(std::move(seq));
  }

  auto pairs_for = [&](const char* tag, std::uint32_t n, SourceKind kind) {
    Source src{tag, kind, {}};
    auto r = derive_rng(cfg.seed, {stable_hash(tag)});
    std::uniform_int_distribution<std::size_t> pick(0, train_ids.size() - 1);
    std::vector<std::string> sentences;
    for (std::uint32_t i = 0; i < n; ++i) {
      std::string s;
      for (const auto& word : w.sentence(w.facts[train_ids[pick(r)]])) s += (s.empty() ? "" : " ") + word;
      sentences.push_back(std::move(s));
    }
    for (const auto& p : make_parallel_pairs(sentences, w.vocab, w.lexicon, r()))
      src.docs.push_back(supervised_pair_format(p, kind));
    return src;
  };

  d.sources = {std::move(text), std::move(speech), pairs_for("asr", cfg.sources.asr_pairs, SourceKind::supervised_asr),
               pairs_for("tts", cfg.sources.tts_pairs, SourceKind::supervised_tts), std::move(inter)};

  MixtureSpec spec = cfg.mix;
  if (cfg.interleaved_rows) {
    std::size_t fixed = 0;
    for (const auto& s : d.sources)
      if (is_one_epoch(s.kind)) fixed += pack_sequences(s.docs, spec.seq_len).size();
    spec.budget_rows = budget_for(fixed, *cfg.interleaved_rows, spec.text_ratio);
  }
  d.schedule = compose_mixture(spec, d.sources);
  d.batches = materialize(d.schedule, d.sources);
  return d;
}

double ExperimentResult::cross_modal() const noexcept {
  return 0.5 * (heldout[static_cast<std::size_t>(Setting::TS)].accuracy() +
                heldout[static_cast<std::size_t>(Setting::ST)].accuracy());
}

nlohmann::json ExperimentResult::to_json() const {
  return {{"diverged", diverged},
          {"steps", steps},
          {"train_tokens", train_tokens},
          {"final_loss", final_loss},
          {"seconds", seconds},
          {"heldout", scores_json(heldout)},
          {"trained", scores_json(trained)},
          {"qa", scores_json(qa)},
          {"cross_modal", cross_modal()},
          {"speech_ratio", speech_ratio},
          {"mixture", mixture}};
}

namespace {

lm::Batch to_batch(const PackedBatch& pb, std::size_t seq_len) {
  lm::Batch b;
  b.rows = pb.rows.size();
  b.seq_len = seq_len;
  for (const auto& r : pb.rows) {
    b.tokens.insert(b.tokens.end(), r.ids.begin(), r.ids.end());
    b.mask.insert(b.mask.end(), r.loss_mask.begin(), r.loss_mask.end());
  }
  return b;
}

template <typename T>
void train_and_eval(const ExperimentConfig& cfg, const ExperimentData& d, ExperimentResult& res,
                    lm::AnyParams* trained) {
  lm::LMConfig lc = cfg.lm;
  lc.vocab_size = d.world.vocab.size();
  lc.max_seq_len = std::max(lc.max_seq_len, cfg.mix.seq_len);
  lc.seed = cfg.seed;
  lm::TrainConfig tc = cfg.train;
  tc.steps = d.batches.size();
  tc.batch_size = cfg.mix.batch_rows;
  std::vector<lm::Batch> batches;
  batches.reserve(d.batches.size());
  for (const auto& pb : d.batches) {
    batches.push_back(to_batch(pb, cfg.mix.seq_len));
    res.train_tokens += batches.back().tokens.size();
  }
  auto out = lm::train(lm::init_params<T>(lc), tc, [&](std::uint64_t s) { return batches[s]; });
  res.diverged = out.diverged;
  res.steps = out.steps_done;
  if (!out.history.empty()) {
    // mean of the last 10 steps smooths batch noise
    const std::size_t n = std::min<std::size_t>(10, out.history.size());
    for (std::size_t i = out.history.size() - n; i < out.history.size(); ++i) res.final_loss += out.history[i].loss;
    res.final_loss /= static_cast<double>(n);
  }
  static constexpr std::array<Setting, 4> all{Setting::S, Setting::TS, Setting::ST, Setting::T};
  res.heldout = continuation_accuracy(out.params, make_items(d.world, true, all));
  res.trained = continuation_accuracy(out.params, make_items(d.world, false, all));
  res.qa = qa_accuracy(out.params, make_qa_items(d.world, true), d.world.vocab);
  if (trained) *trained = std::move(out.params);
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, lm::AnyParams* trained) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = build_experiment_data(cfg);
  ExperimentResult res;
  res.speech_ratio = data.interleave_stats.speech_ratio();
  res.mixture = data.schedule.to_json();
  res.mixture["report"] = report_mixture(data.schedule, data.batches).to_json();
  if (cfg.double_precision) train_and_eval<double>(cfg, data, res, trained);
  else train_and_eval<float>(cfg, data, res, trained);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

const char* axis_name(Axis a) {
  switch (a) {
    case Axis::interleave_tokens: return "interleave_tokens";
    case Axis::eta: return "eta";
    case Axis::expansion: return "expansion";
  }
  return "eta";
}

Axis axis_from_name(std::string_view s) {
  for (auto a : {Axis::interleave_tokens, Axis::eta, Axis::expansion})
    if (s == axis_name(a)) return a;
  throw ConfigError("ablate.axis", "must be interleave_tokens, eta or expansion");
}

std::vector<AblationRow> run_ablation(Axis axis, std::span<const double> grid,
                                      std::span<const std::uint64_t> seeds, const ExperimentConfig& base,
                                      const std::function<void(const AblationRow&)>& on_row) {
  if (grid.empty()) throw ConfigError("ablate.grid", "must be non-empty");
  std::vector<AblationRow> rows;
  for (double v : grid) {
    for (auto seed : seeds) {
      ExperimentConfig cfg = base;
      cfg.seed = seed;
      switch (axis) {
        case Axis::interleave_tokens:
          if (v < 0) throw ConfigError("ablate.grid", "token counts must be >= 0");
          cfg.interleaved_rows = static_cast<std::size_t>(std::llround(v / cfg.mix.seq_len));
          break;
        case Axis::eta: cfg.interleave.eta = v; break;
        case Axis::expansion:
          if (v < 1) throw ConfigError("ablate.grid", "expansion must be >= 1");
          cfg.duration.d = static_cast<std::uint32_t>(std::llround(v));
          break;
      }
      AblationRow row{v, seed, {}};
      try {
        row.result = run_experiment(cfg);
      } catch (const lm::NonFiniteError& e) {
        row.result.diverged = true;
        log_event("error", "ablation run diverged", nlohmann::json{{"value", v}, {"seed", seed}}.dump());
      }
      if (row.result.diverged)
        log_event("warn", "ablation point failed", nlohmann::json{{"value", v}, {"seed", seed}}.dump());
      if (on_row) on_row(row);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

nlohmann::json ablation_json(Axis axis, std::span<const AblationRow> rows) {
  nlohmann::json out = {{"axis", axis_name(axis)}, {"rows", nlohmann::json::array()}};
  std::map<double, std::vector<const AblationRow*>> by_value;
  for (const auto& r : rows) {
    out["rows"].push_back({{"value", r.value}, {"seed", r.seed}, {"result", r.result.to_json()}});
    by_value[r.value].push_back(&r);
  }
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& [v, rs] : by_value) {
    double cm = 0, s = 0, ts = 0, st = 0;
    std::size_t ok = 0;
    for (const auto* r : rs) {
      if (r->result.diverged) continue;
      ++ok;
      cm += r->result.cross_modal();
      s += r->result.heldout[0].accuracy();
      ts += r->result.heldout[1].accuracy();
      st += r->result.heldout[2].accuracy();
    }
    const double n = ok ? static_cast<double>(ok) : 1.0;
    summary.push_back({{"value", v}, {"runs", rs.size()}, {"failed", rs.size() - ok},
                       {"cross_modal", cm / n}, {"S", s / n}, {"TS", ts / n}, {"ST", st / n}});
  }
  out["summary"] = summary;
  return out;
}

template Scores continuation_accuracy<float>(const lm::Params<float>&, std::span<const ContinuationItem>, bool);
template Scores continuation_accuracy<double>(const lm::Params<double>&, std::span<const ContinuationItem>, bool);
template Scores qa_accuracy<float>(const lm::Params<float>&, std::span<const ToyQAItem>, const Vocab&, std::size_t);
template Scores qa_accuracy<double>(const lm::Params<double>&, std::span<const ToyQAItem>, const Vocab&, std::size_t);

}  // namespace forge::eval
