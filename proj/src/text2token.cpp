#include "forge/text2token.hpp"

#include <algorithm>
#include <fstream>
#include <random>

namespace forge {

void DurationModel::validate() const {
  if (d < 1) throw ConfigError("t2t.expansion", "must be >= 1");
  if (!(p_jitter >= 0 && p_jitter < 1)) throw ConfigError("t2t.p_jitter", "must be in [0, 1)");
}

UnitLexicon UnitLexicon::build(std::span<const std::string> words, std::uint32_t unit_cap,
                               DurationModel duration, std::uint32_t chunk_size) {
  if (unit_cap < 1) throw ConfigError("t2t.unit_cap", "must be >= 1");
  if (chunk_size < 1) throw ConfigError("t2t.chunk_size", "must be >= 1");
  duration.validate();
  UnitLexicon lex;
  lex.cap_ = unit_cap;
  lex.chunk_ = chunk_size;
  lex.duration_ = duration;
  std::uint32_t next = 0;
  for (const auto& w : words) {
    for (std::size_t i = 0; i < w.size(); i += chunk_size) {
      auto c = w.substr(i, chunk_size);
      if (lex.chunks_.count(c)) continue;
      if (next < unit_cap) lex.chunks_.emplace(std::move(c), next++);
    }
  }
  lex.inventory_ = next;
  return lex;
}

std::vector<std::uint32_t> UnitLexicon::units(std::string_view word) const {
  if (word.empty()) throw Error("word_to_units needs a non-empty word");
  if (inventory_ == 0) throw Error("lexicon has no units");
  std::vector<std::uint32_t> out;
  out.reserve((word.size() + chunk_ - 1) / chunk_);
  for (std::size_t i = 0; i < word.size(); i += chunk_) {
    const auto c = word.substr(i, chunk_);
    const auto it = chunks_.find(c);
    out.push_back(it != chunks_.end() ? it->second
                                      : static_cast<std::uint32_t>(stable_hash(c) % inventory_));
  }
  return out;
}

void UnitLexicon::set_duration(DurationModel d) {
  d.validate();
  duration_ = d;
}

nlohmann::json UnitLexicon::to_json() const {
  nlohmann::json chunks = nlohmann::json::object();
  for (const auto& [c, u] : chunks_) chunks[c] = u;
  return {{"chunk_size", chunk_},
          {"unit_cap", cap_},
          {"inventory", inventory_},
          {"duration", {{"d", duration_.d}, {"p_jitter", duration_.p_jitter}}},
          {"chunks", chunks}};
}

UnitLexicon UnitLexicon::from_json(const nlohmann::json& j) {
  UnitLexicon lex;
  lex.chunk_ = j.at("chunk_size").get<std::uint32_t>();
  lex.cap_ = j.at("unit_cap").get<std::uint32_t>();
  lex.inventory_ = j.at("inventory").get<std::uint32_t>();
  lex.duration_.d = j.at("duration").at("d").get<std::uint32_t>();
  lex.duration_.p_jitter = j.at("duration").at("p_jitter").get<double>();
  lex.duration_.validate();
  for (const auto& [c, u] : j.at("chunks").items()) {
    const auto id = u.get<std::uint32_t>();
    if (id >= lex.inventory_) throw Error("unit id out of range", "chunks." + c);
    lex.chunks_.emplace(c, id);
  }
  return lex;
}

void UnitLexicon::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write lexicon", path.string());
  out << to_json().dump(1) << '\n';
}

UnitLexicon UnitLexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open lexicon", path.string());
  return from_json(nlohmann::json::parse(in));
}

std::vector<std::uint32_t> word_to_units(std::string_view word, const UnitLexicon& lexicon) {
  return lexicon.units(word);
}

TokenSequence synthesize_span(std::span<const std::string> words, const UnitLexicon& lexicon,
                              Rng& rng, TokenId speech_base) {
  const auto& dur = lexicon.duration();
  std::bernoulli_distribution extra(dur.p_jitter);
  TokenSequence out;
  for (const auto& w : words) {
    for (auto u : lexicon.units(w)) {
      const std::uint32_t n = dur.d + (dur.p_jitter > 0 && extra(rng) ? 1 : 0);
      out.ids.insert(out.ids.end(), n, speech_base + u);
    }
  }
  return out;
}

TokenSequence render_speech(std::span<const std::string> words, const UnitLexicon& lexicon,
                            TokenId speech_base) {
  TokenSequence out;
  for (const auto& w : words)
    for (auto u : lexicon.units(w)) out.ids.insert(out.ids.end(), lexicon.duration().d, speech_base + u);
  return out;
}

double expected_span_length(std::span<const std::string> words, const UnitLexicon& lexicon) {
  std::size_t units = 0;
  for (const auto& w : words) units += lexicon.units(w).size();
  return static_cast<double>(units) * lexicon.duration().expected_tokens_per_unit();
}

TokenSequence OracleSynthesizer::synthesize(std::span<const std::string> words, Rng& rng) const {
  return synthesize_span(words, lexicon_, rng, base_);
}

LearnedSynthesizer::LearnedSynthesizer(lm::Params<float> params, Vocab vocab, std::size_t max_tokens)
    : params_(std::move(params)), vocab_(std::move(vocab)), max_tokens_(max_tokens) {
  if (params_.config.vocab_size != vocab_.size())
    throw Error("model vocab size does not match the combined vocab");
}

TokenSequence LearnedSynthesizer::synthesize(std::span<const std::string> words, Rng& rng) const {
  if (words.empty()) return {};
  auto prefix = encode_words(words, vocab_).ids;
  prefix.push_back(special::begin_of_audio);
  lm::GenerateConfig gc;
  gc.stop_ids = {special::end_of_audio};
  const auto seq = lm::generate(params_, prefix, max_tokens_, rng, gc);
  TokenSequence out;
  for (std::size_t i = prefix.size(); i < seq.size(); ++i)
    if (vocab_.is_speech(seq[i])) out.ids.push_back(seq[i]);
  return out;
}

std::vector<ParallelPair> make_parallel_pairs(std::span<const std::string> sentences,
                                              const Vocab& vocab, const UnitLexicon& lexicon,
                                              std::uint64_t seed) {
  std::vector<ParallelPair> out;
  out.reserve(sentences.size());
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const auto words = split_words(sentences[i]);
    if (words.empty()) continue;
    auto rng = derive_rng(seed, {i});
    out.push_back({encode_words(words, vocab), synthesize_span(words, lexicon, rng, vocab.speech_base())});
  }
  return out;
}

TokenSequence t2t_row(const ParallelPair& pair) {
  TokenSequence row;
  row.ids = pair.text.ids;
  row.loss_mask.assign(row.ids.size(), 0);
  row.ids.push_back(special::begin_of_audio);
  row.loss_mask.push_back(0);
  row.ids.insert(row.ids.end(), pair.speech.ids.begin(), pair.speech.ids.end());
  row.loss_mask.insert(row.loss_mask.end(), pair.speech.ids.size(), 1);
  row.ids.push_back(special::end_of_audio);
  row.loss_mask.push_back(1);
  return row;
}

lm::Batch t2t_batch(std::span<const ParallelPair> pairs, std::size_t batch_size, Rng& rng) {
  if (pairs.empty()) throw Error("train_t2t needs at least one pair");
  std::uniform_int_distribution<std::size_t> pick(0, pairs.size() - 1);
  std::vector<TokenSequence> rows;
  std::size_t len = 0;
  for (std::size_t r = 0; r < batch_size; ++r) {
    rows.push_back(t2t_row(pairs[pick(rng)]));
    len = std::max(len, rows.back().size());
  }
  lm::Batch b;
  b.rows = batch_size;
  b.seq_len = len;
  b.tokens.assign(batch_size * len, special::pad);
  b.mask.assign(batch_size * len, 0);
  for (std::size_t r = 0; r < batch_size; ++r) {
    std::copy(rows[r].ids.begin(), rows[r].ids.end(), b.tokens.begin() + r * len);
    std::copy(rows[r].loss_mask.begin(), rows[r].loss_mask.end(), b.mask.begin() + r * len);
  }
  return b;
}

lm::TrainResult<float> train_t2t(std::span<const ParallelPair> pairs, const lm::LMConfig& lm_cfg,
                                 const lm::TrainConfig& train_cfg, std::uint64_t seed,
                                 const lm::StepCallback& on_step) {
  if (pairs.empty()) throw Error("train_t2t needs at least one pair");
  for (const auto& p : pairs) {
    if (p.text.empty() || p.speech.empty()) throw Error("parallel pair with an empty side");
    for (auto id : p.text.ids)
      if (id >= lm_cfg.vocab_size) throw Error("text id outside the model vocab");
    for (auto id : p.speech.ids)
      if (id >= lm_cfg.vocab_size) throw Error("speech id outside the model vocab");
  }
  auto params = lm::init_params<float>(lm_cfg);
  return lm::train(std::move(params), train_cfg,
                   [&](std::uint64_t step) {
                     auto rng = derive_rng(seed, {step});
                     return t2t_batch(pairs, train_cfg.batch_size, rng);
                   },
                   on_step);
}

std::size_t levenshtein(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double token_error_rate(std::span<const TokenId> ref, std::span<const TokenId> hyp) {
  if (ref.empty()) throw Error("token error rate needs a non-empty reference");
  return static_cast<double>(levenshtein(ref, hyp)) / static_cast<double>(ref.size());
}

std::size_t TerByLength::bucket(std::size_t words) noexcept {
  if (words <= 2) return 0;
  if (words <= 5) return 1;
  if (words <= 10) return 2;
  if (words <= 20) return 3;
  return 4;
}

const char* TerByLength::label(std::size_t b) noexcept {
  static constexpr const char* kLabels[kBuckets] = {"1-2", "3-5", "6-10", "11-20", "21+"};
  return b < kBuckets ? kLabels[b] : "";
}

void TerByLength::add(std::size_t words, double ter) {
  const auto b = bucket(words);
  sum[b] += ter;
  ++count[b];
}

nlohmann::json TerByLength::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t b = 0; b < kBuckets; ++b)
    if (count[b]) j[label(b)] = {{"spans", count[b]}, {"ter", sum[b] / static_cast<double>(count[b])}};
  return j;
}

}  // namespace forge
