#pragma once

// Text to speech-token conversion for the toy speech domain.
//
// Oracle mode: words are cut into fixed-width grapheme chunks, each chunk is
// a pseudo-phoneme unit, and every unit is emitted `d` times plus one extra
// copy with probability p_jitter. Learned mode: a tinylm trained on
// [text, boa, speech, eoa] rows that predicts the speech side.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "forge/common.hpp"
#include "forge/corpus.hpp"
#include "forge/tinylm.hpp"
#include "json.hpp"

namespace forge {

/// Tokens emitted per unit: `d` copies plus one more with probability p_jitter.
struct DurationModel {
  std::uint32_t d = 2;
  double p_jitter = 0.0;

  void validate() const;
  double expected_tokens_per_unit() const noexcept { return d + p_jitter; }
  friend bool operator==(const DurationModel&, const DurationModel&) = default;
};

class UnitLexicon {
 public:
  UnitLexicon() = default;

  /// Chunks of `words` get unit ids in order of first appearance; once
  /// `unit_cap` ids are in use, further chunks share hashed ids.
  static UnitLexicon build(std::span<const std::string> words, std::uint32_t unit_cap,
                           DurationModel duration = {}, std::uint32_t chunk_size = 2);

  /// Units for any non-empty word; unseen chunks hash into the inventory.
  std::vector<std::uint32_t> units(std::string_view word) const;

  std::uint32_t inventory_size() const noexcept { return inventory_; }
  std::uint32_t unit_cap() const noexcept { return cap_; }
  std::uint32_t chunk_size() const noexcept { return chunk_; }
  const DurationModel& duration() const noexcept { return duration_; }
  void set_duration(DurationModel d);

  nlohmann::json to_json() const;
  static UnitLexicon from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static UnitLexicon load(const std::filesystem::path& path);

  friend bool operator==(const UnitLexicon& a, const UnitLexicon& b) {
    return a.chunks_ == b.chunks_ && a.cap_ == b.cap_ && a.chunk_ == b.chunk_ &&
           a.inventory_ == b.inventory_ && a.duration_ == b.duration_;
  }

 private:
  std::map<std::string, std::uint32_t, std::less<>> chunks_;
  std::uint32_t cap_ = 0;
  std::uint32_t chunk_ = 2;
  std::uint32_t inventory_ = 0;
  DurationModel duration_;
};

std::vector<std::uint32_t> word_to_units(std::string_view word, const UnitLexicon& lexicon);

/// Speech ids (speech_base + unit) for a word list, with duration jitter.
TokenSequence synthesize_span(std::span<const std::string> words, const UnitLexicon& lexicon,
                              Rng& rng, TokenId speech_base);

/// Jitter-free rendering: exactly `d` copies of every unit. Every jittered
/// rendering of the same words contains each unit run of this one.
TokenSequence render_speech(std::span<const std::string> words, const UnitLexicon& lexicon,
                            TokenId speech_base);

/// Expected synthesized length: Σ units × (d + p_jitter).
double expected_span_length(std::span<const std::string> words, const UnitLexicon& lexicon);

class SpanSynthesizer {
 public:
  virtual ~SpanSynthesizer() = default;
  virtual TokenSequence synthesize(std::span<const std::string> words, Rng& rng) const = 0;
};

class OracleSynthesizer final : public SpanSynthesizer {
 public:
  OracleSynthesizer(UnitLexicon lexicon, TokenId speech_base)
      : lexicon_(std::move(lexicon)), base_(speech_base) {}
  TokenSequence synthesize(std::span<const std::string> words, Rng& rng) const override;
  const UnitLexicon& lexicon() const noexcept { return lexicon_; }

 private:
  UnitLexicon lexicon_;
  TokenId base_;
};

/// Greedy decoding of a trained text-to-token model. Output keeps only
/// speech-range ids and stops at end_of_audio or `max_tokens`.
class LearnedSynthesizer final : public SpanSynthesizer {
 public:
  LearnedSynthesizer(lm::Params<float> params, Vocab vocab, std::size_t max_tokens);
  TokenSequence synthesize(std::span<const std::string> words, Rng& rng) const override;

 private:
  lm::Params<float> params_;
  Vocab vocab_;
  std::size_t max_tokens_;
};

struct ParallelPair {
  TokenSequence text;    // text ids of the combined vocab
  TokenSequence speech;  // speech ids of the combined vocab
};

/// Oracle pairs for a list of sentences (split on spaces).
std::vector<ParallelPair> make_parallel_pairs(std::span<const std::string> sentences,
                                              const Vocab& vocab, const UnitLexicon& lexicon,
                                              std::uint64_t seed);

/// [text, boa, speech, eoa] with targets on the speech ids and eoa.
TokenSequence t2t_row(const ParallelPair& pair);

/// Rows of `batch_size` pairs sampled with replacement, padded to the longest
/// row with mask false on padding.
lm::Batch t2t_batch(std::span<const ParallelPair> pairs, std::size_t batch_size, Rng& rng);

lm::TrainResult<float> train_t2t(std::span<const ParallelPair> pairs, const lm::LMConfig& lm_cfg,
                                 const lm::TrainConfig& train_cfg, std::uint64_t seed,
                                 const lm::StepCallback& on_step = {});

std::size_t levenshtein(std::span<const TokenId> a, std::span<const TokenId> b);

/// Levenshtein(ref, hyp) / |ref|; throws on an empty reference.
double token_error_rate(std::span<const TokenId> ref, std::span<const TokenId> hyp);

/// Mean TER per span-length bucket: 1-2, 3-5, 6-10, 11-20 and 21+ words.
struct TerByLength {
  static constexpr std::size_t kBuckets = 5;
  std::array<double, kBuckets> sum{};
  std::array<std::size_t, kBuckets> count{};

  static std::size_t bucket(std::size_t words) noexcept;
  static const char* label(std::size_t b) noexcept;
  void add(std::size_t words, double ter);
  nlohmann::json to_json() const;  // {"1-2": {"spans": n, "ter": mean}, ...}, empty buckets omitted
};

}  // namespace forge
