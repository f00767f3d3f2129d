#pragma once

// Span corruption: Poisson span lengths until the target ratio is covered,
// uniform non-overlapping placement, and replacement of each span by
// <|begin_of_audio|> speech <|end_of_audio|>.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "forge/common.hpp"
#include "forge/corpus.hpp"
#include "forge/text2token.hpp"
#include "json.hpp"

namespace forge {

struct InterleaveConfig {
  double eta = 0.3;      // target fraction of words replaced by speech
  double lambda = 10.0;  // Poisson mean span length, in words
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static InterleaveConfig from_json(const nlohmann::json& j);
  friend bool operator==(const InterleaveConfig&, const InterleaveConfig&) = default;
};

struct Span {
  std::size_t start = 0;
  std::size_t length = 0;
  friend bool operator==(const Span&, const Span&) = default;
};

struct SpanPlan {
  std::size_t doc_len = 0;
  std::vector<Span> spans;    // document order
  std::size_t truncated = 0;  // lengths dropped or shortened to fit

  std::size_t covered() const noexcept;
  /// Sorted, in bounds, every length >= 1, no shared word index.
  bool valid() const noexcept;
};

/// Poisson(lambda) draws (0 read as 1) until the running sum reaches
/// eta * doc_len; the last span is shortened only if the sum exceeds doc_len.
/// Documents shorter than 1/eta words get one span of max(1, round(eta * doc_len)).
std::vector<std::size_t> draw_span_lengths(std::size_t doc_len, const InterleaveConfig& cfg, Rng& rng);

/// Uniform placement over all non-overlapping arrangements of `lengths` in
/// order: doc_len - Σ lengths free words are split into n + 1 gaps by a
/// uniformly chosen stars-and-bars composition.
SpanPlan place_spans(std::size_t doc_len, std::vector<std::size_t> lengths, Rng& rng);

/// Text ids of `words` with every planned span replaced by
/// boa ∥ synthesize(span words) ∥ eoa. `span_rng(i)` gives span i's generator.
TokenSequence build_interleaved(std::span<const std::string> words, const SpanPlan& plan,
                                const SpanSynthesizer& t2t, const Vocab& vocab,
                                const std::function<Rng(std::size_t)>& span_rng);

struct InterleavedDoc {
  TokenSequence seq;
  SpanPlan plan;
};

/// Plan and build one document. Generators derive from (seed, hash(doc id))
/// and (seed, hash(doc id), span index + 1), so results do not depend on
/// processing order.
InterleavedDoc interleave_document(const TextDoc& doc, const InterleaveConfig& cfg,
                                   const SpanSynthesizer& t2t, const Vocab& vocab);

/// Speech ids over all ids that are not special tokens; 0 for no such ids.
double measure_speech_ratio(std::span<const TokenId> ids, const Vocab& vocab);

/// Integer tallies behind the stats sidecar.
struct InterleaveStats {
  std::size_t docs = 0;
  std::size_t words = 0;
  std::size_t covered_words = 0;
  std::size_t spans = 0;
  std::size_t truncated = 0;
  std::size_t speech_tokens = 0;
  std::size_t content_tokens = 0;  // non-special ids
  double coverage_sum = 0;         // Σ per-document coverage
  std::map<std::size_t, std::size_t> span_count_hist;
  std::map<std::size_t, std::size_t> span_length_hist;

  void add(const InterleavedDoc& d, const Vocab& vocab);
  double speech_ratio() const noexcept;
  double mean_coverage() const noexcept;
  double mean_span_length() const noexcept;
  nlohmann::json to_json() const;
};

/// Speech-ratio numerator/denominator counted over raw ids; the same rule
/// `measure_speech_ratio` applies.
void count_speech(std::span<const TokenId> ids, const Vocab& vocab, std::size_t& speech,
                  std::size_t& content);

}  // namespace forge
