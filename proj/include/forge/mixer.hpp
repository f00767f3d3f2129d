#pragma once

// Pre-training mixture: text at a fixed share of every batch, speech and
// supervised sources consumed exactly once, interleaved data filling the
// rest. Documents are packed into fixed-length rows with a separator.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "forge/common.hpp"
#include "forge/corpus.hpp"
#include "forge/text2token.hpp"
#include "json.hpp"

namespace forge {

enum class SourceKind : std::uint8_t {
  text = 1,
  speech = 2,
  interleaved = 3,
  supervised_asr = 4,
  supervised_tts = 5,
};

const char* source_kind_name(SourceKind k);
SourceKind source_kind_from_name(const std::string& s);
/// Speech and supervised sources are consumed for exactly one epoch.
bool is_one_epoch(SourceKind k);

struct Source {
  std::string name;
  SourceKind kind = SourceKind::text;
  std::vector<TokenSequence> docs;
};

struct MixtureSpec {
  std::size_t budget_rows = 0;  // total packed rows of seq_len tokens
  std::uint32_t seq_len = 128;
  std::uint32_t batch_rows = 16;
  double text_ratio = 0.30;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static MixtureSpec from_json(const nlohmann::json& j);
  friend bool operator==(const MixtureSpec&, const MixtureSpec&) = default;
};

/// Documents joined with a separator after each one and cut into rows; the
/// last row is padded with mask false on padding. Unmasked documents get
/// mask true everywhere (separator included); masked documents keep their
/// mask and their separator is not a target.
std::vector<TokenSequence> pack_sequences(std::span<const TokenSequence> docs, std::uint32_t seq_len);

/// Inverse of pack_sequences: drops padding and splits at separators.
std::vector<TokenSequence> unpack_sequences(std::span<const TokenSequence> rows);

/// asr: [boa, speech, eoa, text], targets on text.
/// tts: [text, boa, speech, eoa], targets on speech and eoa.
TokenSequence supervised_pair_format(const ParallelPair& pair, SourceKind direction);

/// Text rows in a budget of `rows`: round(text_ratio × rows), halves up.
std::size_t text_rows_for(std::size_t rows, double text_ratio);

/// Smallest budget whose non-text remainder equals `fixed_rows + interleaved_rows`.
std::size_t budget_for(std::size_t fixed_rows, std::size_t interleaved_rows, double text_ratio);

struct MixtureSchedule {
  MixtureSpec spec;
  std::vector<std::size_t> source_rows;       // rows drawn from each source
  std::vector<std::uint32_t> row_source;      // source index of every row, in order
  std::vector<std::size_t> epoch_rows;        // packed rows in one epoch of each source

  std::size_t batches() const noexcept;
  /// Rows per source inside batch `b`.
  std::vector<std::size_t> batch_composition(std::size_t b) const;
  nlohmann::json to_json() const;
};

/// Fatal when a one-epoch source does not fit: the error names the budget
/// that would.
MixtureSchedule compose_mixture(const MixtureSpec& spec, std::span<const Source> sources);

struct PackedBatch {
  std::vector<TokenSequence> rows;
  std::vector<std::uint8_t> tags;  // SourceKind of each row
};

/// Rows in schedule order, grouped into batches. Cycling sources reshuffle
/// their documents every epoch from (seed, source index, epoch).
std::vector<PackedBatch> materialize(const MixtureSchedule& schedule, std::span<const Source> sources);

struct MixtureReport {
  std::size_t rows = 0;
  std::size_t text_rows = 0;
  std::size_t tokens = 0;        // non-pad tokens
  std::size_t text_tokens = 0;   // non-pad tokens in text rows
  double max_batch_text_deviation = 0;  // |text rows - ratio × rows| over batches
  double text_row_share() const noexcept;
  double text_token_share() const noexcept;
  nlohmann::json to_json() const;
};

MixtureReport report_mixture(const MixtureSchedule& schedule, std::span<const PackedBatch> batches);

}  // namespace forge
