#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "forge/common.hpp"
#include "json.hpp"

namespace forge {

struct TextDoc {
  std::string id;
  std::string text;  // normalized: lowercase, single spaces, trimmed
};

/// Lowercase ASCII letters and collapse runs of whitespace to one space.
std::string normalize_text(std::string_view raw);

/// Split normalized text on single spaces.
std::vector<std::string> split_words(std::string_view text);

// ---------------------------------------------------------------------------
// Vocabulary

enum class VocabKind { text, speech, combined };

/// Reserved ids at the bottom of every text/combined vocabulary.
namespace special {
inline constexpr TokenId pad = 0;
inline constexpr TokenId unk = 1;
inline constexpr TokenId sep = 2;
inline constexpr TokenId begin_of_audio = 3;
inline constexpr TokenId end_of_audio = 4;
inline constexpr TokenId system = 5;
inline constexpr TokenId user = 6;
inline constexpr TokenId assistant = 7;
inline constexpr TokenId transcript = 8;
inline constexpr std::uint32_t count = 9;
}  // namespace special

/// Dense id space. Text ids (specials first) occupy [0, text_size); speech
/// ids occupy [text_size, text_size + speech_size) in a combined vocab.
class Vocab {
 public:
  Vocab() = default;

  /// Text vocab holding only the special tokens.
  static Vocab specials_only();
  /// Speech-only vocab of `n` units; ids start at 0.
  static Vocab speech(std::uint32_t n);
  /// V_lang ∪ V_speech: the text vocab followed by `speech_size` speech ids.
  static Vocab combine(const Vocab& text, std::uint32_t speech_size);

  VocabKind kind() const noexcept { return kind_; }
  std::uint32_t size() const noexcept { return static_cast<std::uint32_t>(surfaces_.size()); }
  std::uint32_t text_size() const noexcept { return text_size_; }
  std::uint32_t speech_size() const noexcept { return size() - text_size_; }
  TokenId speech_base() const noexcept { return text_size_; }

  /// Id for a surface form; `special::unk` when absent (text kinds only).
  TokenId id(std::string_view surface) const;
  std::optional<TokenId> find(std::string_view surface) const;
  const std::string& surface(TokenId id) const { return surfaces_.at(id); }

  bool is_speech(TokenId id) const noexcept { return id >= text_size_ && id < size(); }
  bool is_special(TokenId id) const noexcept {
    return kind_ != VocabKind::speech && id < special::count;
  }
  bool is_text_content(TokenId id) const noexcept {
    return kind_ != VocabKind::speech && id >= special::count && id < text_size_;
  }
  TokenId speech_id(std::uint32_t unit) const { return text_size_ + unit; }

  /// Content words in id order (specials excluded).
  std::vector<std::string> words() const;

  void add_word(const std::string& w);

  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.kind_ == b.kind_ && a.text_size_ == b.text_size_ && a.surfaces_ == b.surfaces_;
  }

 private:
  VocabKind kind_ = VocabKind::text;
  std::uint32_t text_size_ = 0;
  std::vector<std::string> surfaces_;
  std::unordered_map<std::string, TokenId> index_;
};

// ---------------------------------------------------------------------------
// JSONL ingestion

/// Streams TextDocs from a JSONL file in file order. Lines that are not JSON
/// objects with a non-empty string `text`, or that repeat an earlier id, are
/// skipped and counted.
class JsonlReader {
 public:
  explicit JsonlReader(const std::filesystem::path& path);

  std::optional<TextDoc> next();
  std::size_t skipped() const noexcept { return skipped_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::size_t line_ = 0;
  std::size_t skipped_ = 0;
  std::unordered_map<std::string, std::size_t> seen_ids_;
};

struct LoadedCorpus {
  std::vector<TextDoc> docs;
  std::size_t skipped = 0;
};

LoadedCorpus load_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, std::span<const TextDoc> docs);

/// Specials, then words by descending frequency (ties by first occurrence),
/// dropping words seen fewer than `min_freq` times, truncated to `max_size`.
Vocab build_text_vocab(std::span<const TextDoc> docs, std::size_t max_size,
                       std::size_t min_freq = 1);

TokenSequence encode_text(const TextDoc& doc, const Vocab& vocab);
TokenSequence encode_words(std::span<const std::string> words, const Vocab& vocab);
std::string decode_text(std::span<const TokenId> ids, const Vocab& vocab);

// ---------------------------------------------------------------------------
// Binary shards
//
// Layout (all integers little-endian):
//   0  char[8]  magic "FRGSHARD"
//   8  u32      version
//   12 u32      text vocab size
//   16 u32      speech vocab size
//   20 u32      sequence length
//   24 u64      sequence count
//   32 u32      CRC-32 of everything after the header
//   36 u32      CRC-32 of bytes [0, 36)
//   40 u32[count * seq_len]           token ids
//      u8[ceil(count * seq_len / 8)]  loss-mask bits, LSB first
//      u8[count]                      per-row source tag

inline constexpr std::uint32_t kShardVersion = 1;
inline constexpr std::size_t kShardHeaderBytes = 40;

struct ShardInfo {
  std::uint32_t text_vocab_size = 0;
  std::uint32_t speech_vocab_size = 0;
  std::uint32_t seq_len = 0;
  std::uint64_t count = 0;
  std::uint32_t payload_crc = 0;

  std::uint32_t vocab_size() const noexcept { return text_vocab_size + speech_vocab_size; }
};

struct ShardData {
  ShardInfo info;
  std::vector<TokenSequence> seqs;  // every entry carries a full loss mask
  std::vector<std::uint8_t> tags;
};

/// Every sequence must have `seq_len` ids, each below the vocab size. An
/// empty `tags` writes zero tags.
ShardInfo write_shard(const std::filesystem::path& path, std::span<const TokenSequence> seqs,
                      std::uint32_t text_vocab_size, std::uint32_t speech_vocab_size,
                      std::uint32_t seq_len, std::span<const std::uint8_t> tags = {});

ShardData read_shard(const std::filesystem::path& path);

/// All `*.shard` files in a directory, sorted by name.
std::vector<std::filesystem::path> list_shards(const std::filesystem::path& dir);

}  // namespace forge
