#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace forge {

using TokenId = std::uint32_t;
using Rng = std::mt19937_64;

/// Fatal pipeline error. `where` carries a field path, byte offset or
/// other locator when one exists.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, std::string where = {})
      : std::runtime_error(where.empty() ? what : where + ": " + what),
        where_(std::move(where)) {}

  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

/// Raised by config validation; `where()` is the dotted field path.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& field, const std::string& what)
      : Error(what, field) {}
};

/// Mixed-modality token ids over a combined vocabulary. An empty loss_mask
/// means every position is a training target.
struct TokenSequence {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> loss_mask;

  TokenSequence() = default;
  explicit TokenSequence(std::vector<TokenId> i) : ids(std::move(i)) {}
  TokenSequence(std::vector<TokenId> i, std::vector<std::uint8_t> m)
      : ids(std::move(i)), loss_mask(std::move(m)) {}

  std::size_t size() const noexcept { return ids.size(); }
  bool empty() const noexcept { return ids.empty(); }
  bool has_mask() const noexcept { return !loss_mask.empty(); }
  bool target(std::size_t pos) const noexcept {
    return loss_mask.empty() || loss_mask[pos] != 0;
  }

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// 64-bit FNV-1a. Stable across platforms and runs, unlike std::hash.
constexpr std::uint64_t stable_hash(std::string_view s,
                                    std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Generator for one unit of parallel work, keyed by a global seed and a
/// path of integers (doc hash, span index, ...). Independent of schedule.
inline Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::vector<std::uint32_t> words;
  words.reserve(2 + 2 * path.size());
  words.push_back(static_cast<std::uint32_t>(seed));
  words.push_back(static_cast<std::uint32_t>(seed >> 32));
  for (auto p : path) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

/// Line-delimited JSON log record on stderr. `fields_json` must be a JSON
/// object; its keys are merged into the record.
void log_event(std::string_view level, std::string_view msg,
               const std::string& fields_json = "{}");

/// Records below `level` ("debug" < "info" < "warn" < "error") are dropped.
void set_log_level(std::string_view level);

}  // namespace forge
