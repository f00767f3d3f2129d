#pragma once

// Command-line front end: a shared run config, subcommand dispatch, and the
// manifest written by every run.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "forge/interleave.hpp"
#include "forge/mixer.hpp"
#include "forge/quantizer.hpp"
#include "forge/text2token.hpp"
#include "forge/tinylm.hpp"
#include "json.hpp"

namespace forge::cli {

/// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitConfig = 3;

struct Paths {
  std::string corpus;
  std::string lexicon;
  std::string shards;
  std::string checkpoints;
  std::string reports;
  friend bool operator==(const Paths&, const Paths&) = default;
};

struct RunConfig {
  std::optional<std::uint64_t> seed;
  Paths paths;
  InterleaveConfig interleave;
  DurationModel duration;
  vq::VQConfig vq;
  MixtureSpec mix = default_mix();
  lm::LMConfig lm;
  lm::TrainConfig train;

  /// Eager check of every section; input paths must exist when set.
  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static MixtureSpec default_mix();
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Empty or whitespace-only text is the default config.
RunConfig parse_config(std::string_view text);
/// Reads, parses and validates. Parse failures are ConfigError("config", ...).
RunConfig validate_config(const std::filesystem::path& file);

/// Lowercase hex SHA-256 of a file / of a string.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_hex(std::string_view data);

/// Build version, `git describe` style.
const char* version();

/// Runs one command line. Output goes to `out`, diagnostics and the one-line
/// error record to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, char** argv);

}  // namespace forge::cli
