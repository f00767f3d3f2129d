#pragma once

// Toy knowledge world, likelihood-based continuation scoring, toy spoken QA,
// dialogue templates, and the train-and-evaluate experiment driver used by
// the ablation sweeps.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "forge/common.hpp"
#include "forge/corpus.hpp"
#include "forge/interleave.hpp"
#include "forge/mixer.hpp"
#include "forge/text2token.hpp"
#include "forge/tinylm.hpp"
#include "json.hpp"

namespace forge::eval {

enum class Setting : std::uint8_t { S = 0, TS = 1, ST = 2, T = 3 };
inline constexpr std::size_t kSettings = 4;

const char* setting_name(Setting s);  // "S", "TS", "ST", "T"
Setting setting_from_name(std::string_view s);

// ---------------------------------------------------------------------------
// Toy world

struct WorldConfig {
  std::uint32_t n_entities = 120;
  std::uint32_t n_relations = 4;
  std::uint32_t n_values = 16;
  double heldout_fraction = 0.25;  // facts that appear only in plain text
  std::uint32_t facts_per_doc = 12;
  std::uint32_t syllables_per_word = 2;
  std::uint32_t distractors = 1;   // items per held-out fact and setting
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static WorldConfig from_json(const nlohmann::json& j);
  friend bool operator==(const WorldConfig&, const WorldConfig&) = default;
};

struct Fact {
  std::uint32_t entity = 0;
  std::uint32_t relation = 0;
  std::uint32_t value = 0;
  bool heldout = false;
};

/// Words are consonant-vowel syllables; every syllable is one lexicon unit.
/// Entity, relation and value words are disjoint; values start with distinct
/// syllables. A fact reads "entity relation is value ." Values are dealt
/// evenly over the facts of each split.
struct ToyWorld {
  WorldConfig config;
  std::vector<std::string> entities, relations, values;
  std::vector<Fact> facts;  // entity-major
  Vocab vocab;              // combined: words then one speech id per unit
  UnitLexicon lexicon;

  const Fact& fact(std::uint32_t e, std::uint32_t r) const { return facts[e * config.n_relations + r]; }
  std::vector<std::string> sentence(const Fact& f) const;
  /// Fact sentences joined into one document, `facts_per_doc` facts drawn
  /// from `pool` with replacement.
  TextDoc document(std::span<const std::uint32_t> pool, Rng& rng, std::string id) const;
  std::vector<std::uint32_t> fact_ids(bool heldout) const;
  std::vector<std::uint32_t> all_fact_ids() const;
};

ToyWorld gen_toy_world(const WorldConfig& cfg, DurationModel duration = {});

// ---------------------------------------------------------------------------
// Items

struct ContinuationItem {
  TokenSequence context;
  std::vector<TokenSequence> candidates;
  std::size_t correct = 0;
  Setting setting = Setting::S;

  nlohmann::json to_json() const;
  static ContinuationItem from_json(const nlohmann::json& j);
};

struct ToyQAItem {
  std::vector<TokenId> question_text;    // "entity relation"
  std::vector<TokenId> question_speech;  // jitter-free rendering of the same words
  std::vector<TokenId> answer;           // in the modality of the setting
  Setting setting = Setting::S;

  nlohmann::json to_json() const;
  static ToyQAItem from_json(const nlohmann::json& j);
};

/// Settings and their contexts for fact (e, r, v):
///   T:  text "e r is"                  -> text v
///   TS: text "e r is" boa              -> speech v
///   ST: boa speech("e r is") eoa       -> text v
///   S:  boa speech("e r is")           -> speech v
/// Distractors are other values; speech candidates are jitter-free.
ContinuationItem make_item(const ToyWorld& w, const Fact& f, std::uint32_t distractor, Setting s);

/// Items over held-out facts (or training facts), `distractors` per fact and
/// setting, drawn from a generator seeded by the world seed.
std::vector<ContinuationItem> make_items(const ToyWorld& w, bool heldout, std::span<const Setting> settings);

/// S:  boa speech("e r") eoa "is" boa -> speech v
/// ST: boa speech("e r") eoa "is"     -> text v
std::vector<ToyQAItem> make_qa_items(const ToyWorld& w, bool heldout);

/// The world is consistent when every item's correct candidate renders the
/// fact's value and no distractor does.
bool check_item(const ToyWorld& w, const Fact& f, const ContinuationItem& item);

// ---------------------------------------------------------------------------
// Scoring

struct SettingScore {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const noexcept { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
  /// Normal-approximation 95% half-width.
  double ci95() const noexcept;
};

using Scores = std::array<SettingScore, kSettings>;

/// Candidate index with the highest (normalized) score; ties to the lowest.
std::size_t pick_candidate(std::span<const double> logprobs, std::span<const std::size_t> counts,
                           bool normalize);

template <typename T>
Scores continuation_accuracy(const lm::Params<T>& params, std::span<const ContinuationItem> items,
                             bool normalize = true);

/// Greedy generation after question + cue; correct iff the answer occurs as a
/// contiguous run. ST answers must contain no speech ids.
template <typename T>
Scores qa_accuracy(const lm::Params<T>& params, std::span<const ToyQAItem> items, const Vocab& vocab,
                   std::size_t max_gen = 32);

nlohmann::json scores_json(const Scores& s);

// ---------------------------------------------------------------------------
// Dialogue templates

enum class DialogueMode { direct, text_guided };

/// direct:      <|system|> <|user|> boa instr eoa <|assistant|> [boa resp eoa]
/// text_guided: <|system|> <|user|> boa instr eoa <|assistant|> <|transcript|>
///              [text] [boa resp eoa]
/// Empty responses leave the prompt open for generation.
TokenSequence format_dialogue(std::span<const TokenId> speech_instruction, DialogueMode mode,
                              std::span<const TokenId> text_response = {},
                              std::span<const TokenId> speech_response = {});

struct ParsedDialogue {
  DialogueMode mode = DialogueMode::direct;
  std::vector<TokenId> instruction;
  std::vector<TokenId> text_response;
  std::vector<TokenId> speech_response;
};

std::optional<ParsedDialogue> parse_dialogue(std::span<const TokenId> ids);

// ---------------------------------------------------------------------------
// Experiments

struct SourceSizes {
  std::uint32_t text_docs = 400;         // cycled
  std::uint32_t interleaved_docs = 800;  // cycled
  std::uint32_t speech_docs = 24;        // one epoch
  std::uint32_t asr_pairs = 120;         // one epoch
  std::uint32_t tts_pairs = 120;         // one epoch

  nlohmann::json to_json() const;
  static SourceSizes from_json(const nlohmann::json& j);
  friend bool operator==(const SourceSizes&, const SourceSizes&) = default;
};

struct ExperimentConfig {
  WorldConfig world;
  DurationModel duration;
  InterleaveConfig interleave;
  SourceSizes sources;
  MixtureSpec mix;               // budget_rows ignored when interleaved_rows is set
  std::optional<std::size_t> interleaved_rows;
  lm::LMConfig lm;
  lm::TrainConfig train;         // steps follow from the schedule
  bool double_precision = false;
  /// No-interleaving control: the interleaved slot carries the same documents
  /// rendered entirely as speech, so budget and content match.
  bool speech_only_control = false;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
};

struct ExperimentData {
  ToyWorld world;
  std::vector<Source> sources;
  InterleaveStats interleave_stats;
  MixtureSchedule schedule;
  std::vector<PackedBatch> batches;
};

/// World, sources and packed batches for a config; pure function of it.
ExperimentData build_experiment_data(const ExperimentConfig& cfg);

struct ExperimentResult {
  bool diverged = false;
  std::uint64_t steps = 0;
  std::size_t train_tokens = 0;
  double final_loss = 0;
  double seconds = 0;
  Scores heldout;  // continuation accuracy on held-out facts
  Scores trained;  // continuation accuracy on training facts
  Scores qa;       // held-out QA
  double speech_ratio = 0;
  nlohmann::json mixture;

  /// Mean of TS and ST held-out accuracy.
  double cross_modal() const noexcept;
  nlohmann::json to_json() const;
};

ExperimentResult run_experiment(const ExperimentConfig& cfg, lm::AnyParams* trained = nullptr);

enum class Axis { interleave_tokens, eta, expansion };
const char* axis_name(Axis a);
Axis axis_from_name(std::string_view s);

struct AblationRow {
  double value = 0;
  std::uint64_t seed = 0;
  ExperimentResult result;
};

/// One run per (grid value, seed). interleave_tokens grid values are token
/// counts of the interleaved slot, rounded to whole rows; eta and expansion
/// keep the base budget.
std::vector<AblationRow> run_ablation(Axis axis, std::span<const double> grid,
                                      std::span<const std::uint64_t> seeds, const ExperimentConfig& base,
                                      const std::function<void(const AblationRow&)>& on_row = {});

nlohmann::json ablation_json(Axis axis, std::span<const AblationRow> rows);

}  // namespace forge::eval
