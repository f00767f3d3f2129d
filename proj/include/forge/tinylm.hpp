#pragma once

// Minimal decoder-only transformer with hand-written backward pass.
//
// Pre-norm blocks: RMSNorm -> multi-head attention -> residual, RMSNorm ->
// gated feed-forward (SiLU(x Wg) * (x Wu)) Wd -> residual. Learned absolute
// position embeddings, final RMSNorm, tied or untied output head. The
// attention mask is causal or block-causal; block-causal lets every position
// see its whole segment and all earlier segments.
//
// All parameters live in one flat vector so the optimizer, checkpointing and
// finite-difference checks treat them uniformly. Templated on the scalar:
// float for training, double for gradient checking.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "forge/common.hpp"
#include "json.hpp"

namespace forge::lm {

enum class MaskMode { causal, block_causal };

/// NaN or Inf in activations; `where()` names the layer.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

enum class Precision { f32, f64 };

struct LMConfig {
  std::uint32_t vocab_size = 0;
  std::uint32_t layers = 2;
  std::uint32_t dim = 64;
  std::uint32_t heads = 4;
  std::uint32_t ffn_dim = 128;
  std::uint32_t max_seq_len = 128;
  MaskMode mask = MaskMode::causal;
  std::uint32_t block = 25;  // segment length in block_causal mode
  bool tied_head = false;
  Precision precision = Precision::f32;
  std::uint64_t seed = 0;

  std::uint32_t head_dim() const noexcept { return heads ? dim / heads : 0; }
  /// Throws ConfigError naming the offending field.
  void validate() const;

  nlohmann::json to_json() const;
  static LMConfig from_json(const nlohmann::json& j);
  friend bool operator==(const LMConfig&, const LMConfig&) = default;
};

struct TrainConfig {
  std::uint32_t batch_size = 16;
  std::uint64_t steps = 1000;
  double lr_peak = 3e-3;
  double lr_final = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Linear interpolation from lr_peak at step 0 to lr_final at steps - 1.
double lr_at(const TrainConfig& cfg, std::uint64_t step);

struct ParamGroup {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
  bool decay = true;  // weight decay applies (matrices and embeddings)
};

/// Offsets of every parameter block inside the flat vector.
struct Layout {
  struct LayerBlocks {
    std::size_t attn_norm, wqkv, wo, ffn_norm, w_gate, w_up, w_down;
  };

  explicit Layout(const LMConfig& cfg);

  std::size_t tok_emb = 0;
  std::size_t pos_emb = 0;
  std::vector<LayerBlocks> layer;
  std::size_t final_norm = 0;
  std::size_t head = 0;  // unused when tied
  std::size_t total = 0;
  std::vector<ParamGroup> groups;
};

template <typename T>
struct Params {
  LMConfig config;
  std::vector<T> values;

  std::size_t size() const noexcept { return values.size(); }
};

/// Seeded Gaussian init (std 0.02, residual projections scaled by
/// 1/sqrt(2 * layers)); norm gains start at one.
template <typename T>
Params<T> init_params(const LMConfig& cfg);

/// Copy of a checkpoint with a larger vocabulary; rows for the new ids (and
/// the matching output-head columns) are zero.
template <typename T>
Params<T> extend_vocab(const Params<T>& base, std::uint32_t new_vocab_size);

/// Row-major token matrix with a parallel loss mask. mask[r * seq_len + t]
/// marks token t of row r as a prediction target (scored from position t-1);
/// position 0 of a row is never a target.
struct Batch {
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> mask;
  std::size_t rows = 0;
  std::size_t seq_len = 0;
};

/// Logits for every position, shape rows x seq_len x vocab.
template <typename T>
std::vector<T> forward(const Params<T>& params, std::span<const TokenId> tokens,
                       std::size_t rows, std::size_t seq_len);

template <typename T>
struct LossGrads {
  double loss = 0;          // mean NLL over targets
  std::size_t targets = 0;  // number of scored positions
  std::vector<T> grads;     // same layout as Params::values
};

template <typename T>
LossGrads<T> loss_and_grads(const Params<T>& params, const Batch& batch);

/// Loss without the backward pass.
template <typename T>
double loss_only(const Params<T>& params, const Batch& batch);

template <typename T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
};

/// Decoupled-weight-decay Adam on one parameter block. `grad_scale`
/// multiplies the gradients (global-norm clipping).
template <typename T>
void adamw_update(std::span<T> values, std::span<const T> grads, std::span<T> m, std::span<T> v,
                  const TrainConfig& cfg, std::uint64_t step, double lr, bool decay,
                  double grad_scale = 1.0);

/// One decoupled-weight-decay Adam update at 0-based `step` (bias correction
/// uses step + 1). Gradients are clipped to `grad_clip` global norm first.
template <typename T>
void adamw_step(Params<T>& params, std::span<const T> grads, AdamState<T>& state,
                const TrainConfig& cfg, std::uint64_t step);

struct ScoredContinuation {
  double logprob = 0;      // sum over continuation tokens
  std::size_t count = 0;   // continuation length
};

/// Sum of log P(tokens[t] | tokens[<t]) for t >= prefix_len. Requires
/// 1 <= prefix_len < tokens.size().
template <typename T>
ScoredContinuation score_sequence(const Params<T>& params, std::span<const TokenId> tokens,
                                  std::size_t prefix_len);

struct GenerateConfig {
  double temperature = 0;  // 0 = greedy argmax, ties to the lowest id
  std::vector<TokenId> stop_ids;
};

/// Prefix followed by up to `max_tokens` generated ids; stops after emitting
/// a stop id. Generation also stops at max_seq_len.
template <typename T>
std::vector<TokenId> generate(const Params<T>& params, std::span<const TokenId> prefix,
                              std::size_t max_tokens, Rng& rng, const GenerateConfig& cfg = {});

struct StepMetrics {
  std::uint64_t step = 0;
  double loss = 0;
  double lr = 0;
  double tokens_per_s = 0;
};

template <typename T>
struct TrainResult {
  Params<T> params;           // last parameters with a finite loss
  bool diverged = false;
  std::uint64_t steps_done = 0;
  std::vector<StepMetrics> history;
};

using BatchSource = std::function<Batch(std::uint64_t step)>;
using StepCallback = std::function<void(const StepMetrics&)>;

/// Sequential training loop: cfg.steps AdamW steps on batches from `source`.
/// A non-finite loss stops training and returns the last finite parameters.
template <typename T>
TrainResult<T> train(Params<T> params, const TrainConfig& cfg, const BatchSource& source,
                     const StepCallback& on_step = {});

// ---------------------------------------------------------------------------
// Checkpoints: magic "FRGCKPT1", u32 scalar bytes, u32 config length, config
// JSON, u64 parameter count, little-endian scalars, u32 CRC-32 of all
// preceding bytes.

using AnyParams = std::variant<Params<float>, Params<double>>;

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Params<T>& params);
AnyParams load_checkpoint(const std::filesystem::path& path);

template <typename To, typename From>
Params<To> convert(const Params<From>& p) {
  Params<To> out;
  out.config = p.config;
  out.config.precision = sizeof(To) == 8 ? Precision::f64 : Precision::f32;
  out.values.assign(p.values.begin(), p.values.end());
  return out;
}

}  // namespace forge::lm
