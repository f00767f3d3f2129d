#pragma once

// Vector quantization with an EMA codebook, as used by a supervised speech
// tokenizer: average pooling, nearest-code lookup, commitment value, EMA
// re-estimation, random restart of starved codes, and the block-causal mask.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "forge/common.hpp"
#include "json.hpp"

namespace forge::vq {

/// Row-major float matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

  float* row(std::size_t i) { return data.data() + i * cols; }
  const float* row(std::size_t i) const { return data.data() + i * cols; }
  friend bool operator==(const Matrix&, const Matrix&) = default;
};

enum class Init { uniform, kmeans_pp };

struct VQConfig {
  std::uint32_t codebook_size = 16;
  std::uint32_t dim = 8;
  std::uint32_t pool_window = 1;
  double ema_decay = 0.99;
  double commitment = 10.0;
  double restart_threshold = 0.01;
  double epsilon = 1e-5;
  Init init = Init::uniform;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static VQConfig from_json(const nlohmann::json& j);
  friend bool operator==(const VQConfig&, const VQConfig&) = default;
};

struct VQState {
  VQConfig config;
  Matrix codebook;                   // codebook_size x dim
  std::vector<float> cluster_size;   // EMA of assignment counts
  Matrix embed_sum;                  // EMA of assigned vector sums
  std::vector<float> usage;          // EMA of assignment frequency
  std::uint64_t step = 0;

  friend bool operator==(const VQState&, const VQState&) = default;
};

/// Row j is the mean of rows [jk, min((j+1)k, T)); the last window may be short.
Matrix pool(const Matrix& features, std::uint32_t k);

/// Codebook rows drawn from `batch`: distinct rows chosen uniformly, or by
/// k-means++ seeding. EMA sums start at the rows, cluster sizes at one, usage
/// at 1 / codebook_size.
VQState init_state(const VQConfig& cfg, const Matrix& batch);

struct Quantized {
  std::vector<std::uint32_t> indices;
  double commitment = 0;  // beta * mean squared distance to the chosen code
};

/// argmin_c |x - e_c|^2, ties to the lowest index.
Quantized quantize(const Matrix& batch, const VQState& state);

/// Per-code assignment counts and vector sums. Folding partial statistics
/// with `merge` before `ema_apply` gives the same state as one pass.
struct CodeStats {
  std::vector<double> counts;
  std::vector<double> sums;  // codebook_size x dim
  std::size_t rows = 0;

  CodeStats(std::size_t codes, std::size_t dim) : counts(codes, 0.0), sums(codes * dim, 0.0) {}
  void accumulate(const Matrix& batch, std::span<const std::uint32_t> indices);
  void merge(const CodeStats& other);
};

void ema_apply(VQState& state, const CodeStats& stats);

/// cluster_size ← γ·old + (1−γ)·count, embed_sum ← γ·old + (1−γ)·Σx,
/// codebook = embed_sum / max(cluster_size, ε), usage ← γ·old + (1−γ)·count/M.
void ema_update(VQState& state, const Matrix& batch, std::span<const std::uint32_t> indices);

/// Codes with usage below the threshold are reset to a uniformly drawn batch
/// row (cluster size 1, embed sum = row, usage back to 1 / codebook_size).
std::vector<std::uint32_t> random_restart(VQState& state, const Matrix& batch, Rng& rng);

/// mask[i * n + j] = 1 iff floor(j / block) <= floor(i / block).
std::vector<std::uint8_t> block_causal_mask(std::size_t seq_len, std::size_t block);

/// Tokens per second after pooling a `base_rate` feature stream by `k`.
double frame_rate(double base_rate, std::uint32_t k);
/// Bits per second: frame_rate × log2(codebook_size).
double bitrate(double frame_rate, std::uint32_t codebook_size);
/// Tokens in a segment of `seconds` at `frame_rate`.
std::size_t tokens_per_block(double frame_rate, double seconds);

// Binary state: magic "FRGVQST1", u32 version, u32 config length, config
// JSON, u64 step, float32 codebook, cluster sizes, embed sums, usage, u32 CRC-32.
void save_state(const std::filesystem::path& path, const VQState& state);
VQState load_state(const std::filesystem::path& path);

}  // namespace forge::vq
