#include "forge/quantizer.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

namespace forge::vq {

namespace {

constexpr char kMagic[8] = {'F', 'R', 'G', 'V', 'Q', 'S', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

double sq_dist(const float* a, const float* b, std::size_t d) {
  double s = 0;
  for (std::size_t j = 0; j < d; ++j) {
    const double t = static_cast<double>(a[j]) - static_cast<double>(b[j]);
    s += t * t;
  }
  return s;
}

void check_finite(const Matrix& m) {
  for (std::size_t i = 0; i < m.data.size(); ++i)
    if (!std::isfinite(m.data[i]))
      throw Error("non-finite feature", "row " + std::to_string(i / std::max<std::size_t>(m.cols, 1)));
}

template <typename U>
void put(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_floats(std::vector<std::uint8_t>& out, std::span<const float> v) {
  for (float f : v) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put(out, bits);
  }
}

template <typename U>
U get(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void VQConfig::validate() const {
  if (codebook_size < 2) throw ConfigError("vq.codebook_size", "must be >= 2");
  if (dim < 1) throw ConfigError("vq.dim", "must be >= 1");
  if (pool_window < 1) throw ConfigError("vq.pool_window", "must be >= 1");
  if (!(ema_decay > 0 && ema_decay < 1)) throw ConfigError("vq.ema_decay", "must be in (0, 1)");
  if (!(commitment >= 0)) throw ConfigError("vq.commitment", "must be >= 0");
  if (!(restart_threshold >= 0)) throw ConfigError("vq.restart_threshold", "must be >= 0");
  if (!(epsilon > 0)) throw ConfigError("vq.epsilon", "must be > 0");
}

nlohmann::json VQConfig::to_json() const {
  return {{"codebook_size", codebook_size},
          {"dim", dim},
          {"pool_window", pool_window},
          {"ema_decay", ema_decay},
          {"commitment", commitment},
          {"restart_threshold", restart_threshold},
          {"epsilon", epsilon},
          {"init", init == Init::uniform ? "uniform" : "kmeans_pp"},
          {"seed", seed}};
}

VQConfig VQConfig::from_json(const nlohmann::json& j) {
  VQConfig c;
  c.codebook_size = j.value("codebook_size", c.codebook_size);
  c.dim = j.value("dim", c.dim);
  c.pool_window = j.value("pool_window", c.pool_window);
  c.ema_decay = j.value("ema_decay", c.ema_decay);
  c.commitment = j.value("commitment", c.commitment);
  c.restart_threshold = j.value("restart_threshold", c.restart_threshold);
  c.epsilon = j.value("epsilon", c.epsilon);
  const auto init = j.value("init", std::string("uniform"));
  if (init == "uniform") c.init = Init::uniform;
  else if (init == "kmeans_pp") c.init = Init::kmeans_pp;
  else throw ConfigError("vq.init", "must be uniform or kmeans_pp");
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

Matrix pool(const Matrix& features, std::uint32_t k) {
  if (k < 1) throw ConfigError("vq.pool_window", "must be >= 1");
  if (features.rows == 0) throw Error("pool needs at least one row");
  const std::size_t out_rows = (features.rows + k - 1) / k;
  Matrix out(out_rows, features.cols);
  for (std::size_t r = 0; r < out_rows; ++r) {
    const std::size_t lo = r * k, hi = std::min<std::size_t>(lo + k, features.rows);
    for (std::size_t c = 0; c < features.cols; ++c) {
      double s = 0;
      for (std::size_t i = lo; i < hi; ++i) s += features.row(i)[c];
      out.row(r)[c] = static_cast<float>(s / static_cast<double>(hi - lo));
    }
  }
  return out;
}

VQState init_state(const VQConfig& cfg, const Matrix& batch) {
  cfg.validate();
  if (batch.cols != cfg.dim) throw Error("batch dim does not match vq.dim");
  if (batch.rows == 0) throw Error("codebook init needs a non-empty batch");
  check_finite(batch);
  const std::size_t K = cfg.codebook_size, D = cfg.dim;
  Rng rng(cfg.seed);
  std::vector<std::size_t> rows;
  if (cfg.init == Init::uniform) {
    std::vector<std::size_t> all(batch.rows);
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::ranges::shuffle(all, rng);
    for (std::size_t c = 0; c < K; ++c) rows.push_back(all[c % all.size()]);
  } else {
    std::uniform_int_distribution<std::size_t> first(0, batch.rows - 1);
    rows.push_back(first(rng));
    std::vector<double> d2(batch.rows, INFINITY);
    while (rows.size() < K) {
      for (std::size_t i = 0; i < batch.rows; ++i)
        d2[i] = std::min(d2[i], sq_dist(batch.row(i), batch.row(rows.back()), D));
      const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
      if (total <= 0) {
        rows.push_back(first(rng));
        continue;
      }
      std::discrete_distribution<std::size_t> pick(d2.begin(), d2.end());
      rows.push_back(pick(rng));
    }
  }
  VQState s;
  s.config = cfg;
  s.codebook = Matrix(K, D);
  s.embed_sum = Matrix(K, D);
  s.cluster_size.assign(K, 1.0f);
  s.usage.assign(K, 1.0f / static_cast<float>(K));
  for (std::size_t c = 0; c < K; ++c) {
    std::copy_n(batch.row(rows[c]), D, s.codebook.row(c));
    std::copy_n(batch.row(rows[c]), D, s.embed_sum.row(c));
  }
  return s;
}

Quantized quantize(const Matrix& batch, const VQState& state) {
  if (batch.cols != state.codebook.cols) throw Error("batch dim does not match the codebook");
  check_finite(batch);
  const std::size_t K = state.codebook.rows, D = batch.cols;
  Quantized q;
  q.indices.resize(batch.rows);
  double total = 0;
  for (std::size_t m = 0; m < batch.rows; ++m) {
    std::uint32_t best = 0;
    double best_d = sq_dist(batch.row(m), state.codebook.row(0), D);
    for (std::size_t c = 1; c < K; ++c) {
      const double d = sq_dist(batch.row(m), state.codebook.row(c), D);
      if (d < best_d) {
        best_d = d;
        best = static_cast<std::uint32_t>(c);
      }
    }
    q.indices[m] = best;
    total += best_d;
  }
  q.commitment = batch.rows ? state.config.commitment * total / static_cast<double>(batch.rows) : 0.0;
  return q;
}

void CodeStats::accumulate(const Matrix& batch, std::span<const std::uint32_t> indices) {
  if (indices.size() != batch.rows) throw Error("index count does not match the batch");
  const std::size_t D = batch.cols;
  for (std::size_t m = 0; m < batch.rows; ++m) {
    const auto c = indices[m];
    if (c >= counts.size()) throw Error("code index out of range");
    counts[c] += 1.0;
    for (std::size_t j = 0; j < D; ++j) sums[c * D + j] += batch.row(m)[j];
  }
  rows += batch.rows;
}

void CodeStats::merge(const CodeStats& other) {
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  for (std::size_t i = 0; i < sums.size(); ++i) sums[i] += other.sums[i];
  rows += other.rows;
}

void ema_apply(VQState& state, const CodeStats& stats) {
  const double g = state.config.ema_decay, eps = state.config.epsilon;
  const std::size_t K = state.codebook.rows, D = state.codebook.cols;
  const double inv_rows = stats.rows ? 1.0 / static_cast<double>(stats.rows) : 0.0;
  for (std::size_t c = 0; c < K; ++c) {
    const double size = g * state.cluster_size[c] + (1 - g) * stats.counts[c];
    state.cluster_size[c] = static_cast<float>(size);
    state.usage[c] = static_cast<float>(g * state.usage[c] + (1 - g) * stats.counts[c] * inv_rows);
    const double denom = std::max(static_cast<double>(state.cluster_size[c]), eps);
    for (std::size_t j = 0; j < D; ++j) {
      const double sum = g * state.embed_sum.row(c)[j] + (1 - g) * stats.sums[c * D + j];
      state.embed_sum.row(c)[j] = static_cast<float>(sum);
      state.codebook.row(c)[j] = static_cast<float>(state.embed_sum.row(c)[j] / denom);
    }
  }
  ++state.step;
}

void ema_update(VQState& state, const Matrix& batch, std::span<const std::uint32_t> indices) {
  CodeStats stats(state.codebook.rows, state.codebook.cols);
  stats.accumulate(batch, indices);
  ema_apply(state, stats);
}

std::vector<std::uint32_t> random_restart(VQState& state, const Matrix& batch, Rng& rng) {
  if (batch.rows == 0) throw Error("random_restart needs a non-empty batch");
  if (batch.cols != state.codebook.cols) throw Error("batch dim does not match the codebook");
  std::vector<std::uint32_t> reset;
  std::uniform_int_distribution<std::size_t> pick(0, batch.rows - 1);
  const std::size_t K = state.codebook.rows, D = state.codebook.cols;
  for (std::size_t c = 0; c < K; ++c) {
    if (!(state.usage[c] < state.config.restart_threshold)) continue;
    const float* r = batch.row(pick(rng));
    std::copy_n(r, D, state.codebook.row(c));
    std::copy_n(r, D, state.embed_sum.row(c));
    state.cluster_size[c] = 1.0f;
    state.usage[c] = 1.0f / static_cast<float>(K);
    reset.push_back(static_cast<std::uint32_t>(c));
  }
  return reset;
}

std::vector<std::uint8_t> block_causal_mask(std::size_t seq_len, std::size_t block) {
  if (block < 1) throw ConfigError("lm.block", "must be >= 1");
  std::vector<std::uint8_t> m(seq_len * seq_len, 0);
  for (std::size_t i = 0; i < seq_len; ++i)
    for (std::size_t j = 0; j < seq_len; ++j) m[i * seq_len + j] = j / block <= i / block;
  return m;
}

double frame_rate(double base_rate, std::uint32_t k) {
  if (k < 1) throw ConfigError("vq.pool_window", "must be >= 1");
  return base_rate / k;
}

double bitrate(double frame_rate, std::uint32_t codebook_size) {
  return frame_rate * std::log2(static_cast<double>(codebook_size));
}

std::size_t tokens_per_block(double frame_rate, double seconds) {
  return static_cast<std::size_t>(std::llround(frame_rate * seconds));
}

void save_state(const std::filesystem::path& path, const VQState& s) {
  std::vector<std::uint8_t> buf(kMagic, kMagic + 8);
  put<std::uint32_t>(buf, kVersion);
  const auto cfg = s.config.to_json().dump();
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(cfg.size()));
  buf.insert(buf.end(), cfg.begin(), cfg.end());
  put<std::uint64_t>(buf, s.step);
  put_floats(buf, s.codebook.data);
  put_floats(buf, s.cluster_size);
  put_floats(buf, s.embed_sum.data);
  put_floats(buf, s.usage);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(crc32(0L, buf.data(), static_cast<uInt>(buf.size()))));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write vq state", path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

VQState load_state(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open vq state", path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto at = [&](std::size_t off) { return path.string() + "@" + std::to_string(off); };
  if (buf.size() < 28) throw Error("truncated vq state", at(buf.size()));
  if (std::memcmp(buf.data(), kMagic, 8) != 0) throw Error("bad vq state magic", at(0));
  if (get<std::uint32_t>(buf.data() + buf.size() - 4) !=
      crc32(0L, buf.data(), static_cast<uInt>(buf.size() - 4)))
    throw Error("vq state checksum mismatch", at(buf.size() - 4));
  if (get<std::uint32_t>(buf.data() + 8) != kVersion) throw Error("unsupported vq state version", at(8));
  const auto cfg_len = get<std::uint32_t>(buf.data() + 12);
  std::size_t off = 16;
  if (off + cfg_len + 8 > buf.size()) throw Error("truncated vq state", at(off));
  VQState s;
  s.config = VQConfig::from_json(
      nlohmann::json::parse(std::string(reinterpret_cast<const char*>(buf.data() + off), cfg_len)));
  off += cfg_len;
  s.step = get<std::uint64_t>(buf.data() + off);
  off += 8;
  const std::size_t K = s.config.codebook_size, D = s.config.dim;
  if (off + 4 * (2 * K * D + 2 * K) + 4 != buf.size()) throw Error("truncated vq state payload", at(off));
  auto floats = [&](std::vector<float>& v, std::size_t n) {
    v.resize(n);
    for (auto& f : v) {
      const auto bits = get<std::uint32_t>(buf.data() + off);
      std::memcpy(&f, &bits, 4);
      off += 4;
    }
  };
  s.codebook = Matrix(K, D);
  s.embed_sum = Matrix(K, D);
  floats(s.codebook.data, K * D);
  floats(s.cluster_size, K);
  floats(s.embed_sum.data, K * D);
  floats(s.usage, K);
  return s;
}

}  // namespace forge::vq
