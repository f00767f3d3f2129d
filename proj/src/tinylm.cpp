#include "forge/tinylm.hpp"

#include <zlib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace forge::lm {

namespace {

constexpr double kNormEps = 1e-5;
constexpr char kCkptMagic[8] = {'F', 'R', 'G', 'C', 'K', 'P', 'T', '1'};

const char* mask_name(MaskMode m) { return m == MaskMode::causal ? "causal" : "block_causal"; }
const char* precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

// y[n x k] = x[n x d] * w[d x k]; accumulates into y when `acc`. Four rows
// of x share each pass over a row of w.
template <typename T>
void matmul(T* __restrict y, const T* __restrict x, const T* __restrict w, std::size_t n,
            std::size_t d, std::size_t k, bool acc = false) {
  if (!acc) std::fill(y, y + n * k, T(0));
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    T* __restrict y0 = y + i * k;
    T* __restrict y1 = y0 + k;
    T* __restrict y2 = y1 + k;
    T* __restrict y3 = y2 + k;
    const T* x0 = x + i * d;
    for (std::size_t j = 0; j < d; ++j) {
      const T a0 = x0[j], a1 = x0[d + j], a2 = x0[2 * d + j], a3 = x0[3 * d + j];
      const T* __restrict wr = w + j * k;
      for (std::size_t c = 0; c < k; ++c) {
        const T wv = wr[c];
        y0[c] += a0 * wv;
        y1[c] += a1 * wv;
        y2[c] += a2 * wv;
        y3[c] += a3 * wv;
      }
    }
  }
  for (; i < n; ++i) {
    T* __restrict yr = y + i * k;
    const T* xr = x + i * d;
    for (std::size_t j = 0; j < d; ++j) {
      const T a = xr[j];
      const T* __restrict wr = w + j * k;
      for (std::size_t c = 0; c < k; ++c) yr[c] += a * wr[c];
    }
  }
}

// y[n x d] = x[n x k] * w[d x k]^T
template <typename T>
void matmul_bt(T* y, const T* x, const T* w, std::size_t n, std::size_t k, std::size_t d,
               bool acc = false) {
  thread_local std::vector<T> wt;
  wt.resize(d * k);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < k; ++c) wt[c * d + r] = w[r * k + c];
  matmul(y, x, wt.data(), n, k, d, acc);
}

// dw[d x k] += x[n x d]^T * dy[n x k]
template <typename T>
void matmul_at(T* __restrict dw, const T* __restrict x, const T* __restrict dy, std::size_t n,
               std::size_t d, std::size_t k) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const T* x0 = x + i * d;
    const T* __restrict d0 = dy + i * k;
    const T* __restrict d1 = d0 + k;
    const T* __restrict d2 = d1 + k;
    const T* __restrict d3 = d2 + k;
    for (std::size_t j = 0; j < d; ++j) {
      const T a0 = x0[j], a1 = x0[d + j], a2 = x0[2 * d + j], a3 = x0[3 * d + j];
      T* __restrict dwr = dw + j * k;
      for (std::size_t c = 0; c < k; ++c) dwr[c] += a0 * d0[c] + a1 * d1[c] + a2 * d2[c] + a3 * d3[c];
    }
  }
  for (; i < n; ++i) {
    const T* xr = x + i * d;
    const T* __restrict dyr = dy + i * k;
    for (std::size_t j = 0; j < d; ++j) {
      const T a = xr[j];
      T* __restrict dwr = dw + j * k;
      for (std::size_t c = 0; c < k; ++c) dwr[c] += a * dyr[c];
    }
  }
}

template <typename T>
void rmsnorm(T* y, T* inv, const T* x, const T* g, std::size_t n, std::size_t d) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = x + i * d;
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const T r = T(1) / std::sqrt(ss / T(d) + T(kNormEps));
    inv[i] = r;
    T* yr = y + i * d;
    for (std::size_t j = 0; j < d; ++j) yr[j] = xr[j] * r * g[j];
  }
}

// dx += d(rmsnorm)/dx . dy ; dg += ...
template <typename T>
void rmsnorm_backward(T* dx, T* dg, const T* dy, const T* x, const T* inv, const T* g,
                      std::size_t n, std::size_t d) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = x + i * d;
    const T* dyr = dy + i * d;
    const T r = inv[i];
    T dot = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const T xhat = xr[j] * r;
      dg[j] += dyr[j] * xhat;
      dot += dyr[j] * g[j] * xhat;
    }
    dot /= T(d);
    T* dxr = dx + i * d;
    for (std::size_t j = 0; j < d; ++j) dxr[j] += r * (dyr[j] * g[j] - xr[j] * r * dot);
  }
}

template <typename T>
T sigmoid(T a) {
  return T(1) / (T(1) + std::exp(-a));
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
  for (T x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// Forward caches and scratch for one (rows, seq_len) shape.
template <typename T>
class Engine {
 public:
  Engine(const Params<T>& p, std::size_t rows, std::size_t seq)
      : p_(p), cfg_(p.config), lay_(p.config), B_(rows), S_(seq), N_(rows * seq) {
    if (S_ == 0 || B_ == 0) throw Error("empty batch");
    if (S_ > cfg_.max_seq_len)
      throw Error("sequence length " + std::to_string(S_) + " exceeds max_seq_len " +
                  std::to_string(cfg_.max_seq_len));
    const std::size_t D = cfg_.dim, F = cfg_.ffn_dim, H = cfg_.heads, L = cfg_.layers;
    layers_.resize(L);
    for (auto& c : layers_) {
      c.x_in.resize(N_ * D);
      c.inv1.resize(N_);
      c.h1.resize(N_ * D);
      c.qkv.resize(N_ * 3 * D);
      c.att.resize(B_ * H * S_ * S_);
      c.ao.resize(N_ * D);
      c.x_mid.resize(N_ * D);
      c.inv2.resize(N_);
      c.h2.resize(N_ * D);
      c.gate.resize(N_ * F);
      c.up.resize(N_ * F);
      c.act.resize(N_ * F);
    }
    x_out_.resize(N_ * D);
    invf_.resize(N_);
    hf_.resize(N_ * D);
    logits_.resize(N_ * cfg_.vocab_size);
  }

  std::size_t limit(std::size_t i) const {
    if (cfg_.mask == MaskMode::causal) return i + 1;
    const std::size_t b = cfg_.block;
    return std::min(S_, (i / b + 1) * b);
  }

  void forward(std::span<const TokenId> tokens) {
    if (tokens.size() != N_) throw Error("token count does not match batch shape");
    const std::size_t D = cfg_.dim, F = cfg_.ffn_dim, H = cfg_.heads, hd = cfg_.head_dim();
    const std::size_t V = cfg_.vocab_size;
    const T* W = p_.values.data();
    const T scale = T(1) / std::sqrt(T(hd));

    std::vector<T> x(N_ * D);
    for (std::size_t n = 0; n < N_; ++n) {
      if (tokens[n] >= V) throw Error("token id " + std::to_string(tokens[n]) + " >= vocab size");
      const T* e = W + lay_.tok_emb + std::size_t{tokens[n]} * D;
      const T* pe = W + lay_.pos_emb + (n % S_) * D;
      for (std::size_t j = 0; j < D; ++j) x[n * D + j] = e[j] + pe[j];
    }

    std::vector<T> tmp(N_ * D);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      auto& c = layers_[l];
      const auto& lb = lay_.layer[l];
      c.x_in = x;
      rmsnorm(c.h1.data(), c.inv1.data(), x.data(), W + lb.attn_norm, N_, D);
      matmul(c.qkv.data(), c.h1.data(), W + lb.wqkv, N_, D, 3 * D);

      for (std::size_t b = 0; b < B_; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
          for (std::size_t i = 0; i < S_; ++i) {
            const T* q = c.qkv.data() + (b * S_ + i) * 3 * D + h * hd;
            T* prow = c.att.data() + ((b * H + h) * S_ + i) * S_;
            const std::size_t lim = limit(i);
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < lim; ++j) {
              const T* k = c.qkv.data() + (b * S_ + j) * 3 * D + D + h * hd;
              T s = 0;
              for (std::size_t u = 0; u < hd; ++u) s += q[u] * k[u];
              s *= scale;
              prow[j] = s;
              mx = std::max(mx, s);
            }
            T sum = 0;
            for (std::size_t j = 0; j < lim; ++j) {
              prow[j] = std::exp(prow[j] - mx);
              sum += prow[j];
            }
            const T inv = T(1) / sum;
            T* o = c.ao.data() + (b * S_ + i) * D + h * hd;
            std::fill(o, o + hd, T(0));
            for (std::size_t j = 0; j < lim; ++j) {
              prow[j] *= inv;
              const T* v = c.qkv.data() + (b * S_ + j) * 3 * D + 2 * D + h * hd;
              for (std::size_t u = 0; u < hd; ++u) o[u] += prow[j] * v[u];
            }
            std::fill(prow + lim, prow + S_, T(0));
          }
        }
      }
      matmul(tmp.data(), c.ao.data(), W + lb.wo, N_, D, D);
      for (std::size_t i = 0; i < N_ * D; ++i) x[i] += tmp[i];
      c.x_mid = x;

      rmsnorm(c.h2.data(), c.inv2.data(), x.data(), W + lb.ffn_norm, N_, D);
      matmul(c.gate.data(), c.h2.data(), W + lb.w_gate, N_, D, F);
      matmul(c.up.data(), c.h2.data(), W + lb.w_up, N_, D, F);
      for (std::size_t i = 0; i < N_ * F; ++i) c.act[i] = c.gate[i] * sigmoid(c.gate[i]) * c.up[i];
      matmul(tmp.data(), c.act.data(), W + lb.w_down, N_, F, D);
      for (std::size_t i = 0; i < N_ * D; ++i) x[i] += tmp[i];
      if (!all_finite(x)) throw NonFiniteError("non-finite activation", "layer " + std::to_string(l));
    }

    x_out_ = x;
    rmsnorm(hf_.data(), invf_.data(), x.data(), W + lay_.final_norm, N_, D);
    if (cfg_.tied_head) {
      matmul_bt(logits_.data(), hf_.data(), W + lay_.tok_emb, N_, D, V);
    } else {
      matmul(logits_.data(), hf_.data(), W + lay_.head, N_, D, V);
    }
    if (!all_finite(logits_))
      throw NonFiniteError("non-finite logits", "layer " + std::to_string(layers_.size()));
  }

  // Mean NLL over masked targets; fills dlogits (already divided by count).
  double loss(std::span<const TokenId> tokens, std::span<const std::uint8_t> mask,
              std::size_t& targets, std::vector<T>* dlogits) {
    const std::size_t V = cfg_.vocab_size;
    targets = 0;
    for (std::size_t b = 0; b < B_; ++b)
      for (std::size_t t = 1; t < S_; ++t)
        if (mask.empty() || mask[b * S_ + t]) ++targets;
    if (targets == 0) throw Error("loss mask selects no targets");
    if (dlogits) dlogits->assign(N_ * V, T(0));
    double total = 0;
    const T inv_count = T(1) / T(targets);
    for (std::size_t b = 0; b < B_; ++b) {
      for (std::size_t t = 1; t < S_; ++t) {
        if (!(mask.empty() || mask[b * S_ + t])) continue;
        const std::size_t row = b * S_ + t - 1;
        const T* lg = logits_.data() + row * V;
        const T mx = *std::max_element(lg, lg + V);
        T sum = 0;
        for (std::size_t v = 0; v < V; ++v) sum += std::exp(lg[v] - mx);
        const TokenId y = tokens[b * S_ + t];
        total += -(static_cast<double>(lg[y] - mx) - std::log(static_cast<double>(sum)));
        if (dlogits) {
          T* d = dlogits->data() + row * V;
          const T inv_sum = T(1) / sum;
          for (std::size_t v = 0; v < V; ++v) d[v] = std::exp(lg[v] - mx) * inv_sum * inv_count;
          d[y] -= inv_count;
        }
      }
    }
    return total / static_cast<double>(targets);
  }

  void backward(std::span<const TokenId> tokens, const std::vector<T>& dlogits,
                std::vector<T>& grads) {
    const std::size_t D = cfg_.dim, F = cfg_.ffn_dim, H = cfg_.heads, hd = cfg_.head_dim();
    const std::size_t V = cfg_.vocab_size;
    const T* W = p_.values.data();
    T* G = grads.data();
    const T scale = T(1) / std::sqrt(T(hd));

    std::vector<T> dhf(N_ * D);
    if (cfg_.tied_head) {
      matmul_at(G + lay_.tok_emb, dlogits.data(), hf_.data(), N_, V, D);
      matmul(dhf.data(), dlogits.data(), W + lay_.tok_emb, N_, V, D);
    } else {
      matmul_at(G + lay_.head, hf_.data(), dlogits.data(), N_, D, V);
      matmul_bt(dhf.data(), dlogits.data(), W + lay_.head, N_, V, D);
    }
    std::vector<T> dx(N_ * D, T(0));
    rmsnorm_backward(dx.data(), G + lay_.final_norm, dhf.data(), x_out_.data(), invf_.data(),
                     W + lay_.final_norm, N_, D);

    std::vector<T> dact(N_ * F), dgate(N_ * F), dup(N_ * F), dh(N_ * D), dao(N_ * D),
        dqkv(N_ * 3 * D);
    for (std::size_t l = layers_.size(); l-- > 0;) {
      auto& c = layers_[l];
      const auto& lb = lay_.layer[l];

      // feed-forward
      matmul_at(G + lb.w_down, c.act.data(), dx.data(), N_, F, D);
      matmul_bt(dact.data(), dx.data(), W + lb.w_down, N_, D, F);
      for (std::size_t i = 0; i < N_ * F; ++i) {
        const T a = c.gate[i];
        const T s = sigmoid(a);
        const T silu = a * s;
        dup[i] = dact[i] * silu;
        dgate[i] = dact[i] * c.up[i] * s * (T(1) + a * (T(1) - s));
      }
      matmul_at(G + lb.w_gate, c.h2.data(), dgate.data(), N_, D, F);
      matmul_at(G + lb.w_up, c.h2.data(), dup.data(), N_, D, F);
      matmul_bt(dh.data(), dgate.data(), W + lb.w_gate, N_, F, D);
      matmul_bt(dh.data(), dup.data(), W + lb.w_up, N_, F, D, true);
      rmsnorm_backward(dx.data(), G + lb.ffn_norm, dh.data(), c.x_mid.data(), c.inv2.data(),
                       W + lb.ffn_norm, N_, D);

      // attention
      matmul_at(G + lb.wo, c.ao.data(), dx.data(), N_, D, D);
      matmul_bt(dao.data(), dx.data(), W + lb.wo, N_, D, D);
      std::fill(dqkv.begin(), dqkv.end(), T(0));
      std::vector<T> dp(S_);
      for (std::size_t b = 0; b < B_; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
          for (std::size_t i = 0; i < S_; ++i) {
            const std::size_t lim = limit(i);
            const T* prow = c.att.data() + ((b * H + h) * S_ + i) * S_;
            const T* dout = dao.data() + (b * S_ + i) * D + h * hd;
            T dot = 0;
            for (std::size_t j = 0; j < lim; ++j) {
              const T* v = c.qkv.data() + (b * S_ + j) * 3 * D + 2 * D + h * hd;
              T* dv = dqkv.data() + (b * S_ + j) * 3 * D + 2 * D + h * hd;
              T s = 0;
              for (std::size_t u = 0; u < hd; ++u) {
                s += dout[u] * v[u];
                dv[u] += prow[j] * dout[u];
              }
              dp[j] = s;
              dot += prow[j] * s;
            }
            const T* q = c.qkv.data() + (b * S_ + i) * 3 * D + h * hd;
            T* dq = dqkv.data() + (b * S_ + i) * 3 * D + h * hd;
            for (std::size_t j = 0; j < lim; ++j) {
              const T ds = prow[j] * (dp[j] - dot) * scale;
              if (ds == T(0)) continue;
              const T* k = c.qkv.data() + (b * S_ + j) * 3 * D + D + h * hd;
              T* dk = dqkv.data() + (b * S_ + j) * 3 * D + D + h * hd;
              for (std::size_t u = 0; u < hd; ++u) {
                dq[u] += ds * k[u];
                dk[u] += ds * q[u];
              }
            }
          }
        }
      }
      matmul_at(G + lb.wqkv, c.h1.data(), dqkv.data(), N_, D, 3 * D);
      matmul_bt(dh.data(), dqkv.data(), W + lb.wqkv, N_, 3 * D, D);
      rmsnorm_backward(dx.data(), G + lb.attn_norm, dh.data(), c.x_in.data(), c.inv1.data(),
                       W + lb.attn_norm, N_, D);
    }

    for (std::size_t n = 0; n < N_; ++n) {
      T* ge = G + lay_.tok_emb + std::size_t{tokens[n]} * D;
      T* gp = G + lay_.pos_emb + (n % S_) * D;
      for (std::size_t j = 0; j < D; ++j) {
        ge[j] += dx[n * D + j];
        gp[j] += dx[n * D + j];
      }
    }
  }

  const std::vector<T>& logits() const { return logits_; }

 private:
  struct LayerCache {
    std::vector<T> x_in, inv1, h1, qkv, att, ao, x_mid, inv2, h2, gate, up, act;
  };

  const Params<T>& p_;
  const LMConfig& cfg_;
  Layout lay_;
  std::size_t B_, S_, N_;
  std::vector<LayerCache> layers_;
  std::vector<T> x_out_, invf_, hf_, logits_;
};

void check_batch(const Batch& b) {
  if (b.tokens.size() != b.rows * b.seq_len) throw Error("batch token count mismatch");
  if (!b.mask.empty() && b.mask.size() != b.tokens.size()) throw Error("batch mask size mismatch");
}

void put_bytes(std::vector<std::uint8_t>& out, const void* p, std::size_t n) {
  const auto* b = static_cast<const std::uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------

void LMConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("lm.vocab_size", "must be >= 2");
  if (layers < 1) throw ConfigError("lm.layers", "must be >= 1");
  if (heads < 1) throw ConfigError("lm.heads", "must be >= 1");
  if (dim < 1 || dim % heads != 0) throw ConfigError("lm.dim", "must equal heads x head_dim");
  if (ffn_dim < 1) throw ConfigError("lm.ffn_dim", "must be >= 1");
  if (max_seq_len < 2) throw ConfigError("lm.max_seq_len", "must be >= 2");
  if (block < 1) throw ConfigError("lm.block", "must be >= 1");
}

nlohmann::json LMConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"layers", layers},       {"dim", dim},
          {"heads", heads},           {"ffn_dim", ffn_dim},     {"max_seq_len", max_seq_len},
          {"mask", mask_name(mask)},  {"block", block},         {"tied_head", tied_head},
          {"precision", precision_name(precision)},             {"seed", seed}};
}

LMConfig LMConfig::from_json(const nlohmann::json& j) {
  LMConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.layers = j.value("layers", c.layers);
  c.dim = j.value("dim", c.dim);
  c.heads = j.value("heads", c.heads);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  const auto mask = j.value("mask", std::string("causal"));
  if (mask == "causal") c.mask = MaskMode::causal;
  else if (mask == "block_causal") c.mask = MaskMode::block_causal;
  else throw ConfigError("lm.mask", "must be causal or block_causal");
  c.block = j.value("block", c.block);
  c.tied_head = j.value("tied_head", c.tied_head);
  const auto prec = j.value("precision", std::string("f32"));
  if (prec == "f32") c.precision = Precision::f32;
  else if (prec == "f64") c.precision = Precision::f64;
  else throw ConfigError("lm.precision", "must be f32 or f64");
  c.seed = j.value("seed", c.seed);
  return c;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
  if (steps < 1) throw ConfigError("train.steps", "must be >= 1");
  if (!(lr_peak > 0)) throw ConfigError("train.lr_peak", "must be > 0");
  if (!(lr_final >= 0)) throw ConfigError("train.lr_final", "must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("train.beta1", "must be in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("train.beta2", "must be in [0, 1)");
  if (!(eps > 0)) throw ConfigError("train.eps", "must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay", "must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"batch_size", batch_size}, {"steps", steps},     {"lr_peak", lr_peak},
          {"lr_final", lr_final},     {"beta1", beta1},     {"beta2", beta2},
          {"eps", eps},               {"weight_decay", weight_decay}, {"grad_clip", grad_clip}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.lr_peak = j.value("lr_peak", c.lr_peak);
  c.lr_final = j.value("lr_final", c.lr_final);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  return c;
}

double lr_at(const TrainConfig& cfg, std::uint64_t step) {
  if (cfg.steps <= 1) return cfg.lr_peak;
  const double frac = static_cast<double>(std::min(step, cfg.steps - 1)) /
                      static_cast<double>(cfg.steps - 1);
  return cfg.lr_peak + (cfg.lr_final - cfg.lr_peak) * frac;
}

Layout::Layout(const LMConfig& c) {
  std::size_t at = 0;
  auto add = [&](std::string name, std::size_t n, bool decay) {
    groups.push_back({std::move(name), at, n, decay});
    const auto off = at;
    at += n;
    return off;
  };
  const std::size_t V = c.vocab_size, D = c.dim, F = c.ffn_dim;
  tok_emb = add("tok_emb", V * D, true);
  pos_emb = add("pos_emb", std::size_t{c.max_seq_len} * D, true);
  for (std::uint32_t l = 0; l < c.layers; ++l) {
    const auto p = "layer" + std::to_string(l) + ".";
    LayerBlocks b{};
    b.attn_norm = add(p + "attn_norm", D, false);
    b.wqkv = add(p + "wqkv", D * 3 * D, true);
    b.wo = add(p + "wo", D * D, true);
    b.ffn_norm = add(p + "ffn_norm", D, false);
    b.w_gate = add(p + "w_gate", D * F, true);
    b.w_up = add(p + "w_up", D * F, true);
    b.w_down = add(p + "w_down", F * D, true);
    layer.push_back(b);
  }
  final_norm = add("final_norm", D, false);
  if (!c.tied_head) head = add("head", D * V, true);
  total = at;
}

template <typename T>
Params<T> init_params(const LMConfig& cfg) {
  cfg.validate();
  Layout lay(cfg);
  Params<T> p;
  p.config = cfg;
  p.config.precision = sizeof(T) == 8 ? Precision::f64 : Precision::f32;
  p.values.assign(lay.total, T(0));
  Rng rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  const double resid = 1.0 / std::sqrt(2.0 * cfg.layers);
  for (const auto& g : lay.groups) {
    const bool is_norm = g.name.ends_with("norm");
    const bool is_resid = g.name.ends_with(".wo") || g.name.ends_with(".w_down");
    for (std::size_t i = 0; i < g.size; ++i) {
      T v;
      if (is_norm) v = T(1);
      else v = static_cast<T>(normal(rng) * (is_resid ? resid : 1.0));
      p.values[g.offset + i] = v;
    }
  }
  return p;
}

template <typename T>
Params<T> extend_vocab(const Params<T>& base, std::uint32_t new_vocab_size) {
  if (new_vocab_size < base.config.vocab_size) throw Error("extend_vocab cannot shrink the vocabulary");
  LMConfig cfg = base.config;
  cfg.vocab_size = new_vocab_size;
  Layout old_lay(base.config), lay(cfg);
  Params<T> p;
  p.config = cfg;
  p.values.assign(lay.total, T(0));
  const std::size_t D = cfg.dim, Vold = base.config.vocab_size, Vnew = new_vocab_size;
  std::copy_n(base.values.begin() + old_lay.tok_emb, Vold * D, p.values.begin() + lay.tok_emb);
  // everything between the token embedding and the head keeps its shape
  const std::size_t mid_old = old_lay.pos_emb;
  const std::size_t mid_len = old_lay.final_norm + D - mid_old;
  std::copy_n(base.values.begin() + mid_old, mid_len, p.values.begin() + lay.pos_emb);
  if (!cfg.tied_head)
    for (std::size_t d = 0; d < D; ++d)
      std::copy_n(base.values.begin() + old_lay.head + d * Vold, Vold,
                  p.values.begin() + lay.head + d * Vnew);
  return p;
}

template <typename T>
std::vector<T> forward(const Params<T>& params, std::span<const TokenId> tokens, std::size_t rows,
                       std::size_t seq_len) {
  Engine<T> eng(params, rows, seq_len);
  eng.forward(tokens);
  return eng.logits();
}

template <typename T>
LossGrads<T> loss_and_grads(const Params<T>& params, const Batch& batch) {
  check_batch(batch);
  Engine<T> eng(params, batch.rows, batch.seq_len);
  eng.forward(batch.tokens);
  LossGrads<T> out;
  std::vector<T> dlogits;
  out.loss = eng.loss(batch.tokens, batch.mask, out.targets, &dlogits);
  out.grads.assign(params.values.size(), T(0));
  eng.backward(batch.tokens, dlogits, out.grads);
  return out;
}

template <typename T>
double loss_only(const Params<T>& params, const Batch& batch) {
  check_batch(batch);
  Engine<T> eng(params, batch.rows, batch.seq_len);
  eng.forward(batch.tokens);
  std::size_t targets = 0;
  return eng.loss(batch.tokens, batch.mask, targets, nullptr);
}

template <typename T>
void adamw_update(std::span<T> values, std::span<const T> grads, std::span<T> m, std::span<T> v,
                  const TrainConfig& cfg, std::uint64_t step, double lr, bool decay,
                  double grad_scale) {
  const double b1t = 1.0 - std::pow(cfg.beta1, static_cast<double>(step + 1));
  const double b2t = 1.0 - std::pow(cfg.beta2, static_cast<double>(step + 1));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T shrink = static_cast<T>(decay ? 1.0 - lr * cfg.weight_decay : 1.0);
  const T inv_b1t = static_cast<T>(1.0 / b1t), inv_b2t = static_cast<T>(1.0 / b2t);
  const T tlr = static_cast<T>(lr), teps = static_cast<T>(cfg.eps), gs = static_cast<T>(grad_scale);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T g = grads[i] * gs;
    m[i] = b1 * m[i] + (T(1) - b1) * g;
    v[i] = b2 * v[i] + (T(1) - b2) * g * g;
    const T mhat = m[i] * inv_b1t;
    const T vhat = v[i] * inv_b2t;
    values[i] = values[i] * shrink - tlr * mhat / (std::sqrt(vhat) + teps);
  }
}

template <typename T>
void adamw_step(Params<T>& params, std::span<const T> grads, AdamState<T>& state,
                const TrainConfig& cfg, std::uint64_t step) {
  if (grads.size() != params.values.size()) throw Error("gradient size mismatch");
  if (state.m.size() != params.values.size()) {
    state.m.assign(params.values.size(), T(0));
    state.v.assign(params.values.size(), T(0));
  }
  double scale = 1.0;
  if (cfg.grad_clip > 0) {
    double ss = 0;
    for (T g : grads) ss += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(ss);
    if (norm > cfg.grad_clip) scale = cfg.grad_clip / norm;
  }
  const double lr = lr_at(cfg, step);
  Layout lay(params.config);
  for (const auto& g : lay.groups) {
    adamw_update<T>(std::span<T>(params.values).subspan(g.offset, g.size),
                    grads.subspan(g.offset, g.size),
                    std::span<T>(state.m).subspan(g.offset, g.size),
                    std::span<T>(state.v).subspan(g.offset, g.size), cfg, step, lr, g.decay, scale);
  }
}

template <typename T>
ScoredContinuation score_sequence(const Params<T>& params, std::span<const TokenId> tokens,
                                  std::size_t prefix_len) {
  if (prefix_len < 1 || prefix_len >= tokens.size())
    throw Error("score_sequence needs 1 <= prefix_len < length");
  const std::size_t S = tokens.size(), V = params.config.vocab_size;
  Engine<T> eng(params, 1, S);
  eng.forward(tokens);
  const auto& lg = eng.logits();
  ScoredContinuation out;
  for (std::size_t t = prefix_len; t < S; ++t) {
    const T* row = lg.data() + (t - 1) * V;
    const T mx = *std::max_element(row, row + V);
    double sum = 0;
    for (std::size_t v = 0; v < V; ++v) sum += std::exp(static_cast<double>(row[v] - mx));
    out.logprob += static_cast<double>(row[tokens[t]] - mx) - std::log(sum);
    ++out.count;
  }
  return out;
}

template <typename T>
std::vector<TokenId> generate(const Params<T>& params, std::span<const TokenId> prefix,
                              std::size_t max_tokens, Rng& rng, const GenerateConfig& cfg) {
  if (prefix.empty()) throw Error("generate needs a non-empty prefix");
  std::vector<TokenId> seq(prefix.begin(), prefix.end());
  const std::size_t V = params.config.vocab_size;
  for (std::size_t k = 0; k < max_tokens && seq.size() < params.config.max_seq_len; ++k) {
    Engine<T> eng(params, 1, seq.size());
    eng.forward(seq);
    const T* row = eng.logits().data() + (seq.size() - 1) * V;
    TokenId next = 0;
    if (cfg.temperature <= 0) {
      next = static_cast<TokenId>(std::max_element(row, row + V) - row);
    } else {
      const T mx = *std::max_element(row, row + V);
      std::vector<double> w(V);
      for (std::size_t v = 0; v < V; ++v)
        w[v] = std::exp(static_cast<double>(row[v] - mx) / cfg.temperature);
      std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
      next = static_cast<TokenId>(pick(rng));
    }
    seq.push_back(next);
    if (std::find(cfg.stop_ids.begin(), cfg.stop_ids.end(), next) != cfg.stop_ids.end()) break;
  }
  return seq;
}

template <typename T>
TrainResult<T> train(Params<T> params, const TrainConfig& cfg, const BatchSource& source,
                     const StepCallback& on_step) {
  cfg.validate();
  TrainResult<T> out;
  AdamState<T> state;
  using Clock = std::chrono::steady_clock;
  for (std::uint64_t step = 0; step < cfg.steps; ++step) {
    const auto t0 = Clock::now();
    Batch batch = source(step);
    LossGrads<T> lg;
    bool finite = true;
    try {
      lg = loss_and_grads(params, batch);
      finite = std::isfinite(lg.loss) && all_finite(lg.grads);
    } catch (const NonFiniteError&) {
      finite = false;
    }
    if (!finite) {
      out.diverged = true;
      log_event("error", "training diverged", nlohmann::json{{"step", step}}.dump());
      break;
    }
    adamw_step<T>(params, lg.grads, state, cfg, step);
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    StepMetrics m{step, lg.loss, lr_at(cfg, step),
                  secs > 0 ? static_cast<double>(batch.tokens.size()) / secs : 0.0};
    out.history.push_back(m);
    out.steps_done = step + 1;
    if (on_step) on_step(m);
    // keep the pre-update parameters if the update itself blew up
    if (!all_finite(params.values)) {
      out.diverged = true;
      break;
    }
    out.params = params;
  }
  if (out.params.values.empty()) out.params = std::move(params);
  return out;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Params<T>& params) {
  std::vector<std::uint8_t> buf;
  put_bytes(buf, kCkptMagic, 8);
  put_le<std::uint32_t>(buf, sizeof(T));
  const auto cfg = params.config.to_json().dump();
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(cfg.size()));
  put_bytes(buf, cfg.data(), cfg.size());
  put_le<std::uint64_t>(buf, params.values.size());
  for (T v : params.values) {
    if constexpr (sizeof(T) == 8) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      put_le(buf, bits);
    } else {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_le(buf, bits);
    }
  }
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(crc32(0L, buf.data(), static_cast<uInt>(buf.size()))));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint", path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

AnyParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint", path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto at = [&](std::size_t off) { return path.string() + "@" + std::to_string(off); };
  if (buf.size() < 24) throw Error("truncated checkpoint", at(buf.size()));
  if (std::memcmp(buf.data(), kCkptMagic, 8) != 0) throw Error("bad checkpoint magic", at(0));
  const auto stored_crc = get_le<std::uint32_t>(buf.data() + buf.size() - 4);
  if (stored_crc != crc32(0L, buf.data(), static_cast<uInt>(buf.size() - 4)))
    throw Error("checkpoint checksum mismatch", at(buf.size() - 4));
  const auto width = get_le<std::uint32_t>(buf.data() + 8);
  const auto cfg_len = get_le<std::uint32_t>(buf.data() + 12);
  std::size_t off = 16;
  if (off + cfg_len + 8 > buf.size()) throw Error("truncated checkpoint config", at(off));
  const auto cfg = LMConfig::from_json(
      nlohmann::json::parse(std::string(reinterpret_cast<const char*>(buf.data() + off), cfg_len)));
  off += cfg_len;
  const auto count = get_le<std::uint64_t>(buf.data() + off);
  off += 8;
  if (count != Layout(cfg).total) throw Error("parameter count does not match config", at(off - 8));
  if (off + count * width + 4 != buf.size()) throw Error("truncated checkpoint payload", at(off));
  auto read = [&]<typename T>(Params<T> p) {
    p.config = cfg;
    p.values.resize(count);
    for (std::size_t i = 0; i < count; ++i, off += sizeof(T)) {
      if constexpr (sizeof(T) == 8) {
        const auto bits = get_le<std::uint64_t>(buf.data() + off);
        std::memcpy(&p.values[i], &bits, 8);
      } else {
        const auto bits = get_le<std::uint32_t>(buf.data() + off);
        std::memcpy(&p.values[i], &bits, 4);
      }
    }
    return p;
  };
  if (width == 8) return read(Params<double>{});
  if (width == 4) return read(Params<float>{});
  throw Error("unsupported scalar width " + std::to_string(width), at(8));
}

#define FORGE_INSTANTIATE(T)                                                                     \
  template Params<T> init_params<T>(const LMConfig&);                                            \
  template Params<T> extend_vocab<T>(const Params<T>&, std::uint32_t);                           \
  template std::vector<T> forward<T>(const Params<T>&, std::span<const TokenId>, std::size_t,   \
                                     std::size_t);                                               \
  template LossGrads<T> loss_and_grads<T>(const Params<T>&, const Batch&);                       \
  template double loss_only<T>(const Params<T>&, const Batch&);                                  \
  template void adamw_update<T>(std::span<T>, std::span<const T>, std::span<T>, std::span<T>,    \
                                const TrainConfig&, std::uint64_t, double, bool, double);        \
  template void adamw_step<T>(Params<T>&, std::span<const T>, AdamState<T>&, const TrainConfig&, \
                              std::uint64_t);                                                    \
  template ScoredContinuation score_sequence<T>(const Params<T>&, std::span<const TokenId>,      \
                                                std::size_t);                                    \
  template std::vector<TokenId> generate<T>(const Params<T>&, std::span<const TokenId>,          \
                                            std::size_t, Rng&, const GenerateConfig&);           \
  template TrainResult<T> train<T>(Params<T>, const TrainConfig&, const BatchSource&,            \
                                   const StepCallback&);                                         \
  template void save_checkpoint<T>(const std::filesystem::path&, const Params<T>&);

FORGE_INSTANTIATE(float)
FORGE_INSTANTIATE(double)

#undef FORGE_INSTANTIATE

}  // namespace forge::lm
