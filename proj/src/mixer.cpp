#include "forge/mixer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace forge {

const char* source_kind_name(SourceKind k) {
  switch (k) {
    case SourceKind::text: return "text";
    case SourceKind::speech: return "speech";
    case SourceKind::interleaved: return "interleaved";
    case SourceKind::supervised_asr: return "supervised_asr";
    case SourceKind::supervised_tts: return "supervised_tts";
  }
  return "text";
}

SourceKind source_kind_from_name(const std::string& s) {
  for (auto k : {SourceKind::text, SourceKind::speech, SourceKind::interleaved,
                 SourceKind::supervised_asr, SourceKind::supervised_tts})
    if (s == source_kind_name(k)) return k;
  throw ConfigError("mix.sources.kind", "unknown source kind '" + s + "'");
}

bool is_one_epoch(SourceKind k) {
  return k == SourceKind::speech || k == SourceKind::supervised_asr || k == SourceKind::supervised_tts;
}

void MixtureSpec::validate() const {
  if (budget_rows < 1) throw ConfigError("mix.budget_rows", "must be >= 1");
  if (seq_len < 2) throw ConfigError("mix.seq_len", "must be >= 2");
  if (batch_rows < 1) throw ConfigError("mix.batch_rows", "must be >= 1");
  if (!(text_ratio >= 0 && text_ratio <= 1)) throw ConfigError("mix.text_ratio", "must be in [0, 1]");
}

nlohmann::json MixtureSpec::to_json() const {
  return {{"budget_rows", budget_rows}, {"seq_len", seq_len}, {"batch_rows", batch_rows},
          {"text_ratio", text_ratio},   {"seed", seed}};
}

MixtureSpec MixtureSpec::from_json(const nlohmann::json& j) {
  MixtureSpec s;
  s.budget_rows = j.value("budget_rows", s.budget_rows);
  s.seq_len = j.value("seq_len", s.seq_len);
  s.batch_rows = j.value("batch_rows", s.batch_rows);
  s.text_ratio = j.value("text_ratio", s.text_ratio);
  s.seed = j.value("seed", s.seed);
  return s;
}

std::vector<TokenSequence> pack_sequences(std::span<const TokenSequence> docs, std::uint32_t seq_len) {
  if (seq_len < 2) throw ConfigError("mix.seq_len", "must be >= 2");
  std::vector<TokenSequence> rows;
  TokenSequence cur;
  auto push = [&](TokenId id, std::uint8_t m) {
    cur.ids.push_back(id);
    cur.loss_mask.push_back(m);
    if (cur.ids.size() == seq_len) {
      rows.push_back(std::move(cur));
      cur = {};
    }
  };
  for (const auto& d : docs) {
    for (std::size_t i = 0; i < d.size(); ++i) push(d.ids[i], d.target(i) ? 1 : 0);
    push(special::sep, d.has_mask() ? 0 : 1);
  }
  if (!cur.ids.empty()) {
    const std::size_t fill = seq_len - cur.ids.size();
    cur.ids.insert(cur.ids.end(), fill, special::pad);
    cur.loss_mask.insert(cur.loss_mask.end(), fill, 0);
    rows.push_back(std::move(cur));
  }
  return rows;
}

std::vector<TokenSequence> unpack_sequences(std::span<const TokenSequence> rows) {
  std::vector<TokenSequence> docs;
  TokenSequence cur;
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      const TokenId id = r.ids[i];
      const std::uint8_t m = r.target(i) ? 1 : 0;
      if (id == special::pad) continue;
      if (id != special::sep) {
        cur.ids.push_back(id);
        cur.loss_mask.push_back(m);
        continue;
      }
      if (m) cur.loss_mask.clear();  // separator target: the doc had no mask
      docs.push_back(std::move(cur));
      cur = {};
    }
  }
  if (!cur.ids.empty()) throw Error("rows end inside a document");
  return docs;
}

TokenSequence supervised_pair_format(const ParallelPair& pair, SourceKind direction) {
  if (pair.text.empty() || pair.speech.empty()) throw Error("supervised pair with an empty side");
  if (direction == SourceKind::supervised_tts) return t2t_row(pair);
  if (direction != SourceKind::supervised_asr) throw Error("direction must be asr or tts");
  TokenSequence row;
  row.ids.push_back(special::begin_of_audio);
  row.ids.insert(row.ids.end(), pair.speech.ids.begin(), pair.speech.ids.end());
  row.ids.push_back(special::end_of_audio);
  row.loss_mask.assign(row.ids.size(), 0);
  row.ids.insert(row.ids.end(), pair.text.ids.begin(), pair.text.ids.end());
  row.loss_mask.insert(row.loss_mask.end(), pair.text.ids.size(), 1);
  return row;
}

std::size_t text_rows_for(std::size_t rows, double text_ratio) {
  return static_cast<std::size_t>(std::floor(text_ratio * static_cast<double>(rows) + 0.5));
}

std::size_t budget_for(std::size_t fixed_rows, std::size_t interleaved_rows, double text_ratio) {
  const std::size_t need = fixed_rows + interleaved_rows;
  if (need == 0) return 0;
  if (text_ratio >= 1) throw ConfigError("mix.text_ratio", "a text ratio of 1 leaves no room for other sources");
  // R - text_rows_for(R) steps by 0 or 1, so it hits `need` exactly
  auto r = static_cast<std::size_t>(std::floor(static_cast<double>(need) / (1 - text_ratio)));
  r = r > 2 ? r - 2 : 0;
  while (r - text_rows_for(r, text_ratio) < need) ++r;
  return r;
}

namespace {

std::size_t packed_rows(const std::vector<TokenSequence>& docs, std::uint32_t seq_len) {
  std::size_t total = 0;
  for (const auto& d : docs) total += d.size() + 1;
  return (total + seq_len - 1) / seq_len;
}

}  // namespace

std::size_t MixtureSchedule::batches() const noexcept {
  return (row_source.size() + spec.batch_rows - 1) / spec.batch_rows;
}

std::vector<std::size_t> MixtureSchedule::batch_composition(std::size_t b) const {
  std::vector<std::size_t> out(source_rows.size(), 0);
  const std::size_t lo = b * spec.batch_rows, hi = std::min(row_source.size(), lo + spec.batch_rows);
  for (std::size_t r = lo; r < hi; ++r) ++out[row_source[r]];
  return out;
}

nlohmann::json MixtureSchedule::to_json() const {
  return {{"spec", spec.to_json()}, {"source_rows", source_rows}, {"epoch_rows", epoch_rows},
          {"batches", batches()}};
}

MixtureSchedule compose_mixture(const MixtureSpec& spec, std::span<const Source> sources) {
  spec.validate();
  MixtureSchedule out;
  out.spec = spec;
  const std::size_t n = sources.size();
  out.source_rows.assign(n, 0);
  out.epoch_rows.assign(n, 0);
  std::ptrdiff_t text_src = -1, inter_src = -1;
  std::size_t fixed = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out.epoch_rows[i] = packed_rows(sources[i].docs, spec.seq_len);
    const auto k = sources[i].kind;
    if (is_one_epoch(k)) {
      out.source_rows[i] = out.epoch_rows[i];
      fixed += out.epoch_rows[i];
    } else if (k == SourceKind::text) {
      if (text_src >= 0) throw ConfigError("mix.sources", "at most one text source");
      text_src = static_cast<std::ptrdiff_t>(i);
    } else {
      if (inter_src >= 0) throw ConfigError("mix.sources", "at most one interleaved source");
      inter_src = static_cast<std::ptrdiff_t>(i);
    }
  }
  const std::size_t R = spec.budget_rows;
  const std::size_t T = text_rows_for(R, spec.text_ratio);
  if (R - T < fixed) {
    const auto need = budget_for(fixed, 0, spec.text_ratio);
    throw ConfigError("mix.budget_rows", "one-epoch sources need " + std::to_string(fixed) +
                                             " rows; budget must be at least " + std::to_string(need));
  }
  const std::size_t I = R - T - fixed;
  if (T > 0 && (text_src < 0 || out.epoch_rows[static_cast<std::size_t>(text_src)] == 0))
    throw ConfigError("mix.sources", "text_ratio > 0 needs a non-empty text source");
  if (I > 0 && (inter_src < 0 || out.epoch_rows[static_cast<std::size_t>(inter_src)] == 0))
    throw ConfigError("mix.sources", std::to_string(I) + " filler rows need a non-empty interleaved source");
  if (text_src >= 0) out.source_rows[static_cast<std::size_t>(text_src)] = T;
  if (inter_src >= 0) out.source_rows[static_cast<std::size_t>(inter_src)] = I;

  // smooth weighted round-robin over the non-text slots: exact totals, every
  // prefix close to its share
  const std::size_t other_total = R - T;
  std::vector<std::int64_t> current(n, 0);
  out.row_source.reserve(R);
  std::size_t done = 0;
  for (std::size_t b = 0; done < R; ++b) {
    const std::size_t end = std::min(R, done + spec.batch_rows);
    const std::size_t text_here = text_rows_for(end, spec.text_ratio) - text_rows_for(done, spec.text_ratio);
    for (std::size_t r = 0; r < text_here; ++r)
      out.row_source.push_back(static_cast<std::uint32_t>(text_src));
    for (std::size_t r = done + text_here; r < end; ++r) {
      std::size_t best = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (static_cast<std::ptrdiff_t>(i) == text_src || out.source_rows[i] == 0) continue;
        current[i] += static_cast<std::int64_t>(out.source_rows[i]);
        if (best == n || current[i] > current[best]) best = i;
      }
      current[best] -= static_cast<std::int64_t>(other_total);
      out.row_source.push_back(static_cast<std::uint32_t>(best));
    }
    done = end;
  }
  return out;
}

namespace {

class RowStream {
 public:
  RowStream(const Source& src, std::size_t index, std::uint32_t seq_len, std::uint64_t seed)
      : src_(src), index_(index), seq_len_(seq_len), seed_(seed) {}

  TokenSequence next() {
    if (pos_ == rows_.size()) refill();
    return std::move(rows_[pos_++]);
  }

 private:
  void refill() {
    std::vector<std::size_t> order(src_.docs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = derive_rng(seed_, {index_, epoch_++});
    std::ranges::shuffle(order, rng);
    std::vector<TokenSequence> docs;
    docs.reserve(order.size());
    for (auto i : order) docs.push_back(src_.docs[i]);
    rows_ = pack_sequences(docs, seq_len_);
    pos_ = 0;
    if (rows_.empty()) throw Error("source '" + src_.name + "' has no rows");
  }

  const Source& src_;
  std::size_t index_;
  std::uint32_t seq_len_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<TokenSequence> rows_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<PackedBatch> materialize(const MixtureSchedule& schedule, std::span<const Source> sources) {
  if (sources.size() != schedule.source_rows.size()) throw Error("schedule does not match the sources");
  std::vector<RowStream> streams;
  for (std::size_t i = 0; i < sources.size(); ++i)
    streams.emplace_back(sources[i], i, schedule.spec.seq_len, schedule.spec.seed);
  std::vector<PackedBatch> out;
  for (std::size_t r = 0; r < schedule.row_source.size(); ++r) {
    if (r % schedule.spec.batch_rows == 0) out.emplace_back();
    const auto s = schedule.row_source[r];
    out.back().rows.push_back(streams[s].next());
    out.back().tags.push_back(static_cast<std::uint8_t>(sources[s].kind));
  }
  return out;
}

double MixtureReport::text_row_share() const noexcept {
  return rows ? static_cast<double>(text_rows) / static_cast<double>(rows) : 0.0;
}

double MixtureReport::text_token_share() const noexcept {
  return tokens ? static_cast<double>(text_tokens) / static_cast<double>(tokens) : 0.0;
}

nlohmann::json MixtureReport::to_json() const {
  return {{"rows", rows},
          {"text_rows", text_rows},
          {"tokens", tokens},
          {"text_tokens", text_tokens},
          {"text_row_share", text_row_share()},
          {"text_token_share", text_token_share()},
          {"max_batch_text_deviation", max_batch_text_deviation}};
}

MixtureReport report_mixture(const MixtureSchedule& schedule, std::span<const PackedBatch> batches) {
  MixtureReport rep;
  const double ratio = schedule.spec.text_ratio;
  for (const auto& b : batches) {
    std::size_t text_here = 0;
    for (std::size_t r = 0; r < b.rows.size(); ++r) {
      std::size_t non_pad = 0;
      for (auto id : b.rows[r].ids) non_pad += id != special::pad;
      const bool is_text = b.tags[r] == static_cast<std::uint8_t>(SourceKind::text);
      ++rep.rows;
      rep.tokens += non_pad;
      if (is_text) {
        ++rep.text_rows;
        ++text_here;
        rep.text_tokens += non_pad;
      }
    }
    const double dev = std::abs(static_cast<double>(text_here) - ratio * static_cast<double>(b.rows.size()));
    rep.max_batch_text_deviation = std::max(rep.max_batch_text_deviation, dev);
  }
  return rep;
}

}  // namespace forge
