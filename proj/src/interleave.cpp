#include "forge/interleave.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace forge {

void InterleaveConfig::validate() const {
  if (!(eta > 0 && eta <= 1)) throw ConfigError("interleave.eta", "must be in (0, 1]");
  if (!(lambda > 0) || !std::isfinite(lambda)) throw ConfigError("interleave.lambda", "must be > 0");
}

nlohmann::json InterleaveConfig::to_json() const {
  return {{"eta", eta}, {"lambda", lambda}, {"seed", seed}};
}

InterleaveConfig InterleaveConfig::from_json(const nlohmann::json& j) {
  InterleaveConfig c;
  c.eta = j.value("eta", c.eta);
  c.lambda = j.value("lambda", c.lambda);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

std::size_t SpanPlan::covered() const noexcept {
  std::size_t n = 0;
  for (const auto& s : spans) n += s.length;
  return n;
}

bool SpanPlan::valid() const noexcept {
  std::size_t end = 0;
  for (const auto& s : spans) {
    if (s.length == 0 || s.start < end || s.start + s.length > doc_len) return false;
    end = s.start + s.length;
  }
  return true;
}

std::vector<std::size_t> draw_span_lengths(std::size_t doc_len, const InterleaveConfig& cfg, Rng& rng) {
  cfg.validate();
  if (doc_len == 0) throw Error("draw_span_lengths needs doc_len >= 1");
  const double target = cfg.eta * static_cast<double>(doc_len);
  if (target < 1.0)
    return {std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(target)))};
  std::poisson_distribution<long> poisson(cfg.lambda);
  std::vector<std::size_t> out;
  std::size_t total = 0;
  while (static_cast<double>(total) < target) {
    const auto len = static_cast<std::size_t>(std::max(1L, poisson(rng)));
    out.push_back(len);
    total += len;
  }
  if (total > doc_len) out.back() -= total - doc_len;
  return out;
}

SpanPlan place_spans(std::size_t doc_len, std::vector<std::size_t> lengths, Rng& rng) {
  SpanPlan plan;
  plan.doc_len = doc_len;
  std::erase(lengths, std::size_t{0});
  std::size_t total = std::accumulate(lengths.begin(), lengths.end(), std::size_t{0});
  while (total > doc_len) {
    const std::size_t excess = total - doc_len;
    if (lengths.back() > excess) {
      lengths.back() -= excess;
      total = doc_len;
    } else {
      total -= lengths.back();
      lengths.pop_back();
    }
    ++plan.truncated;
  }
  const std::size_t n = lengths.size();
  if (n == 0) return plan;
  const std::size_t free_words = doc_len - total;
  // choose which of the free_words + n slots hold spans
  std::vector<std::size_t> slots(free_words + n);
  std::iota(slots.begin(), slots.end(), std::size_t{0});
  std::vector<std::size_t> picks;
  picks.reserve(n);
  std::ranges::sample(slots, std::back_inserter(picks), static_cast<std::ptrdiff_t>(n), rng);
  std::size_t before = 0;
  for (std::size_t i = 0; i < n; ++i) {
    plan.spans.push_back({picks[i] - i + before, lengths[i]});
    before += lengths[i];
  }
  return plan;
}

TokenSequence build_interleaved(std::span<const std::string> words, const SpanPlan& plan,
                                const SpanSynthesizer& t2t, const Vocab& vocab,
                                const std::function<Rng(std::size_t)>& span_rng) {
  if (plan.doc_len != words.size() || !plan.valid()) throw Error("span plan does not fit the document");
  TokenSequence out;
  std::size_t pos = 0;
  auto emit_text = [&](std::size_t from, std::size_t to) {
    for (std::size_t i = from; i < to; ++i) out.ids.push_back(vocab.id(words[i]));
  };
  for (std::size_t k = 0; k < plan.spans.size(); ++k) {
    const auto& s = plan.spans[k];
    emit_text(pos, s.start);
    Rng rng = span_rng(k);
    const auto speech = t2t.synthesize(words.subspan(s.start, s.length), rng);
    out.ids.push_back(special::begin_of_audio);
    out.ids.insert(out.ids.end(), speech.ids.begin(), speech.ids.end());
    out.ids.push_back(special::end_of_audio);
    pos = s.start + s.length;
  }
  emit_text(pos, words.size());
  return out;
}

InterleavedDoc interleave_document(const TextDoc& doc, const InterleaveConfig& cfg,
                                   const SpanSynthesizer& t2t, const Vocab& vocab) {
  const auto words = split_words(doc.text);
  InterleavedDoc out;
  if (words.empty()) return out;
  const std::uint64_t h = stable_hash(doc.id);
  auto rng = derive_rng(cfg.seed, {h});
  out.plan = place_spans(words.size(), draw_span_lengths(words.size(), cfg, rng), rng);
  out.seq = build_interleaved(words, out.plan, t2t, vocab,
                              [&](std::size_t k) { return derive_rng(cfg.seed, {h, k + 1}); });
  return out;
}

void count_speech(std::span<const TokenId> ids, const Vocab& vocab, std::size_t& speech,
                  std::size_t& content) {
  for (auto id : ids) {
    if (vocab.is_special(id)) continue;
    ++content;
    if (vocab.is_speech(id)) ++speech;
  }
}

double measure_speech_ratio(std::span<const TokenId> ids, const Vocab& vocab) {
  std::size_t speech = 0, content = 0;
  count_speech(ids, vocab, speech, content);
  return content ? static_cast<double>(speech) / static_cast<double>(content) : 0.0;
}

void InterleaveStats::add(const InterleavedDoc& d, const Vocab& vocab) {
  ++docs;
  words += d.plan.doc_len;
  const auto cov = d.plan.covered();
  covered_words += cov;
  if (d.plan.doc_len) coverage_sum += static_cast<double>(cov) / static_cast<double>(d.plan.doc_len);
  spans += d.plan.spans.size();
  truncated += d.plan.truncated;
  ++span_count_hist[d.plan.spans.size()];
  for (const auto& s : d.plan.spans) ++span_length_hist[s.length];
  count_speech(d.seq.ids, vocab, speech_tokens, content_tokens);
}

double InterleaveStats::speech_ratio() const noexcept {
  return content_tokens ? static_cast<double>(speech_tokens) / static_cast<double>(content_tokens) : 0.0;
}

double InterleaveStats::mean_coverage() const noexcept {
  return docs ? coverage_sum / static_cast<double>(docs) : 0.0;
}

double InterleaveStats::mean_span_length() const noexcept {
  return spans ? static_cast<double>(covered_words) / static_cast<double>(spans) : 0.0;
}

nlohmann::json InterleaveStats::to_json() const {
  nlohmann::json counts = nlohmann::json::object(), lengths = nlohmann::json::object();
  for (const auto& [k, v] : span_count_hist) counts[std::to_string(k)] = v;
  for (const auto& [k, v] : span_length_hist) lengths[std::to_string(k)] = v;
  return {{"docs", docs},
          {"words", words},
          {"covered_words", covered_words},
          {"spans", spans},
          {"truncated", truncated},
          {"speech_tokens", speech_tokens},
          {"content_tokens", content_tokens},
          {"speech_ratio", speech_ratio()},
          {"mean_coverage", mean_coverage()},
          {"mean_span_length", mean_span_length()},
          {"span_count_hist", counts},
          {"span_length_hist", lengths}};
}

}  // namespace forge
