#include "forge/cli.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <set>
#include <numeric>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "forge/corpus.hpp"
#include "forge/eval.hpp"

#ifndef FORGE_VERSION
#define FORGE_VERSION "unknown"
#endif

namespace forge::cli {

namespace fs = std::filesystem;
using nlohmann::json;

const char* version() { return FORGE_VERSION; }

// ---------------------------------------------------------------------------
// Config

MixtureSpec RunConfig::default_mix() {
  MixtureSpec m;
  m.budget_rows = 1000;
  return m;
}

void RunConfig::validate() const {
  interleave.validate();
  duration.validate();
  vq.validate();
  mix.validate();
  lm::LMConfig l = lm;
  if (l.vocab_size == 0) l.vocab_size = special::count;  // filled from data later
  l.validate();
  train.validate();
  for (const auto& [field, path] : {std::pair{"paths.corpus", &paths.corpus}, {"paths.lexicon", &paths.lexicon}})
    if (!path->empty() && !fs::exists(*path)) throw ConfigError(field, "no such file: " + *path);
}

json RunConfig::to_json() const {
  json j = {{"paths",
             {{"corpus", paths.corpus},
              {"lexicon", paths.lexicon},
              {"shards", paths.shards},
              {"checkpoints", paths.checkpoints},
              {"reports", paths.reports}}},
            {"interleave", {{"eta", interleave.eta}, {"lambda", interleave.lambda}}},
            {"duration", {{"d", duration.d}, {"p_jitter", duration.p_jitter}}},
            {"vq", vq.to_json()},
            {"mix", mix.to_json()},
            {"lm", lm.to_json()},
            {"train", train.to_json()}};
  j["seed"] = seed ? json(*seed) : json(nullptr);
  return j;
}

namespace {

template <typename T>
T section(const json& j, const char* key, T (*parse)(const json&), T fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_object()) throw ConfigError(key, "must be a table");
  return parse(j[key]);
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config", "top level must be a table");
  RunConfig c;
  try {
    if (j.contains("seed") && !j["seed"].is_null()) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("paths")) {
      const auto& p = j["paths"];
      c.paths.corpus = p.value("corpus", "");
      c.paths.lexicon = p.value("lexicon", "");
      c.paths.shards = p.value("shards", "");
      c.paths.checkpoints = p.value("checkpoints", "");
      c.paths.reports = p.value("reports", "");
    }
    c.interleave = section(j, "interleave", &InterleaveConfig::from_json, c.interleave);
    c.interleave.seed = 0;
    if (j.contains("duration")) {
      c.duration.d = j["duration"].value("d", c.duration.d);
      c.duration.p_jitter = j["duration"].value("p_jitter", c.duration.p_jitter);
    }
    c.vq = section(j, "vq", &vq::VQConfig::from_json, c.vq);
    if (j.contains("mix")) {
      // missing keys keep the run defaults, not the bare struct defaults
      json m = c.mix.to_json();
      m.update(j["mix"]);
      c.mix = MixtureSpec::from_json(m);
    }
    c.lm = section(j, "lm", &lm::LMConfig::from_json, c.lm);
    c.train = section(j, "train", &lm::TrainConfig::from_json, c.train);
  } catch (const json::exception& e) {
    throw ConfigError("config", e.what());
  }
  return c;
}

RunConfig parse_config(std::string_view text) {
  if (std::all_of(text.begin(), text.end(), [](unsigned char ch) { return std::isspace(ch); }))
    return RunConfig{};
  const json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config", "not valid JSON");
  return RunConfig::from_json(j);
}

RunConfig validate_config(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ConfigError("config", "cannot open " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  auto cfg = parse_config(ss.str());
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Digests

namespace {

std::string hex(const unsigned char* p, unsigned n) {
  std::ostringstream os;
  os << std::hex << std::setfill('0');
  for (unsigned i = 0; i < n; ++i) os << std::setw(2) << static_cast<int>(p[i]);
  return os.str();
}

struct Sha256 {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  Sha256() { EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr); }
  ~Sha256() { EVP_MD_CTX_free(ctx); }
  void update(const void* p, std::size_t n) { EVP_DigestUpdate(ctx, p, n); }
  std::string finish() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned n = 0;
    EVP_DigestFinal_ex(ctx, md, &n);
    return hex(md, n);
  }
};

}  // namespace

std::string sha256_hex(std::string_view data) {
  Sha256 h;
  h.update(data.data(), data.size());
  return h.finish();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  Sha256 h;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.finish();
}

// ---------------------------------------------------------------------------
// Commands

namespace {

struct Context {
  std::vector<std::string> argv;
  std::string command;
  RunConfig cfg;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string manifest_path;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;
  std::ostream* out = nullptr;
};

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error("cannot write " + p.string());
  f << s;
}

void write_json(Context& ctx, const fs::path& p, const json& j) {
  write_text(p, j.dump(2) + "\n");
  ctx.outputs.push_back(p);
}

json digest_list(const std::vector<fs::path>& paths) {
  json arr = json::array();
  for (const auto& p : paths) {
    if (fs::is_directory(p)) {
      for (const auto& e : fs::directory_iterator(p)) {
        if (e.is_regular_file() && e.path().filename() != "manifest.json")
          arr.push_back({{"path", e.path().string()}, {"sha256", sha256_file(e.path())}});
      }
    } else if (fs::exists(p)) {
      arr.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
    }
  }
  std::sort(arr.begin(), arr.end(), [](const json& a, const json& b) { return a["path"] < b["path"]; });
  return arr;
}

void write_manifest(Context& ctx) {
  const json cfg = ctx.cfg.to_json();
  json m = {{"command", ctx.command},
            {"argv", ctx.argv},
            {"version", version()},
            {"seed", ctx.seed},
            {"threads", ctx.threads},
            {"config", cfg},
            {"config_hash", sha256_hex(cfg.dump())},
            {"inputs", digest_list(ctx.inputs)},
            {"outputs", digest_list(ctx.outputs)}};
  write_text(ctx.manifest_path, m.dump(2) + "\n");
}

/// Default manifest location for an output path.
std::string manifest_for(const std::string& out) {
  if (out.empty()) return "forge-manifest.json";
  const fs::path p(out);
  if (fs::is_directory(p) || !p.has_extension()) return (p / "manifest.json").string();
  return p.string() + ".manifest.json";
}

std::vector<TextDoc> read_corpus(Context& ctx, const std::string& path) {
  if (path.empty()) throw ConfigError("paths.corpus", "an input corpus is required (--input)");
  if (!fs::exists(path)) throw ConfigError("paths.corpus", "no such file: " + path);
  ctx.inputs.emplace_back(path);
  auto loaded = load_jsonl(path);
  if (loaded.skipped) log_event("warn", "skipped malformed lines", json{{"count", loaded.skipped}}.dump());
  return std::move(loaded.docs);
}

std::vector<std::string> corpus_words(std::span<const TextDoc> docs) {
  std::vector<std::string> words;
  std::set<std::string> seen;
  for (const auto& d : docs)
    for (auto& w : split_words(d.text))
      if (seen.insert(w).second) words.push_back(std::move(w));
  return words;
}

Vocab text_vocab_for(Context& ctx, const std::string& path, std::span<const TextDoc> docs) {
  if (path.empty()) return build_text_vocab(docs, 1u << 20);
  ctx.inputs.emplace_back(path);
  return Vocab::load(path);
}

UnitLexicon lexicon_for(Context& ctx, const std::string& path, std::span<const TextDoc> docs) {
  if (path.empty()) return UnitLexicon::build(corpus_words(docs), 4096, ctx.cfg.duration);
  ctx.inputs.emplace_back(path);
  auto lex = UnitLexicon::load(path);
  lex.set_duration(ctx.cfg.duration);
  return lex;
}

/// Text part of a combined vocab, whatever the file holds.
Vocab text_part(const Vocab& v) {
  if (v.kind() == VocabKind::text) return v;
  Vocab t = Vocab::specials_only();
  for (const auto& w : v.words()) t.add_word(w);
  return t;
}

void write_rows(Context& ctx, const fs::path& dir, const std::string& stem, std::span<const TokenSequence> rows,
                std::uint32_t text_size, std::uint32_t speech_size, std::uint32_t seq_len, std::span<const std::uint8_t> tags = {},
                std::size_t rows_per_shard = 4096) {
  fs::create_directories(dir);
  for (const auto& old : list_shards(dir))
    if (old.filename().string().rfind(stem, 0) == 0) fs::remove(old);
  for (std::size_t start = 0, k = 0; start < rows.size() || k == 0; start += rows_per_shard, ++k) {
    const std::size_t end = std::min(rows.size(), start + rows_per_shard);
    std::ostringstream name;
    name << stem << '-' << std::setw(5) << std::setfill('0') << k << ".shard";
    const auto p = dir / name.str();
    write_shard(p, rows.subspan(start, end - start), text_size, speech_size, seq_len,
                tags.empty() ? tags : tags.subspan(start, end - start));
    ctx.outputs.push_back(p);
    if (end == rows.size()) break;
  }
}

/// Rows of every shard under `path` (file or directory), in name order.
ShardData read_rows(Context& ctx, const fs::path& path) {
  std::vector<fs::path> files;
  if (fs::is_directory(path)) files = list_shards(path);
  else if (fs::exists(path)) files.push_back(path);
  if (files.empty()) throw ConfigError("paths.shards", "no shards at " + path.string());
  ShardData all;
  for (const auto& f : files) {
    ctx.inputs.push_back(f);
    auto d = read_shard(f);
    if (all.seqs.empty() && all.info.count == 0) all.info = d.info;
    if (d.info.text_vocab_size != all.info.text_vocab_size || d.info.speech_vocab_size != all.info.speech_vocab_size)
      throw Error("shards disagree on vocabulary sizes", f.string());
    all.info.count += all.seqs.empty() ? 0 : d.info.count;
    std::move(d.seqs.begin(), d.seqs.end(), std::back_inserter(all.seqs));
    all.tags.insert(all.tags.end(), d.tags.begin(), d.tags.end());
  }
  all.info.count = all.seqs.size();
  return all;
}

/// Runs fn(i) for i in [0, n) on `threads` workers; results land by index.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex mu;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// --- vocab ------------------------------------------------------------------

struct VocabArgs {
  std::string input, out;
  std::size_t max_size = 50000, min_freq = 1;
};

void run_vocab(Context& ctx, const VocabArgs& a) {
  const auto docs = read_corpus(ctx, a.input);
  const auto v = build_text_vocab(docs, a.max_size, a.min_freq);
  if (a.out.empty()) throw ConfigError("out", "--out is required");
  v.save(a.out);
  ctx.outputs.emplace_back(a.out);
  *ctx.out << json{{"docs", docs.size()}, {"size", v.size()}, {"out", a.out}}.dump() << "\n";
}

// --- synth ------------------------------------------------------------------

struct SynthArgs {
  std::string input, out;
  std::uint32_t unit_cap = 4096, chunk = 2;
};

void run_synth(Context& ctx, const SynthArgs& a) {
  const auto docs = read_corpus(ctx, a.input);
  const auto lex = UnitLexicon::build(corpus_words(docs), a.unit_cap, ctx.cfg.duration, a.chunk);
  if (a.out.empty()) throw ConfigError("out", "--out is required");
  lex.save(a.out);
  ctx.outputs.emplace_back(a.out);
  *ctx.out << json{{"inventory", lex.inventory_size()},
                   {"expected_tokens_per_unit", lex.duration().expected_tokens_per_unit()},
                   {"out", a.out}}
                  .dump()
           << "\n";
}

// --- t2t --------------------------------------------------------------------

struct T2TArgs {
  std::string mode = "oracle", input, vocab, lexicon, out, emit = "speech";
  std::uint64_t steps = 300;
  std::size_t max_tokens = 256;
};

void run_t2t(Context& ctx, const T2TArgs& a) {
  const auto docs = read_corpus(ctx, a.input);
  const Vocab text = text_part(text_vocab_for(ctx, a.vocab, docs));
  const auto lex = lexicon_for(ctx, a.lexicon.empty() ? ctx.cfg.paths.lexicon : a.lexicon, docs);
  const Vocab vocab = Vocab::combine(text, lex.inventory_size());
  if (a.out.empty()) throw ConfigError("out", "--out is required");
  const fs::path out(a.out);
  const OracleSynthesizer oracle(lex, vocab.speech_base());

  std::unique_ptr<SpanSynthesizer> learned;
  json summary = {{"mode", a.mode}, {"docs", docs.size()}};
  if (a.mode == "learned") {
    // sentence-sized pairs: cut after a word ending in '.', or every 16 words
    std::vector<std::string> sentences;
    for (const auto& d : docs) {
      std::string cur;
      std::size_t n = 0;
      for (const auto& w : split_words(d.text)) {
        cur += (n ? " " : "") + w;
        if (++n == 16 || w.back() == '.') {
          sentences.push_back(std::move(cur));
          cur.clear();
          n = 0;
        }
      }
      if (n) sentences.push_back(std::move(cur));
    }
    const auto pairs = make_parallel_pairs(sentences, vocab, lex, ctx.seed);
    const std::size_t n_eval = std::max<std::size_t>(1, pairs.size() / 10);
    if (pairs.size() < 2) throw ConfigError("input", "learned mode needs at least two documents");
    const std::span<const ParallelPair> eval_pairs(pairs.data(), n_eval);
    const std::span<const ParallelPair> train_pairs(pairs.data() + n_eval, pairs.size() - n_eval);
    lm::LMConfig lc = ctx.cfg.lm;
    lc.vocab_size = vocab.size();
    lm::TrainConfig tc = ctx.cfg.train;
    tc.steps = a.steps;
    auto res = train_t2t(train_pairs, lc, tc, ctx.seed);
    const auto ckpt = out / "t2t.ckpt";
    fs::create_directories(out);
    lm::save_checkpoint(ckpt, res.params);
    ctx.outputs.push_back(ckpt);
    auto synth = std::make_unique<LearnedSynthesizer>(res.params, vocab, a.max_tokens);
    // token error rate against the jitter-free oracle on held-back pairs
    double ter = 0;
    Rng rng(ctx.seed);
    TerByLength strata;
    static constexpr std::size_t kSpanLens[] = {1, 4, 8, 16, 32};
    for (const auto& p : eval_pairs) {
      const auto words = split_words(decode_text(p.text.ids, vocab));
      auto ter_of = [&](std::span<const std::string> w) {
        return token_error_rate(render_speech(w, lex, vocab.speech_base()).ids, synth->synthesize(w, rng).ids);
      };
      const double whole = ter_of(words);
      ter += whole;
      strata.add(words.size(), whole);
      // the same document cut into spans of cycling lengths
      for (std::size_t i = 0, k = 0; i < words.size(); ++k) {
        const std::size_t n = std::min(kSpanLens[k % std::size(kSpanLens)], words.size() - i);
        strata.add(n, ter_of(std::span(words).subspan(i, n)));
        i += n;
      }
    }
    summary["ter"] = ter / static_cast<double>(eval_pairs.size());
    summary["ter_by_span_length"] = strata.to_json();
    summary["ter_random_baseline"] = 1.0 - 1.0 / static_cast<double>(vocab.speech_size());
    summary["final_loss"] = res.history.empty() ? 0.0 : res.history.back().loss;
    learned = std::move(synth);
  } else if (a.mode != "oracle") {
    throw ConfigError("mode", "must be oracle or learned");
  }
  const SpanSynthesizer& synth = learned ? *learned : static_cast<const SpanSynthesizer&>(oracle);

  std::vector<TokenSequence> seqs(docs.size());
  SourceKind kind = SourceKind::speech;
  if (a.emit == "text") kind = SourceKind::text;
  else if (a.emit == "asr") kind = SourceKind::supervised_asr;
  else if (a.emit == "tts") kind = SourceKind::supervised_tts;
  else if (a.emit != "speech") throw ConfigError("emit", "must be text, speech, asr or tts");
  parallel_for(docs.size(), ctx.threads, [&](std::size_t i) {
    auto rng = derive_rng(ctx.seed, {stable_hash(docs[i].id)});
    const auto words = split_words(docs[i].text);
    if (kind == SourceKind::text) {
      seqs[i] = encode_words(words, vocab);
      return;
    }
    auto speech = synth.synthesize(words, rng);
    if (kind == SourceKind::speech) {
      TokenSequence s;
      s.ids.push_back(special::begin_of_audio);
      s.ids.insert(s.ids.end(), speech.ids.begin(), speech.ids.end());
      s.ids.push_back(special::end_of_audio);
      seqs[i] = std::move(s);
    } else {
      seqs[i] = supervised_pair_format({encode_words(words, vocab), std::move(speech)}, kind);
    }
  });
  const auto rows = pack_sequences(seqs, ctx.cfg.mix.seq_len);
  const std::vector<std::uint8_t> tags(rows.size(), static_cast<std::uint8_t>(kind));
  write_rows(ctx, out, a.emit, rows, vocab.text_size(), vocab.speech_size(), ctx.cfg.mix.seq_len, tags);
  vocab.save(out / "vocab.json");
  ctx.outputs.push_back(out / "vocab.json");
  summary["rows"] = rows.size();
  *ctx.out << summary.dump() << "\n";
}

// --- interleave -------------------------------------------------------------

struct InterleaveArgs {
  std::string input, vocab, lexicon, out;
  std::size_t rows_per_shard = 4096;
};

void run_interleave(Context& ctx, const InterleaveArgs& a) {
  const auto docs = read_corpus(ctx, a.input.empty() ? ctx.cfg.paths.corpus : a.input);
  const Vocab text = text_part(text_vocab_for(ctx, a.vocab, docs));
  const auto lex = lexicon_for(ctx, a.lexicon.empty() ? ctx.cfg.paths.lexicon : a.lexicon, docs);
  const Vocab vocab = Vocab::combine(text, lex.inventory_size());
  const std::string out_dir = a.out.empty() ? ctx.cfg.paths.shards : a.out;
  if (out_dir.empty()) throw ConfigError("out", "--out is required");
  const fs::path out(out_dir);
  InterleaveConfig ic = ctx.cfg.interleave;
  ic.seed = ctx.seed;
  const OracleSynthesizer synth(lex, vocab.speech_base());

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<InterleavedDoc> results(docs.size());
  parallel_for(docs.size(), ctx.threads,
               [&](std::size_t i) { results[i] = interleave_document(docs[i], ic, synth, vocab); });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  InterleaveStats stats;
  std::vector<TokenSequence> seqs;
  std::size_t out_tokens = 0;
  for (auto& r : results) {
    stats.add(r, vocab);
    out_tokens += r.seq.size();
    seqs.push_back(std::move(r.seq));
  }
  const auto rows = pack_sequences(seqs, ctx.cfg.mix.seq_len);
  const std::vector<std::uint8_t> tags(rows.size(), static_cast<std::uint8_t>(SourceKind::interleaved));
  write_rows(ctx, out, "interleaved", rows, vocab.text_size(), vocab.speech_size(), ctx.cfg.mix.seq_len, tags, a.rows_per_shard);
  vocab.save(out / "vocab.json");
  lex.save(out / "lexicon.json");
  ctx.outputs.push_back(out / "vocab.json");
  ctx.outputs.push_back(out / "lexicon.json");
  json sidecar = stats.to_json();
  sidecar["config"] = ic.to_json();
  sidecar["expansion"] = lex.duration().d;
  write_json(ctx, out / "interleave_stats.json", sidecar);
  log_event("info", "interleave done",
            json{{"docs", docs.size()}, {"tokens", out_tokens}, {"seconds", secs},
                 {"tokens_per_s", secs > 0 ? static_cast<double>(out_tokens) / secs : 0.0}}
                .dump());
  *ctx.out << json{{"docs", docs.size()},
                   {"rows", rows.size()},
                   {"speech_ratio", stats.speech_ratio()},
                   {"mean_coverage", stats.mean_coverage()},
                   {"mean_span_length", stats.mean_span_length()}}
                  .dump()
           << "\n";
}

// --- stats ------------------------------------------------------------------

void run_stats(Context& ctx, const std::string& dir) {
  const auto data = read_rows(ctx, dir);
  std::size_t speech = 0, content = 0, tokens = 0;
  std::map<std::string, std::size_t> by_tag;
  for (std::size_t r = 0; r < data.seqs.size(); ++r) {
    for (auto id : data.seqs[r].ids) {
      if (id == special::pad) continue;
      ++tokens;
      if (id < special::count) continue;
      ++content;
      if (id >= data.info.text_vocab_size) ++speech;
    }
    const auto tag = r < data.tags.size() ? data.tags[r] : 0;
    ++by_tag[tag ? source_kind_name(static_cast<SourceKind>(tag)) : "untagged"];
  }
  json report = {{"rows", data.seqs.size()},
                 {"seq_len", data.info.seq_len},
                 {"tokens", tokens},
                 {"speech_tokens", speech},
                 {"content_tokens", content},
                 {"speech_ratio", content ? static_cast<double>(speech) / static_cast<double>(content) : 0.0},
                 {"rows_by_source", by_tag}};
  const fs::path sidecar = fs::path(dir) / "interleave_stats.json";
  if (fs::is_directory(dir) && fs::exists(sidecar)) {
    std::ifstream in(sidecar);
    const json s = json::parse(in);
    report["sidecar_speech_ratio"] = s.at("speech_ratio");
    report["matches_sidecar"] = s.at("speech_ratio").get<double>() == report["speech_ratio"].get<double>() &&
                                s.at("speech_tokens").get<std::size_t>() == speech;
  }
  *ctx.out << report.dump() << "\n";
}

// --- mix --------------------------------------------------------------------

struct MixArgs {
  std::string spec, out;
};

struct LoadedMix {
  MixtureSpec spec;
  std::vector<Source> sources;
  std::uint32_t text_vocab = 0, speech_vocab = 0;
};

LoadedMix load_mix(Context& ctx, const std::string& path) {
  if (path.empty()) throw ConfigError("spec", "--spec is required");
  if (!fs::exists(path)) throw ConfigError("spec", "no such file: " + path);
  ctx.inputs.emplace_back(path);
  std::ifstream in(path);
  const json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ConfigError("spec", "not a JSON table");
  LoadedMix m;
  json base = ctx.cfg.mix.to_json();
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "sources") base[it.key()] = it.value();
  m.spec = MixtureSpec::from_json(base);
  m.spec.seed = ctx.seed;
  m.spec.validate();
  if (!j.contains("sources") || !j["sources"].is_array() || j["sources"].empty())
    throw ConfigError("mix.sources", "must list at least one source");
  const fs::path root = fs::path(path).parent_path();
  for (std::size_t i = 0; i < j["sources"].size(); ++i) {
    const auto& s = j["sources"][i];
    const std::string field = "mix.sources[" + std::to_string(i) + "]";
    if (!s.contains("path") || !s.contains("kind")) throw ConfigError(field, "needs kind and path");
    Source src;
    src.name = s.value("name", s["kind"].get<std::string>());
    try {
      src.kind = source_kind_from_name(s["kind"].get<std::string>());
    } catch (const Error& e) {
      throw ConfigError(field + ".kind", e.what());
    }
    fs::path p = s["path"].get<std::string>();
    if (p.is_relative() && !fs::exists(p)) p = root / p;
    const auto data = read_rows(ctx, p);
    if (i == 0) {
      m.text_vocab = data.info.text_vocab_size;
      m.speech_vocab = data.info.speech_vocab_size;
    } else if (m.text_vocab != data.info.text_vocab_size || m.speech_vocab != data.info.speech_vocab_size) {
      throw ConfigError(field + ".path", "vocabulary differs from the first source");
    }
    src.docs = unpack_sequences(data.seqs);
    m.sources.push_back(std::move(src));
  }
  return m;
}

void run_mix(Context& ctx, const MixArgs& a) {
  auto m = load_mix(ctx, a.spec);
  const auto schedule = compose_mixture(m.spec, m.sources);
  const auto batches = materialize(schedule, m.sources);
  std::vector<TokenSequence> rows;
  std::vector<std::uint8_t> tags;
  for (const auto& b : batches) {
    rows.insert(rows.end(), b.rows.begin(), b.rows.end());
    tags.insert(tags.end(), b.tags.begin(), b.tags.end());
  }
  if (a.out.empty()) throw ConfigError("out", "--out is required");
  write_rows(ctx, a.out, "mixed", rows, m.text_vocab, m.speech_vocab, m.spec.seq_len, tags);
  const auto report = report_mixture(schedule, batches);
  json r = report.to_json();
  r["schedule"] = schedule.to_json();
  write_json(ctx, fs::path(a.out) / "mix_report.json", r);
  *ctx.out << report.to_json().dump() << "\n";
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  std::string spec, data, lm, out;
  std::optional<std::uint64_t> steps;
  std::string precision;
};

template <typename T>
void train_typed(Context& ctx, const lm::LMConfig& lc, const lm::TrainConfig& tc, std::span<const lm::Batch> batches,
                 const fs::path& out) {
  fs::create_directories(out);
  const auto metrics_path = out / "metrics.jsonl";
  std::ofstream metrics(metrics_path);
  auto res = lm::train(lm::init_params<T>(lc), tc, [&](std::uint64_t s) { return batches[s % batches.size()]; },
                       [&](const lm::StepMetrics& m) {
                         metrics << json{{"step", m.step}, {"loss", m.loss}, {"lr", m.lr},
                                         {"tokens_per_s", m.tokens_per_s}}
                                        .dump()
                                 << "\n";
                       });
  metrics.close();
  ctx.outputs.push_back(metrics_path);
  lm::save_checkpoint(out / "model.ckpt", res.params);
  ctx.outputs.push_back(out / "model.ckpt");
  json summary = {{"steps", res.steps_done},
                  {"diverged", res.diverged},
                  {"final_loss", res.history.empty() ? 0.0 : res.history.back().loss},
                  {"checkpoint", (out / "model.ckpt").string()}};
  if (res.diverged) log_event("warn", "training stopped on a non-finite loss", summary.dump());
  *ctx.out << summary.dump() << "\n";
}

void run_train(Context& ctx, const TrainArgs& a) {
  lm::LMConfig lc = ctx.cfg.lm;
  if (!a.lm.empty()) {
    if (!fs::exists(a.lm)) throw ConfigError("lm", "no such file: " + a.lm);
    ctx.inputs.emplace_back(a.lm);
    std::ifstream in(a.lm);
    const json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("lm", "not valid JSON");
    json base = lc.to_json();
    base.update(j);
    lc = lm::LMConfig::from_json(base);
  }
  if (a.precision == "f64") lc.precision = lm::Precision::f64;
  else if (a.precision == "f32") lc.precision = lm::Precision::f32;
  else if (!a.precision.empty()) throw ConfigError("lm.precision", "must be f32 or f64");
  lc.seed = ctx.seed;

  std::vector<lm::Batch> batches;
  std::uint32_t seq_len = 0;
  if (!a.spec.empty()) {
    auto m = load_mix(ctx, a.spec);
    const auto schedule = compose_mixture(m.spec, m.sources);
    seq_len = m.spec.seq_len;
    lc.vocab_size = m.text_vocab + m.speech_vocab;
    for (const auto& pb : materialize(schedule, m.sources)) {
      lm::Batch b;
      b.rows = pb.rows.size();
      b.seq_len = seq_len;
      for (const auto& r : pb.rows) {
        b.tokens.insert(b.tokens.end(), r.ids.begin(), r.ids.end());
        b.mask.insert(b.mask.end(), r.loss_mask.begin(), r.loss_mask.end());
      }
      batches.push_back(std::move(b));
    }
  } else if (!a.data.empty()) {
    const auto data = read_rows(ctx, a.data);
    seq_len = data.info.seq_len;
    lc.vocab_size = data.info.vocab_size();
    const std::size_t br = ctx.cfg.mix.batch_rows;
    for (std::size_t s = 0; s < data.seqs.size(); s += br) {
      lm::Batch b;
      b.seq_len = seq_len;
      for (std::size_t r = s; r < std::min(data.seqs.size(), s + br); ++r) {
        b.tokens.insert(b.tokens.end(), data.seqs[r].ids.begin(), data.seqs[r].ids.end());
        b.mask.insert(b.mask.end(), data.seqs[r].loss_mask.begin(), data.seqs[r].loss_mask.end());
        ++b.rows;
      }
      batches.push_back(std::move(b));
    }
  } else {
    throw ConfigError("spec", "pass --spec or --data");
  }
  if (batches.empty()) throw ConfigError("spec", "no training batches");
  lc.max_seq_len = std::max(lc.max_seq_len, seq_len);
  lc.validate();
  lm::TrainConfig tc = ctx.cfg.train;
  tc.steps = a.steps.value_or(batches.size());
  tc.batch_size = ctx.cfg.mix.batch_rows;
  tc.validate();
  ctx.cfg.lm = lc;
  ctx.cfg.train = tc;
  const fs::path out = a.out.empty() ? fs::path(ctx.cfg.paths.checkpoints) : fs::path(a.out);
  if (out.empty()) throw ConfigError("out", "--out is required");
  if (lc.precision == lm::Precision::f64) train_typed<double>(ctx, lc, tc, batches, out);
  else train_typed<float>(ctx, lc, tc, batches, out);
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt, items, settings = "S,TS,ST,T", out, world, write_items;
  bool raw = false, trained = false;
};

void run_eval(Context& ctx, const EvalArgs& a) {
  if (!a.write_items.empty()) {
    eval::ExperimentConfig ec;
    if (!a.world.empty()) {
      ctx.inputs.emplace_back(a.world);
      std::ifstream in(a.world);
      const json j = json::parse(in, nullptr, false);
      if (j.is_discarded()) throw ConfigError("world", "not valid JSON");
      ec = eval::ExperimentConfig::from_json(j);
    }
    ec.world.seed = ctx.seed;
    const auto w = eval::gen_toy_world(ec.world, ec.duration);
    std::vector<eval::Setting> settings;
    for (const auto& s : split_list(a.settings)) settings.push_back(eval::setting_from_name(s));
    const auto items = eval::make_items(w, !a.trained, settings);
    fs::path p(a.write_items);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p);
    for (const auto& it : items) f << it.to_json().dump() << "\n";
    f.close();
    ctx.outputs.push_back(p);
    *ctx.out << json{{"items", items.size()}, {"out", p.string()}}.dump() << "\n";
    return;
  }
  if (a.ckpt.empty()) throw ConfigError("ckpt", "--ckpt is required");
  if (a.items.empty()) throw ConfigError("items", "--items is required");
  if (!fs::exists(a.ckpt)) throw ConfigError("ckpt", "no such file: " + a.ckpt);
  if (!fs::exists(a.items)) throw ConfigError("items", "no such file: " + a.items);
  ctx.inputs.emplace_back(a.ckpt);
  ctx.inputs.emplace_back(a.items);
  std::set<eval::Setting> wanted;
  for (const auto& s : split_list(a.settings)) wanted.insert(eval::setting_from_name(s));
  std::vector<eval::ContinuationItem> items;
  {
    std::ifstream in(a.items);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const json j = json::parse(line, nullptr, false);
      if (j.is_discarded()) throw Error("malformed item", a.items + ":" + std::to_string(n));
      auto it = eval::ContinuationItem::from_json(j);
      if (wanted.count(it.setting)) items.push_back(std::move(it));
    }
  }
  const auto params = lm::load_checkpoint(a.ckpt);
  // items are scored in fixed chunks so the totals do not depend on threads
  const std::size_t chunk = 64;
  const std::size_t n_chunks = (items.size() + chunk - 1) / chunk;
  std::vector<eval::Scores> partial(n_chunks);
  parallel_for(n_chunks, ctx.threads, [&](std::size_t c) {
    const std::span<const eval::ContinuationItem> part(items.data() + c * chunk,
                                                       std::min(chunk, items.size() - c * chunk));
    partial[c] = std::visit([&](const auto& p) { return eval::continuation_accuracy(p, part, !a.raw); }, params);
  });
  eval::Scores total{};
  for (const auto& s : partial)
    for (std::size_t k = 0; k < eval::kSettings; ++k) {
      total[k].correct += s[k].correct;
      total[k].total += s[k].total;
    }
  json report = {{"items", items.size()}, {"normalized", !a.raw}, {"settings", eval::scores_json(total)}};
  if (!a.out.empty()) write_json(ctx, a.out, report);
  *ctx.out << report.dump() << "\n";
}

// --- vq-demo ----------------------------------------------------------------

struct VQDemoArgs {
  std::optional<std::uint32_t> codes, dim;
  std::uint64_t steps = 1000;
  std::size_t batch = 256;
  std::string out;
};

void run_vq_demo(Context& ctx, const VQDemoArgs& a) {
  vq::VQConfig vc = ctx.cfg.vq;
  if (a.codes) vc.codebook_size = *a.codes;
  if (a.dim) vc.dim = *a.dim;
  vc.seed = ctx.seed;
  vc.validate();
  ctx.cfg.vq = vc;
  if (a.batch < vc.codebook_size) throw ConfigError("batch", "must be >= codes");
  // data: one Gaussian blob per code, means in [-1, 1], sd 0.05
  Rng rng = derive_rng(ctx.seed, {stable_hash("vq-demo")});
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  std::normal_distribution<float> noise(0.f, 0.05f);
  vq::Matrix means(vc.codebook_size, vc.dim);
  for (auto& x : means.data) x = u(rng);
  std::uniform_int_distribution<std::uint32_t> pick(0, vc.codebook_size - 1);
  auto sample = [&] {
    vq::Matrix m(a.batch, vc.dim);
    for (std::size_t i = 0; i < a.batch; ++i) {
      const auto c = pick(rng);
      for (std::uint32_t k = 0; k < vc.dim; ++k) m.row(i)[k] = means.row(c)[k] + noise(rng);
    }
    return m;
  };
  auto state = vq::init_state(vc, sample());
  std::size_t restarts = 0;
  json last;
  for (std::uint64_t s = 0; s < a.steps; ++s) {
    const auto batch = sample();
    const auto q = vq::quantize(batch, state);
    vq::ema_update(state, batch, q.indices);
    restarts += vq::random_restart(state, batch, rng).size();
    if (s % 100 == 0 || s + 1 == a.steps) {
      std::vector<double> counts(vc.codebook_size, 0);
      for (auto i : q.indices) counts[i] += 1;
      double ent = 0;
      std::size_t used = 0;
      for (double c : counts)
        if (c > 0) {
          ++used;
          const double p = c / static_cast<double>(q.indices.size());
          ent -= p * std::log(p);
        }
      last = {{"step", s}, {"commitment", q.commitment}, {"perplexity", std::exp(ent)},
              {"codes_used", used}, {"restarts", restarts}};
      *ctx.out << last.dump() << "\n";
    }
  }
  if (!a.out.empty()) {
    vq::save_state(a.out, state);
    ctx.outputs.emplace_back(a.out);
  }
}

// --- ablate -----------------------------------------------------------------

struct AblateArgs {
  std::string axis, grid, seeds, experiment, out;
};

void run_ablate(Context& ctx, const AblateArgs& a) {
  const auto axis = eval::axis_from_name(a.axis);
  std::vector<double> grid;
  for (const auto& g : split_list(a.grid)) {
    try {
      grid.push_back(std::stod(g));
    } catch (const std::exception&) {
      throw ConfigError("ablate.grid", "not a number: " + g);
    }
  }
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_list(a.seeds)) seeds.push_back(std::stoull(s));
  if (seeds.empty()) seeds.push_back(ctx.seed);
  eval::ExperimentConfig base;
  if (!a.experiment.empty()) {
    if (!fs::exists(a.experiment)) throw ConfigError("experiment", "no such file: " + a.experiment);
    ctx.inputs.emplace_back(a.experiment);
    std::ifstream in(a.experiment);
    const json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("experiment", "not valid JSON");
    base = eval::ExperimentConfig::from_json(j);
  }
  base.validate();
  const auto rows = eval::run_ablation(axis, grid, seeds, base, [&](const eval::AblationRow& r) {
    log_event("info", "ablation point",
              json{{"value", r.value}, {"seed", r.seed}, {"cross_modal", r.result.cross_modal()},
                   {"seconds", r.result.seconds}}
                  .dump());
  });
  json report = eval::ablation_json(axis, rows);
  report["base"] = base.to_json();
  if (!a.out.empty()) {
    write_json(ctx, a.out, report);
    std::ostringstream tsv;
    tsv << "value\truns\tfailed\tcross_modal\tS\tTS\tST\n";
    for (const auto& s : report["summary"])
      tsv << s["value"].get<double>() << '\t' << s["runs"] << '\t' << s["failed"] << '\t'
          << s["cross_modal"].get<double>() << '\t' << s["S"].get<double>() << '\t' << s["TS"].get<double>() << '\t'
          << s["ST"].get<double>() << '\n';
    const fs::path tsv_path = fs::path(a.out).replace_extension(".tsv");
    write_text(tsv_path, tsv.str());
    ctx.outputs.push_back(tsv_path);
  }
  *ctx.out << report["summary"].dump() << "\n";
}

void error_line(std::ostream& err, int code, const std::string& field, const std::string& msg) {
  json rec = {{"level", "error"}, {"exit", code}, {"msg", msg}};
  if (!field.empty()) rec["field"] = field;
  err << rec.dump() << "\n";
}

}  // namespace

// ---------------------------------------------------------------------------

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"forge: interleaved speech-text pre-training pipeline at toy scale", "forge"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", version());

  std::string config_path, log_level = "info", manifest;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  app.add_option("--config", config_path, "Run config (JSON)");
  app.add_option("--seed", seed, "Global seed (overrides FORGE_SEED)");
  app.add_option("--threads", threads, "Worker threads for interleave, t2t and eval")->check(CLI::PositiveNumber);
  app.add_option("--log-level", log_level, "debug, info, warn or error")
      ->check(CLI::IsMember({"debug", "info", "warn", "error"}));
  app.add_option("--manifest", manifest, "Manifest path (default: next to the output)");

  VocabArgs va;
  auto* vocab = app.add_subcommand("vocab", "Build a word vocabulary from a JSONL corpus");
  vocab->add_option("--input", va.input, "Corpus JSONL")->required();
  vocab->add_option("--max-size", va.max_size, "Vocabulary cap, specials included");
  vocab->add_option("--min-freq", va.min_freq, "Minimum word count");
  vocab->add_option("--out", va.out, "Output vocab.json")->required();

  SynthArgs sa;
  std::optional<std::uint32_t> synth_d;
  std::optional<double> synth_jitter;
  auto* synth = app.add_subcommand("synth", "Build the unit lexicon for a corpus");
  synth->add_option("--input", sa.input, "Corpus JSONL")->required();
  synth->add_option("--expansion", synth_d, "Speech tokens per unit (d)");
  synth->add_option("--jitter", synth_jitter, "Probability of one extra token per unit");
  synth->add_option("--unit-cap", sa.unit_cap, "Distinct units before hashing");
  synth->add_option("--chunk", sa.chunk, "Characters per unit");
  synth->add_option("--out", sa.out, "Output lexicon JSON")->required();

  T2TArgs ta;
  std::optional<std::uint32_t> t2t_d;
  auto* t2t = app.add_subcommand("t2t", "Encode a corpus as text, speech, ASR or TTS shards");
  t2t->add_option("--mode", ta.mode, "oracle or learned")->check(CLI::IsMember({"oracle", "learned"}));
  t2t->add_option("--input", ta.input, "Corpus JSONL")->required();
  t2t->add_option("--vocab", ta.vocab, "Text vocabulary (built from the corpus if absent)");
  t2t->add_option("--lexicon", ta.lexicon, "Unit lexicon (built from the corpus if absent)");
  t2t->add_option("--expansion", t2t_d, "Speech tokens per unit (d)");
  t2t->add_option("--emit", ta.emit, "text, speech, asr or tts")
      ->check(CLI::IsMember({"text", "speech", "asr", "tts"}));
  t2t->add_option("--steps", ta.steps, "Training steps in learned mode");
  t2t->add_option("--out", ta.out, "Output directory")->required();

  InterleaveArgs ia;
  std::optional<double> eta, lambda;
  std::optional<std::uint32_t> il_d, seq_len;
  auto* inter = app.add_subcommand("interleave", "Build interleaved speech-text shards");
  inter->add_option("--input", ia.input, "Corpus JSONL");
  inter->add_option("--vocab", ia.vocab, "Text vocabulary (built from the corpus if absent)");
  inter->add_option("--lexicon", ia.lexicon, "Unit lexicon (built from the corpus if absent)");
  inter->add_option("--eta", eta, "Target speech fraction of words");
  inter->add_option("--lambda", lambda, "Mean span length in words");
  inter->add_option("--expansion", il_d, "Speech tokens per unit (d)");
  inter->add_option("--seq-len", seq_len, "Packed row length");
  inter->add_option("--rows-per-shard", ia.rows_per_shard, "Rows per shard file");
  inter->add_option("--out", ia.out, "Output directory");

  MixArgs ma;
  auto* mix = app.add_subcommand("mix", "Compose and pack the pre-training mixture");
  mix->add_option("--spec", ma.spec, "Mixture spec (JSON)")->required();
  mix->add_option("--out", ma.out, "Output directory")->required();

  TrainArgs tra;
  auto* train = app.add_subcommand("train", "Train the tiny LM");
  train->add_option("--spec", tra.spec, "Mixture spec; batches are composed in memory");
  train->add_option("--data", tra.data, "Directory of packed shards, read in order");
  train->add_option("--lm", tra.lm, "LM config (JSON)");
  train->add_option("--steps", tra.steps, "Steps (default: one pass over the batches)");
  train->add_option("--precision", tra.precision, "f32 or f64");
  train->add_option("--out", tra.out, "Checkpoint directory");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Score continuation items, or write toy-world items");
  ev->add_option("--ckpt", ea.ckpt, "Checkpoint");
  ev->add_option("--items", ea.items, "Items JSONL");
  ev->add_option("--settings", ea.settings, "Comma-separated subset of S,TS,ST,T");
  ev->add_flag("--raw", ea.raw, "Rank by summed rather than per-token log-likelihood");
  ev->add_option("--out", ea.out, "Report JSON");
  ev->add_option("--world", ea.world, "Experiment config for --write-items");
  ev->add_option("--write-items", ea.write_items, "Write toy-world items here and exit");
  ev->add_flag("--trained-facts", ea.trained, "Items over training facts instead of held-out ones");

  std::string stats_dir;
  auto* stats = app.add_subcommand("stats", "Token statistics of a shard directory");
  stats->add_option("dir", stats_dir, "Shard directory or file")->required();

  VQDemoArgs vqa;
  auto* vqd = app.add_subcommand("vq-demo", "EMA codebook training on synthetic clusters");
  vqd->add_option("--codes", vqa.codes, "Codebook size");
  vqd->add_option("--dim", vqa.dim, "Vector dimension");
  vqd->add_option("--steps", vqa.steps, "Training steps");
  vqd->add_option("--batch", vqa.batch, "Vectors per step");
  vqd->add_option("--out", vqa.out, "Save the final state here");

  AblateArgs aa;
  auto* abl = app.add_subcommand("ablate", "Train and evaluate one model per grid point and seed");
  abl->add_option("--axis", aa.axis, "interleave_tokens, eta or expansion")->required();
  abl->add_option("--grid", aa.grid, "Comma-separated values")->required();
  abl->add_option("--seeds", aa.seeds, "Comma-separated seeds (default: the global seed)");
  abl->add_option("--experiment", aa.experiment, "Experiment config (JSON)");
  abl->add_option("--out", aa.out, "Report JSON; a .tsv table is written beside it");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << version() << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    error_line(err, kExitUsage, "", e.what());
    err << app.help();
    return kExitUsage;
  }

  Context ctx;
  ctx.argv = args;
  ctx.out = &out;
  ctx.threads = threads;
  ctx.command = app.get_subcommands().front()->get_name();
  try {
    set_log_level(log_level);
    if (!config_path.empty()) {
      ctx.cfg = validate_config(config_path);
      ctx.inputs.emplace_back(config_path);
    }
    // flag beats environment beats config file
    if (!seed) {
      if (const char* env = std::getenv("FORGE_SEED"); env && *env) {
        try {
          std::size_t used = 0;
          seed = std::stoull(env, &used);
          if (env[used] != '\0') throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
          throw ConfigError("seed", std::string("FORGE_SEED is not an unsigned integer: ") + env);
        }
      }
    }
    if (!seed) seed = ctx.cfg.seed;
    if (!seed) throw ConfigError("seed", "required: pass --seed, set FORGE_SEED, or put seed in the config");
    ctx.seed = *seed;
    ctx.cfg.seed = seed;

    if (synth_d) ctx.cfg.duration.d = *synth_d;
    if (synth_jitter) ctx.cfg.duration.p_jitter = *synth_jitter;
    if (t2t_d) ctx.cfg.duration.d = *t2t_d;
    if (il_d) ctx.cfg.duration.d = *il_d;
    if (eta) ctx.cfg.interleave.eta = *eta;
    if (lambda) ctx.cfg.interleave.lambda = *lambda;
    if (seq_len) ctx.cfg.mix.seq_len = *seq_len;
    ctx.cfg.validate();

    std::string out_path;
    if (*vocab) {
      out_path = va.out;
      run_vocab(ctx, va);
    } else if (*synth) {
      out_path = sa.out;
      run_synth(ctx, sa);
    } else if (*t2t) {
      out_path = ta.out;
      run_t2t(ctx, ta);
    } else if (*inter) {
      out_path = ia.out.empty() ? ctx.cfg.paths.shards : ia.out;
      run_interleave(ctx, ia);
    } else if (*mix) {
      out_path = ma.out;
      run_mix(ctx, ma);
    } else if (*train) {
      out_path = tra.out.empty() ? ctx.cfg.paths.checkpoints : tra.out;
      run_train(ctx, tra);
    } else if (*ev) {
      out_path = ea.write_items.empty() ? ea.out : ea.write_items;
      run_eval(ctx, ea);
    } else if (*stats) {
      run_stats(ctx, stats_dir);
    } else if (*vqd) {
      out_path = vqa.out;
      run_vq_demo(ctx, vqa);
    } else if (*abl) {
      out_path = aa.out;
      run_ablate(ctx, aa);
    }
    ctx.manifest_path = manifest.empty() ? manifest_for(out_path) : manifest;
    write_manifest(ctx);
    return kExitOk;
  } catch (const ConfigError& e) {
    error_line(err, kExitConfig, e.where(), e.what());
    return kExitConfig;
  } catch (const Error& e) {
    error_line(err, kExitFailure, e.where(), e.what());
    return kExitFailure;
  } catch (const std::exception& e) {
    error_line(err, kExitFailure, "", e.what());
    return kExitFailure;
  }
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace forge::cli
