#include "forge/corpus.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cstring>
#include <sstream>

namespace forge {

namespace {

constexpr std::array<const char*, special::count> kSpecialSurfaces = {
    "<pad>",         "<unk>",  "<sep>",        "<|begin_of_audio|>", "<|end_of_audio|>",
    "<|system|>",    "<|user|>", "<|assistant|>", "<|transcript|>"};

constexpr char kShardMagic[8] = {'F', 'R', 'G', 'S', 'H', 'A', 'R', 'D'};

const char* kind_name(VocabKind k) {
  switch (k) {
    case VocabKind::text: return "text";
    case VocabKind::speech: return "speech";
    case VocabKind::combined: return "combined";
  }
  return "text";
}

VocabKind kind_from_name(const std::string& s) {
  if (s == "text") return VocabKind::text;
  if (s == "speech") return VocabKind::speech;
  if (s == "combined") return VocabKind::combined;
  throw Error("unknown vocab kind '" + s + "'", "kind");
}

void put_u32(std::vector<std::uint8_t>& out, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

void put_u64(std::vector<std::uint8_t>& out, std::size_t at, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint64_t get_u64(const std::uint8_t* p) {
  return static_cast<std::uint64_t>(get_u32(p)) |
         (static_cast<std::uint64_t>(get_u32(p + 4)) << 32);
}

std::uint32_t crc(const std::uint8_t* p, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

}  // namespace

std::string normalize_text(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  bool pending_space = false;
  for (unsigned char c : raw) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    if (j > i) words.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

// ---------------------------------------------------------------------------

Vocab Vocab::specials_only() {
  Vocab v;
  v.kind_ = VocabKind::text;
  for (const char* s : kSpecialSurfaces) v.add_word(s);
  v.text_size_ = v.size();
  return v;
}

Vocab Vocab::speech(std::uint32_t n) {
  Vocab v;
  v.kind_ = VocabKind::speech;
  v.text_size_ = 0;
  for (std::uint32_t i = 0; i < n; ++i) v.add_word("<speech_" + std::to_string(i) + ">");
  return v;
}

Vocab Vocab::combine(const Vocab& text, std::uint32_t speech_size) {
  if (text.kind_ != VocabKind::text) throw Error("combine expects a text vocab");
  Vocab v = text;
  v.kind_ = VocabKind::combined;
  v.text_size_ = text.size();
  for (std::uint32_t i = 0; i < speech_size; ++i) v.add_word("<speech_" + std::to_string(i) + ">");
  return v;
}

void Vocab::add_word(const std::string& w) {
  if (index_.contains(w)) throw Error("duplicate vocab entry '" + w + "'");
  index_.emplace(w, static_cast<TokenId>(surfaces_.size()));
  surfaces_.push_back(w);
  if (kind_ == VocabKind::text) text_size_ = size();
}

std::optional<TokenId> Vocab::find(std::string_view surface) const {
  auto it = index_.find(std::string(surface));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocab::id(std::string_view surface) const {
  if (auto f = find(surface)) return *f;
  if (kind_ == VocabKind::speech) throw Error("unknown speech surface '" + std::string(surface) + "'");
  return special::unk;
}

std::vector<std::string> Vocab::words() const {
  if (kind_ == VocabKind::speech) return {};
  return {surfaces_.begin() + special::count, surfaces_.begin() + text_size_};
}

nlohmann::json Vocab::to_json() const {
  nlohmann::json j;
  j["kind"] = kind_name(kind_);
  j["text_size"] = text_size_;
  j["speech_size"] = speech_size();
  auto& sp = j["specials"];
  if (kind_ != VocabKind::speech) {
    for (std::uint32_t i = 0; i < special::count; ++i) sp[surfaces_[i]] = i;
  } else {
    sp = nlohmann::json::object();
  }
  auto& entries = j["entries"];
  entries = nlohmann::json::array();
  for (std::uint32_t i = 0; i < size(); ++i) entries.push_back({surfaces_[i], i});
  return j;
}

Vocab Vocab::from_json(const nlohmann::json& j) {
  Vocab v;
  v.kind_ = kind_from_name(j.at("kind").get<std::string>());
  const auto& entries = j.at("entries");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (e.at(1).get<std::uint64_t>() != i) throw Error("vocab ids not dense", "entries[" + std::to_string(i) + "]");
    v.index_.emplace(e.at(0).get<std::string>(), static_cast<TokenId>(i));
    v.surfaces_.push_back(e.at(0).get<std::string>());
  }
  v.text_size_ = j.at("text_size").get<std::uint32_t>();
  if (v.text_size_ > v.size()) throw Error("text_size exceeds vocab size", "text_size");
  if (v.kind_ != VocabKind::speech) {
    if (v.size() < special::count) throw Error("vocab lacks special tokens", "entries");
    for (std::uint32_t i = 0; i < special::count; ++i)
      if (v.surfaces_[i] != kSpecialSurfaces[i]) throw Error("special token mismatch", "entries[" + std::to_string(i) + "]");
  }
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write vocab", path.string());
  out << to_json().dump(1) << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read vocab", path.string());
  return from_json(nlohmann::json::parse(in));
}

// ---------------------------------------------------------------------------

JsonlReader::JsonlReader(const std::filesystem::path& path) : path_(path), in_(path) {
  if (!in_) throw Error("cannot open corpus", path.string());
}

std::optional<TextDoc> JsonlReader::next() {
  std::string raw;
  while (std::getline(in_, raw)) {
    ++line_;
    if (raw.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto where = path_.string() + ":" + std::to_string(line_);
    auto j = nlohmann::json::parse(raw, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded() || !j.is_object() || !j.contains("text") || !j["text"].is_string()) {
      ++skipped_;
      log_event("warn", "malformed corpus line skipped", nlohmann::json{{"at", where}}.dump());
      continue;
    }
    TextDoc doc;
    doc.text = normalize_text(j["text"].get<std::string>());
    if (doc.text.empty()) {
      ++skipped_;
      log_event("warn", "empty document skipped", nlohmann::json{{"at", where}}.dump());
      continue;
    }
    if (j.contains("id") && j["id"].is_string()) {
      doc.id = j["id"].get<std::string>();
    } else if (j.contains("id") && j["id"].is_number_integer()) {
      doc.id = std::to_string(j["id"].get<std::int64_t>());
    } else {
      doc.id = "line-" + std::to_string(line_);
    }
    if (!seen_ids_.emplace(doc.id, line_).second) {
      ++skipped_;
      log_event("warn", "duplicate document id skipped",
                nlohmann::json{{"at", where}, {"id", doc.id}}.dump());
      continue;
    }
    return doc;
  }
  if (in_.bad()) throw Error("read failure", path_.string() + ":" + std::to_string(line_));
  return std::nullopt;
}

LoadedCorpus load_jsonl(const std::filesystem::path& path) {
  JsonlReader reader(path);
  LoadedCorpus out;
  while (auto d = reader.next()) out.docs.push_back(std::move(*d));
  out.skipped = reader.skipped();
  return out;
}

void write_jsonl(const std::filesystem::path& path, std::span<const TextDoc> docs) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write corpus", path.string());
  for (const auto& d : docs) out << nlohmann::json{{"id", d.id}, {"text", d.text}}.dump() << '\n';
}

Vocab build_text_vocab(std::span<const TextDoc> docs, std::size_t max_size, std::size_t min_freq) {
  if (max_size < special::count + 1)
    throw Error("max_size must be at least " + std::to_string(special::count + 1), "max_size");

  struct Stat {
    std::size_t count = 0;
    std::size_t first = 0;
  };
  std::unordered_map<std::string, Stat> stats;
  std::size_t order = 0;
  for (const auto& doc : docs) {
    for (auto& w : split_words(doc.text)) {
      auto [it, fresh] = stats.try_emplace(std::move(w));
      if (fresh) it->second.first = order++;
      ++it->second.count;
    }
  }

  std::vector<std::pair<std::string, Stat>> ranked(stats.begin(), stats.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second.count != b.second.count) return a.second.count > b.second.count;
    return a.second.first < b.second.first;
  });

  Vocab v = Vocab::specials_only();
  for (const auto& [w, st] : ranked) {
    if (v.size() >= max_size) break;
    if (st.count < min_freq) break;  // sorted by count, nothing later qualifies
    if (v.find(w)) continue;         // a literal special surface in the corpus
    v.add_word(w);
  }
  return v;
}

TokenSequence encode_words(std::span<const std::string> words, const Vocab& vocab) {
  if (vocab.kind() == VocabKind::speech) throw Error("encode_text needs a text or combined vocab");
  TokenSequence seq;
  seq.ids.reserve(words.size());
  for (const auto& w : words) {
    auto id = vocab.id(w);
    // speech surfaces are not text
    if (vocab.is_speech(id) || (vocab.is_special(id) && id != special::unk)) id = special::unk;
    seq.ids.push_back(id);
  }
  return seq;
}

TokenSequence encode_text(const TextDoc& doc, const Vocab& vocab) {
  auto words = split_words(normalize_text(doc.text));
  return encode_words(words, vocab);
}

std::string decode_text(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string out;
  for (auto id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += vocab.surface(id);
  }
  return out;
}

// ---------------------------------------------------------------------------

ShardInfo write_shard(const std::filesystem::path& path, std::span<const TokenSequence> seqs,
                      std::uint32_t text_vocab_size, std::uint32_t speech_vocab_size,
                      std::uint32_t seq_len, std::span<const std::uint8_t> tags) {
  if (!tags.empty() && tags.size() != seqs.size())
    throw Error("tag count does not match sequence count", path.string());
  const std::uint64_t vocab = std::uint64_t{text_vocab_size} + speech_vocab_size;
  const std::size_t n = seqs.size();
  const std::size_t tokens = n * seq_len;
  const std::size_t mask_bytes = (tokens + 7) / 8;
  std::vector<std::uint8_t> buf(kShardHeaderBytes + 4 * tokens + mask_bytes + n, 0);

  std::size_t at = kShardHeaderBytes;
  std::size_t bit = 0;
  const std::size_t mask_at = kShardHeaderBytes + 4 * tokens;
  for (std::size_t s = 0; s < n; ++s) {
    const auto& seq = seqs[s];
    if (seq.size() != seq_len)
      throw Error("sequence " + std::to_string(s) + " has length " + std::to_string(seq.size()) +
                      ", expected " + std::to_string(seq_len),
                  path.string());
    if (seq.has_mask() && seq.loss_mask.size() != seq.size())
      throw Error("mask length mismatch in sequence " + std::to_string(s), path.string());
    for (std::size_t t = 0; t < seq_len; ++t, ++bit) {
      if (seq.ids[t] >= vocab)
        throw Error("token id " + std::to_string(seq.ids[t]) + " out of vocab in sequence " +
                        std::to_string(s),
                    path.string());
      put_u32(buf, at, seq.ids[t]);
      at += 4;
      if (seq.target(t)) buf[mask_at + bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
    }
  }
  for (std::size_t s = 0; s < tags.size(); ++s) buf[mask_at + mask_bytes + s] = tags[s];

  std::memcpy(buf.data(), kShardMagic, 8);
  put_u32(buf, 8, kShardVersion);
  put_u32(buf, 12, text_vocab_size);
  put_u32(buf, 16, speech_vocab_size);
  put_u32(buf, 20, seq_len);
  put_u64(buf, 24, n);
  ShardInfo info{text_vocab_size, speech_vocab_size, seq_len, n, 0};
  info.payload_crc = crc(buf.data() + kShardHeaderBytes, buf.size() - kShardHeaderBytes);
  put_u32(buf, 32, info.payload_crc);
  put_u32(buf, 36, crc(buf.data(), 36));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write shard", path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error("short write", path.string());
  return info;
}

ShardData read_shard(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open shard", path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto at = [&](std::size_t off) { return path.string() + "@" + std::to_string(off); };

  if (buf.size() < kShardHeaderBytes)
    throw Error("truncated header (" + std::to_string(buf.size()) + " bytes)", at(buf.size()));
  if (std::memcmp(buf.data(), kShardMagic, 8) != 0) throw Error("bad magic", at(0));
  if (get_u32(buf.data() + 36) != crc(buf.data(), 36)) throw Error("header checksum mismatch", at(36));
  const auto version = get_u32(buf.data() + 8);
  if (version != kShardVersion)
    throw Error("unsupported shard version " + std::to_string(version), at(8));

  ShardData d;
  d.info.text_vocab_size = get_u32(buf.data() + 12);
  d.info.speech_vocab_size = get_u32(buf.data() + 16);
  d.info.seq_len = get_u32(buf.data() + 20);
  d.info.count = get_u64(buf.data() + 24);
  d.info.payload_crc = get_u32(buf.data() + 32);

  const std::uint64_t tokens = d.info.count * d.info.seq_len;
  const std::uint64_t mask_bytes = (tokens + 7) / 8;
  const std::uint64_t expected = kShardHeaderBytes + 4 * tokens + mask_bytes + d.info.count;
  if (buf.size() < expected)
    throw Error("truncated payload: expected " + std::to_string(expected) + " bytes", at(buf.size()));
  if (buf.size() > expected) throw Error("trailing bytes after payload", at(expected));
  if (crc(buf.data() + kShardHeaderBytes, buf.size() - kShardHeaderBytes) != d.info.payload_crc)
    throw Error("payload checksum mismatch", at(kShardHeaderBytes));

  const std::uint64_t vocab = d.info.vocab_size();
  const std::size_t mask_at = kShardHeaderBytes + 4 * tokens;
  d.seqs.resize(d.info.count);
  std::size_t off = kShardHeaderBytes;
  std::size_t bit = 0;
  for (auto& seq : d.seqs) {
    seq.ids.resize(d.info.seq_len);
    seq.loss_mask.resize(d.info.seq_len);
    for (std::uint32_t t = 0; t < d.info.seq_len; ++t, ++bit, off += 4) {
      seq.ids[t] = get_u32(buf.data() + off);
      if (seq.ids[t] >= vocab) throw Error("token id out of vocab", at(off));
      seq.loss_mask[t] = (buf[mask_at + bit / 8] >> (bit % 8)) & 1u;
    }
  }
  d.tags.assign(buf.begin() + static_cast<std::ptrdiff_t>(mask_at + mask_bytes), buf.end());
  return d;
}

std::vector<std::filesystem::path> list_shards(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) throw Error("not a directory", dir.string());
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".shard") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace forge
