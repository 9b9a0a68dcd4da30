#pragma once

// Record -> model input: structured vocabulary and one-hot encoding,
// keyword-window note extraction, chunking, and chunk embedding encoders.

#include <algorithm>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pheme/cohort.hpp"
#include "pheme/core.hpp"
#include "pheme/nn/tensor.hpp"

namespace pheme {

using nn::Tensor2D;

// ---------------------------------------------------------------------------
// Structured features

// Feature keys of one record: codes as-is, "DEM:attr=value", and
// "LAB:test_code" for abnormal results only. Sorted, unique.
inline std::vector<std::string> feature_keys(const PatientRecord& rec) {
  std::set<std::string> keys(rec.codes.begin(), rec.codes.end());
  for (const auto& [attr, value] : rec.demographics) keys.insert("DEM:" + attr + "=" + value);
  for (const auto& lab : rec.labs)
    if (lab.abnormal) keys.insert("LAB:" + lab.test_code);
  return {keys.begin(), keys.end()};
}

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> keys) : keys_(std::move(keys)) {
    for (std::size_t i = 0; i < keys_.size(); ++i)
      if (!index_.emplace(keys_[i], i).second) throw ValidationError("vocabulary: duplicate key " + keys_[i]);
  }

  std::size_t size() const { return keys_.size(); }
  bool empty() const { return keys_.empty(); }
  const std::vector<std::string>& keys() const { return keys_; }

  std::optional<std::size_t> find(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::uint64_t hash() const { return hash_strings(keys_); }

 private:
  std::vector<std::string> keys_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Keys present in at least `min_count` records, lexicographic order.
inline Vocabulary build_vocabulary(std::span<const PatientRecord* const> records, int min_count = 1) {
  if (min_count < 1) throw ValidationError("build_vocabulary: min_count must be >= 1");
  if (records.empty()) throw ValidationError("build_vocabulary: empty training set");
  std::map<std::string, int> counts;
  for (const auto* r : records)
    for (auto& k : feature_keys(*r)) ++counts[k];
  std::vector<std::string> keys;
  for (const auto& [k, c] : counts)
    if (c >= min_count) keys.push_back(k);
  return Vocabulary(std::move(keys));
}

inline Vocabulary build_vocabulary(const std::vector<PatientRecord>& records, int min_count = 1) {
  std::vector<const PatientRecord*> ptrs;
  for (const auto& r : records) ptrs.push_back(&r);
  return build_vocabulary(std::span<const PatientRecord* const>(ptrs), min_count);
}

struct SparseFeatureVector {
  std::size_t dimension = 0;
  std::vector<std::size_t> active;  // strictly increasing

  bool operator==(const SparseFeatureVector&) const = default;
};

inline SparseFeatureVector encode_structured(const PatientRecord& rec, const Vocabulary& vocab) {
  if (vocab.empty()) throw ValidationError("encode_structured: empty vocabulary");
  SparseFeatureVector v{vocab.size(), {}};
  for (const auto& k : feature_keys(rec))
    if (auto i = vocab.find(k)) v.active.push_back(*i);
  std::sort(v.active.begin(), v.active.end());
  return v;
}

template <typename T>
void write_one_hot(const SparseFeatureVector& v, Eigen::Ref<Eigen::Matrix<T, 1, Eigen::Dynamic>> row) {
  row.setZero();
  for (auto i : v.active) row(static_cast<Eigen::Index>(i)) = T(1);
}

// ---------------------------------------------------------------------------
// Note extraction

// Split on '.', '!', '?' and newlines; each sentence is whitespace-collapsed
// and trimmed, empty sentences are dropped.
inline std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    std::string s;
    bool space = false;
    for (char ch : current) {
      if (std::isspace(static_cast<unsigned char>(ch))) {
        space = !s.empty();
        continue;
      }
      if (space) s.push_back(' ');
      space = false;
      s.push_back(ch);
    }
    if (!s.empty()) out.push_back(std::move(s));
    current.clear();
  };
  for (char ch : text) {
    if (ch == '.' || ch == '!' || ch == '?' || ch == '\n') flush();
    else current.push_back(ch);
  }
  flush();
  return out;
}

struct ExtractedSentence {
  std::string note_id;
  std::size_t sentence_index = 0;
  std::string text;

  bool operator==(const ExtractedSentence&) const = default;
};

struct ExtractedNote {
  std::vector<ExtractedSentence> sentences;  // note order, then sentence order
  std::size_t span_count = 0;                // merged keyword windows
  bool fallback = false;                     // no keyword matched anywhere

  std::vector<std::string> texts() const {
    std::vector<std::string> t;
    for (const auto& s : sentences) t.push_back(s.text);
    return t;
  }
};

struct ExtractionOptions {
  int window = 1;
  int fallback_sentences = 10;
};

// Select every sentence containing a keyword plus `window` neighbours on each
// side within its note; overlapping windows merge. With no match anywhere,
// the first `fallback_sentences` sentences of the longest note are returned.
inline ExtractedNote extract_note(const std::vector<NoteDocument>& notes, const std::vector<std::string>& keywords,
                                  const ExtractionOptions& opt = {}) {
  if (keywords.empty()) throw ValidationError("extract_note: empty keyword list");
  if (opt.window < 0) throw ValidationError("extract_note: window must be >= 0");
  std::vector<std::string> kws;
  for (const auto& k : keywords)
    if (auto n = normalize_text(k); !n.empty()) kws.push_back(std::move(n));
  if (kws.empty()) throw ValidationError("extract_note: empty keyword list");

  ExtractedNote out;
  std::vector<std::vector<std::string>> split;
  split.reserve(notes.size());
  for (const auto& note : notes) split.push_back(split_sentences(note.text));

  const auto w = static_cast<std::size_t>(opt.window);
  for (std::size_t n = 0; n < notes.size(); ++n) {
    const auto& sents = split[n];
    std::vector<char> keep(sents.size(), 0);
    bool any = false;
    for (std::size_t i = 0; i < sents.size(); ++i) {
      const auto norm = normalize_text(sents[i]);
      const bool hit = std::any_of(kws.begin(), kws.end(), [&](const auto& k) { return norm.find(k) != std::string::npos; });
      if (!hit) continue;
      any = true;
      const std::size_t lo = i >= w ? i - w : 0;
      const std::size_t hi = std::min(sents.size() - 1, i + w);
      for (std::size_t j = lo; j <= hi; ++j) keep[j] = 1;
    }
    if (!any) continue;
    for (std::size_t i = 0; i < sents.size(); ++i) {
      if (!keep[i]) continue;
      if (i == 0 || !keep[i - 1]) ++out.span_count;
      out.sentences.push_back({notes[n].note_id, i, sents[i]});
    }
  }
  if (!out.sentences.empty()) return out;

  out.fallback = true;
  std::size_t longest = notes.size();
  std::size_t best_len = 0;
  for (std::size_t n = 0; n < notes.size(); ++n) {
    if (longest == notes.size() || notes[n].text.size() > best_len) {
      longest = n;
      best_len = notes[n].text.size();
    }
  }
  if (longest == notes.size()) return out;
  const auto& sents = split[longest];
  const auto take = std::min(sents.size(), static_cast<std::size_t>(std::max(0, opt.fallback_sentences)));
  for (std::size_t i = 0; i < take; ++i) out.sentences.push_back({notes[longest].note_id, i, sents[i]});
  if (take > 0) out.span_count = 1;
  return out;
}

// ---------------------------------------------------------------------------
// Tokens and chunks

struct TokenChunks {
  std::vector<std::vector<std::string>> chunks;

  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& c : chunks) n += c.size();
    return n;
  }
};

struct ChunkOptions {
  int chunk_size = 512;
  int max_chunks = 90;
};

inline TokenChunks tokenize_and_chunk(const ExtractedNote& extracted, const ChunkOptions& opt = {}) {
  if (opt.chunk_size < 1 || opt.max_chunks < 1) throw ValidationError("tokenize_and_chunk: sizes must be >= 1");
  const auto size = static_cast<std::size_t>(opt.chunk_size);
  const auto limit = size * static_cast<std::size_t>(opt.max_chunks);
  TokenChunks out;
  std::vector<std::string> current;
  std::size_t total = 0;
  for (const auto& s : extracted.sentences) {
    const auto norm = normalize_text(s.text);
    std::size_t pos = 0;
    while (pos < norm.size() && total < limit) {
      auto end = norm.find(' ', pos);
      if (end == std::string::npos) end = norm.size();
      current.push_back(norm.substr(pos, end - pos));
      ++total;
      if (current.size() == size) out.chunks.push_back(std::move(current)), current.clear();
      pos = end + 1;
    }
  }
  if (!current.empty() || out.chunks.empty()) out.chunks.push_back(std::move(current));
  return out;
}

struct TextPipelineOptions {
  ExtractionOptions extraction;
  ChunkOptions chunking;
};

inline TokenChunks note_chunks(const PatientRecord& rec, const std::vector<std::string>& keywords,
                               const TextPipelineOptions& opt) {
  return tokenize_and_chunk(extract_note(rec.notes, keywords, opt.extraction), opt.chunking);
}

// Token vocabulary of the built-in encoder. Out-of-vocabulary tokens are
// dropped at lookup time.
class TokenVocabulary {
 public:
  TokenVocabulary() = default;
  explicit TokenVocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      if (!index_.emplace(tokens_[i], static_cast<std::uint32_t>(i)).second)
        throw ValidationError("token vocabulary: duplicate token " + tokens_[i]);
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::uint64_t hash() const { return hash_strings(tokens_); }

  std::optional<std::uint32_t> find(const std::string& tok) const {
    auto it = index_.find(tok);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  nn::TokenSample ids(const TokenChunks& chunks) const {
    nn::TokenSample out;
    out.reserve(chunks.chunks.size());
    for (const auto& c : chunks.chunks) {
      std::vector<std::uint32_t> row;
      row.reserve(c.size());
      for (const auto& t : c)
        if (auto i = find(t)) row.push_back(*i);
      out.push_back(std::move(row));
    }
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

inline TokenVocabulary build_token_vocabulary(std::span<const TokenChunks> docs, int min_count = 1) {
  std::map<std::string, int> counts;
  for (const auto& d : docs)
    for (const auto& c : d.chunks)
      for (const auto& t : c) ++counts[t];
  std::vector<std::string> toks;
  for (const auto& [t, c] : counts)
    if (c >= min_count) toks.push_back(t);
  if (toks.empty()) toks.push_back("<empty>");
  return TokenVocabulary(std::move(toks));
}

// ---------------------------------------------------------------------------
// Chunk embeddings

using ChunkEmbeddings = Tensor2D<float>;  // N x d, row i embeds chunk i

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual std::size_t dim() const = 0;
  virtual ChunkEmbeddings embed(const TokenChunks& chunks, std::string_view patient_id) const = 0;
};

// Mean of per-token vectors over each chunk; empty chunk -> zero row.
class MeanPoolEncoder final : public TextEncoder {
 public:
  MeanPoolEncoder(TokenVocabulary vocab, Tensor2D<float> table) : vocab_(std::move(vocab)), table_(std::move(table)) {
    if (static_cast<std::size_t>(table_.rows()) != vocab_.size() || table_.cols() == 0)
      throw ValidationError("MeanPoolEncoder: table shape does not match vocabulary");
  }

  std::size_t dim() const override { return static_cast<std::size_t>(table_.cols()); }
  const TokenVocabulary& vocabulary() const { return vocab_; }
  const Tensor2D<float>& table() const { return table_; }

  ChunkEmbeddings embed(const TokenChunks& chunks, std::string_view) const override {
    ChunkEmbeddings out = ChunkEmbeddings::Zero(static_cast<Eigen::Index>(chunks.chunks.size()), table_.cols());
    const auto ids = vocab_.ids(chunks);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i].empty()) continue;
      for (auto t : ids[i]) out.row(static_cast<Eigen::Index>(i)) += table_.row(t);
      out.row(static_cast<Eigen::Index>(i)) /= static_cast<float>(ids[i].size());
    }
    return out;
  }

 private:
  TokenVocabulary vocab_;
  Tensor2D<float> table_;
};

// Precomputed embedding file, little-endian:
//   "PHEB" | version u32 | d u32 | row_count u64
//   repeated: key_len u16 | key bytes ("patient_id#chunk_idx") | float32[d]
inline constexpr std::uint32_t kEmbeddingFileVersion = 1;

inline std::string embedding_key(std::string_view patient_id, std::size_t chunk) {
  return std::string(patient_id) + "#" + std::to_string(chunk);
}

inline void write_embedding_file(const std::string& path, std::size_t d,
                                 const std::vector<std::pair<std::string, std::vector<float>>>& rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write embedding file " + path);
  io::write_magic(os, "PHEB");
  io::write_le<std::uint32_t>(os, kEmbeddingFileVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  io::write_le<std::uint64_t>(os, rows.size());
  for (const auto& [key, vec] : rows) {
    if (vec.size() != d) throw ValidationError("embedding row " + key + " has wrong width");
    if (key.size() > 0xFFFF) throw ValidationError("embedding key too long");
    io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(key.size()));
    os.write(key.data(), static_cast<std::streamsize>(key.size()));
    for (float f : vec) io::write_le<float>(os, f);
  }
}

class FileEmbeddingEncoder final : public TextEncoder {
 public:
  static FileEmbeddingEncoder load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open embedding file " + path);
    io::expect_magic(is, "PHEB");
    const auto version = io::read_le<std::uint32_t>(is, "version");
    if (version != kEmbeddingFileVersion) throw ValidationError("embedding file: unsupported version");
    FileEmbeddingEncoder enc;
    enc.path_ = path;
    enc.dim_ = io::read_le<std::uint32_t>(is, "d");
    if (enc.dim_ == 0) throw ValidationError("embedding file: d must be > 0");
    const auto rows = io::read_le<std::uint64_t>(is, "row_count");
    for (std::uint64_t r = 0; r < rows; ++r) {
      const auto len = io::read_le<std::uint16_t>(is, "key_len");
      std::string key(len, '\0');
      if (!is.read(key.data(), len)) throw ValidationError("embedding file: truncated key");
      std::vector<float> v(enc.dim_);
      if (!is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(sizeof(float) * v.size())))
        throw ValidationError("embedding file: truncated row " + key);
      for (float f : v)
        if (!std::isfinite(f)) throw ValidationError("embedding file: non-finite value in row " + key);
      enc.rows_[key] = std::move(v);
    }
    return enc;
  }

  std::size_t dim() const override { return dim_; }
  const std::string& path() const { return path_; }

  ChunkEmbeddings embed(const TokenChunks& chunks, std::string_view patient_id) const override {
    ChunkEmbeddings out(static_cast<Eigen::Index>(chunks.chunks.size()), static_cast<Eigen::Index>(dim_));
    for (std::size_t i = 0; i < chunks.chunks.size(); ++i) {
      const auto key = embedding_key(patient_id, i);
      auto it = rows_.find(key);
      if (it == rows_.end()) throw ValidationError("missing precomputed embedding for key " + key);
      out.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXf>(it->second.data(), static_cast<Eigen::Index>(dim_));
    }
    return out;
  }

 private:
  FileEmbeddingEncoder() = default;
  std::string path_;
  std::size_t dim_ = 0;
  std::unordered_map<std::string, std::vector<float>> rows_;
};

inline ChunkEmbeddings embed_chunks(const TokenChunks& chunks, const TextEncoder& encoder,
                                    std::string_view patient_id = {}) {
  if (encoder.dim() == 0) throw ValidationError("embed_chunks: encoder dimension must be > 0");
  return encoder.embed(chunks, patient_id);
}

}  // namespace pheme
