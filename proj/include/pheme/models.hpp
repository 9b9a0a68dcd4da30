#pragma once

// The ensemble members: structured-EHR MLP, clinical-notes TextCNN,
// multi-modal fusion network, and a logistic-regression baseline.

#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pheme/cohort.hpp"
#include "pheme/core.hpp"
#include "pheme/nn/checkpoint.hpp"
#include "pheme/nn/network.hpp"
#include "pheme/nn/optim.hpp"
#include "pheme/preprocess.hpp"

namespace pheme {

enum class ModelKind { structured, text, fusion, logistic };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::structured: return "structured";
    case ModelKind::text: return "text";
    case ModelKind::fusion: return "fusion";
    case ModelKind::logistic: return "logistic";
  }
  return "?";
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "structured") return ModelKind::structured;
  if (s == "text") return ModelKind::text;
  if (s == "fusion") return ModelKind::fusion;
  if (s == "logistic") return ModelKind::logistic;
  throw ValidationError("unknown model kind '" + s + "' (expected structured, text, fusion or logistic)");
}

inline bool uses_structured(ModelKind k) { return k != ModelKind::text; }
inline bool uses_text(ModelKind k) { return k == ModelKind::text || k == ModelKind::fusion; }

// Layer widths are not fixed by the method; these defaults give a 128-wide
// structured representation and a 3 x 128 = 384-wide text representation.
struct ModelConfig {
  std::vector<std::size_t> structured_hidden = {256, 128};
  std::size_t fusion_hidden = 128;
  std::vector<std::size_t> kernel_widths = {3, 4, 5};
  std::size_t n_filters = 128;
  std::size_t embed_dim = 768;
  TextPipelineOptions text;
  int vocab_min_count = 1;
  int token_min_count = 1;
  double l2 = 1e-4;             // logistic baseline only
  std::string embedding_file;   // empty: built-in trainable encoder

  void validate() const {
    if (structured_hidden.empty()) throw ValidationError("model config: structured_hidden must be non-empty");
    if (kernel_widths.empty() || n_filters == 0 || embed_dim == 0 || fusion_hidden == 0)
      throw ValidationError("model config: text/fusion sizes must be non-zero");
    if (l2 < 0) throw ValidationError("model config: l2 must be >= 0");
  }
};

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"structured_hidden", c.structured_hidden},
           {"fusion_hidden", c.fusion_hidden},
           {"kernel_widths", c.kernel_widths},
           {"n_filters", c.n_filters},
           {"embed_dim", c.embed_dim},
           {"window", c.text.extraction.window},
           {"fallback_sentences", c.text.extraction.fallback_sentences},
           {"chunk_size", c.text.chunking.chunk_size},
           {"max_chunks", c.text.chunking.max_chunks},
           {"vocab_min_count", c.vocab_min_count},
           {"token_min_count", c.token_min_count},
           {"l2", c.l2},
           {"embedding_file", c.embedding_file}};
}

inline void from_json(const json& j, ModelConfig& c) {
  c = ModelConfig{};
  c.structured_hidden = j.value("structured_hidden", c.structured_hidden);
  c.fusion_hidden = j.value("fusion_hidden", c.fusion_hidden);
  c.kernel_widths = j.value("kernel_widths", c.kernel_widths);
  c.n_filters = j.value("n_filters", c.n_filters);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.text.extraction.window = j.value("window", c.text.extraction.window);
  c.text.extraction.fallback_sentences = j.value("fallback_sentences", c.text.extraction.fallback_sentences);
  c.text.chunking.chunk_size = j.value("chunk_size", c.text.chunking.chunk_size);
  c.text.chunking.max_chunks = j.value("max_chunks", c.text.chunking.max_chunks);
  c.vocab_min_count = j.value("vocab_min_count", c.vocab_min_count);
  c.token_min_count = j.value("token_min_count", c.token_min_count);
  c.l2 = j.value("l2", c.l2);
  c.embedding_file = j.value("embedding_file", c.embedding_file);
}

namespace nn {
inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr}, {"seed", c.seed}};
}
inline void from_json(const json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
}
}  // namespace nn

// ---------------------------------------------------------------------------
// Architectures

inline std::vector<nn::LayerSpec> structured_trunk(std::size_t input_dim, const ModelConfig& cfg) {
  std::vector<nn::LayerSpec> layers;
  std::size_t in = input_dim;
  for (auto h : cfg.structured_hidden) {
    layers.push_back(nn::LayerSpec::dense(in, h));
    layers.push_back(nn::LayerSpec::relu());
    in = h;
  }
  return layers;
}

// `token_vocab` = 0 selects precomputed chunk embeddings of width `embed_dim`.
inline std::vector<nn::LayerSpec> text_trunk(std::size_t token_vocab, std::size_t embed_dim, const ModelConfig& cfg) {
  std::vector<nn::LayerSpec> layers;
  if (token_vocab > 0) layers.push_back(nn::LayerSpec::embed_mean(token_vocab, embed_dim));
  layers.push_back(nn::LayerSpec::conv1d(embed_dim, cfg.kernel_widths, cfg.n_filters));
  layers.push_back(nn::LayerSpec::relu());
  layers.push_back(nn::LayerSpec::max_over_time());
  return layers;
}

inline nn::Architecture structured_architecture(std::size_t input_dim, const ModelConfig& cfg) {
  const auto width = cfg.structured_hidden.back();
  return {{structured_trunk(input_dim, cfg)},
          {nn::LayerSpec::concat_input(), nn::LayerSpec::dense(width, 1), nn::LayerSpec::sigmoid()}};
}

inline nn::Architecture text_architecture(std::size_t token_vocab, std::size_t embed_dim, const ModelConfig& cfg) {
  const auto width = cfg.n_filters * cfg.kernel_widths.size();
  return {{text_trunk(token_vocab, embed_dim, cfg)},
          {nn::LayerSpec::concat_input(), nn::LayerSpec::dense(width, 1), nn::LayerSpec::sigmoid()}};
}

inline nn::Architecture fusion_architecture(std::size_t input_dim, std::size_t token_vocab, std::size_t embed_dim,
                                            const ModelConfig& cfg) {
  const auto fused = cfg.structured_hidden.back() + cfg.n_filters * cfg.kernel_widths.size();
  nn::Architecture arch{{structured_trunk(input_dim, cfg), text_trunk(token_vocab, embed_dim, cfg)},
                        {nn::LayerSpec::concat_input(), nn::LayerSpec::dense(fused, cfg.fusion_hidden),
                         nn::LayerSpec::relu(), nn::LayerSpec::dense(cfg.fusion_hidden, 1), nn::LayerSpec::sigmoid()}};
  const auto widths = arch.validate();
  if (widths[0] + widths[1] != fused) throw ValidationError("fusion: concatenated width mismatch");
  return arch;
}

inline nn::Architecture logistic_architecture(std::size_t input_dim) {
  return {{{nn::LayerSpec::dense(input_dim, 1)}}, {nn::LayerSpec::concat_input(), nn::LayerSpec::sigmoid()}};
}

// ---------------------------------------------------------------------------
// Trained model

struct TrainedModel {
  ModelKind kind = ModelKind::structured;
  nn::Architecture arch;
  nn::Parameters<float> params;
  Vocabulary vocab;
  TokenVocabulary tokens;
  std::vector<std::string> keywords;
  ModelConfig config;
  nn::TrainConfig train;
  std::shared_ptr<const FileEmbeddingEncoder> file_encoder;
  nn::TrainHistory history;

  bool builtin_encoder() const { return uses_text(kind) && !file_encoder; }

  std::vector<nn::Value<float>> encode(std::span<const PatientRecord* const> records) const {
    std::vector<nn::Value<float>> inputs;
    if (uses_structured(kind)) {
      Tensor2D<float> x = Tensor2D<float>::Zero(static_cast<Eigen::Index>(records.size()),
                                                static_cast<Eigen::Index>(vocab.size()));
      for (std::size_t i = 0; i < records.size(); ++i)
        for (auto k : encode_structured(*records[i], vocab).active) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = 1.0f;
      inputs.emplace_back(std::move(x));
    }
    if (uses_text(kind)) {
      if (file_encoder) {
        nn::Sequences<float> seqs;
        for (const auto* r : records)
          seqs.push_back(embed_chunks(note_chunks(*r, keywords, config.text), *file_encoder, r->patient_id));
        inputs.emplace_back(std::move(seqs));
      } else {
        nn::TokenBatch batch;
        for (const auto* r : records) batch.push_back(tokens.ids(note_chunks(*r, keywords, config.text)));
        inputs.emplace_back(std::move(batch));
      }
    }
    return inputs;
  }

  std::vector<double> predict_proba(std::span<const PatientRecord* const> records) const {
    std::vector<double> out;
    out.reserve(records.size());
    constexpr std::size_t kBatch = 256;
    for (std::size_t start = 0; start < records.size(); start += kBatch) {
      const auto part = records.subspan(start, std::min(kBatch, records.size() - start));
      const auto tr = nn::forward(arch, params, encode(part));
      for (Eigen::Index i = 0; i < tr.output().rows(); ++i) out.push_back(static_cast<double>(tr.output()(i, 0)));
    }
    return out;
  }

  std::vector<double> predict_proba(const std::vector<PatientRecord>& records) const {
    std::vector<const PatientRecord*> ptrs;
    for (const auto& r : records) ptrs.push_back(&r);
    return predict_proba(std::span<const PatientRecord* const>(ptrs));
  }

  double predict_proba(const PatientRecord& record) const {
    const PatientRecord* p = &record;
    return predict_proba(std::span<const PatientRecord* const>(&p, 1)).front();
  }

  // The trained token table as a standalone encoder (built-in encoder only).
  MeanPoolEncoder text_encoder() const {
    if (!builtin_encoder()) throw ValidationError("model has no built-in text encoder");
    const std::size_t text_branch = kind == ModelKind::fusion ? 1 : 0;
    return MeanPoolEncoder(tokens, params.layers[arch.branch_offset(text_branch)][0]);
  }
};

inline int hard_label(double probability) { return probability >= 0.5 ? 1 : 0; }

namespace detail {

inline void check_training_labels(std::size_t n, std::span<const int> labels) {
  if (n == 0) throw ValidationError("empty training set");
  if (labels.size() != n) throw ValidationError("training labels and records differ in length");
  bool pos = false, neg = false;
  for (int y : labels) {
    if (y != 0 && y != 1) throw ValidationError("training labels must be 0 or 1");
    (y == 1 ? pos : neg) = true;
  }
  if (!pos || !neg) throw ValidationError("single-class training set");
}

inline TrainedModel fit(TrainedModel model, std::span<const PatientRecord* const> records, std::span<const int> labels,
                        double l2) {
  model.config.validate();
  auto inputs = model.encode(records);
  std::vector<float> y(labels.begin(), labels.end());
  model.params = nn::init_params<float>(model.arch, derive_seed(model.train.seed, 1));
  model.history = nn::train_network(model.arch, model.params, inputs, std::span<const float>(y), model.train, l2);
  return model;
}

inline TokenVocabulary fold_token_vocabulary(std::span<const PatientRecord* const> records,
                                             const std::vector<std::string>& keywords, const ModelConfig& cfg) {
  std::vector<TokenChunks> docs;
  docs.reserve(records.size());
  for (const auto* r : records) docs.push_back(note_chunks(*r, keywords, cfg.text));
  return build_token_vocabulary(std::span<const TokenChunks>(docs), cfg.token_min_count);
}

inline void attach_text_encoder(TrainedModel& m, std::span<const PatientRecord* const> records) {
  if (!m.config.embedding_file.empty()) {
    m.file_encoder = std::make_shared<const FileEmbeddingEncoder>(FileEmbeddingEncoder::load(m.config.embedding_file));
  } else {
    m.tokens = fold_token_vocabulary(records, m.keywords, m.config);
  }
}

inline std::size_t text_input_dim(const TrainedModel& m) {
  return m.file_encoder ? m.file_encoder->dim() : m.config.embed_dim;
}

inline std::size_t text_token_vocab(const TrainedModel& m) { return m.file_encoder ? 0 : m.tokens.size(); }

}  // namespace detail

inline TrainedModel train_structured(std::span<const PatientRecord* const> records, std::span<const int> labels,
                                     const Vocabulary& vocab, const ModelConfig& cfg, const nn::TrainConfig& train) {
  detail::check_training_labels(records.size(), labels);
  if (vocab.empty()) throw ValidationError("train_structured: empty vocabulary");
  TrainedModel m;
  m.kind = ModelKind::structured;
  m.vocab = vocab;
  m.config = cfg;
  m.train = train;
  m.arch = structured_architecture(vocab.size(), cfg);
  return detail::fit(std::move(m), records, labels, 0.0);
}

inline TrainedModel train_text(std::span<const PatientRecord* const> records, std::span<const int> labels,
                               const std::vector<std::string>& keywords, const ModelConfig& cfg,
                               const nn::TrainConfig& train) {
  detail::check_training_labels(records.size(), labels);
  if (keywords.empty()) throw ValidationError("train_text: keywords must be non-empty");
  TrainedModel m;
  m.kind = ModelKind::text;
  m.keywords = keywords;
  m.config = cfg;
  m.train = train;
  detail::attach_text_encoder(m, records);
  m.arch = text_architecture(detail::text_token_vocab(m), detail::text_input_dim(m), cfg);
  return detail::fit(std::move(m), records, labels, 0.0);
}

// Both trunks and the fusion head are trained jointly from scratch.
inline TrainedModel train_fusion(std::span<const PatientRecord* const> records, std::span<const int> labels,
                                 const Vocabulary& vocab, const std::vector<std::string>& keywords,
                                 const ModelConfig& cfg, const nn::TrainConfig& train) {
  detail::check_training_labels(records.size(), labels);
  if (vocab.empty()) throw ValidationError("train_fusion: empty vocabulary");
  if (keywords.empty()) throw ValidationError("train_fusion: keywords must be non-empty");
  TrainedModel m;
  m.kind = ModelKind::fusion;
  m.vocab = vocab;
  m.keywords = keywords;
  m.config = cfg;
  m.train = train;
  detail::attach_text_encoder(m, records);
  m.arch = fusion_architecture(vocab.size(), detail::text_token_vocab(m), detail::text_input_dim(m), cfg);
  return detail::fit(std::move(m), records, labels, 0.0);
}

inline TrainedModel train_logistic_baseline(std::span<const PatientRecord* const> records, std::span<const int> labels,
                                            const Vocabulary& vocab, const ModelConfig& cfg,
                                            const nn::TrainConfig& train) {
  detail::check_training_labels(records.size(), labels);
  if (vocab.empty()) throw ValidationError("train_logistic_baseline: empty vocabulary");
  TrainedModel m;
  m.kind = ModelKind::logistic;
  m.vocab = vocab;
  m.config = cfg;
  m.train = train;
  m.arch = logistic_architecture(vocab.size());
  return detail::fit(std::move(m), records, labels, cfg.l2);
}

inline TrainedModel train_model(ModelKind kind, std::span<const PatientRecord* const> records,
                                std::span<const int> labels, const Vocabulary& vocab,
                                const std::vector<std::string>& keywords, const ModelConfig& cfg,
                                const nn::TrainConfig& train) {
  switch (kind) {
    case ModelKind::structured: return train_structured(records, labels, vocab, cfg, train);
    case ModelKind::text: return train_text(records, labels, keywords, cfg, train);
    case ModelKind::fusion: return train_fusion(records, labels, vocab, keywords, cfg, train);
    case ModelKind::logistic: return train_logistic_baseline(records, labels, vocab, cfg, train);
  }
  throw std::logic_error("unknown model kind");
}

// ---------------------------------------------------------------------------
// Checkpoint + manifest sidecar

inline json model_manifest(const TrainedModel& m) {
  json j;
  j["format"] = "pheme-model";
  j["version"] = 1;
  j["kind"] = to_string(m.kind);
  j["seed"] = m.train.seed;
  j["train"] = m.train;
  j["config"] = m.config;
  j["vocabulary"] = {{"hash", hex64(m.vocab.hash())}, {"keys", m.vocab.keys()}};
  j["keywords"] = {{"hash", hex64(hash_strings(m.keywords))}, {"list", m.keywords}};
  j["encoder"] = uses_text(m.kind) ? (m.file_encoder ? "file" : "builtin") : "none";
  if (m.builtin_encoder()) j["tokens"] = {{"hash", hex64(m.tokens.hash())}, {"list", m.tokens.tokens()}};
  if (m.file_encoder) j["embedding_file"] = m.file_encoder->path();
  j["final_train_loss"] = m.history.epoch_loss.empty() ? 0.0 : m.history.epoch_loss.back();
  return j;
}

inline void save_model(const TrainedModel& m, const std::filesystem::path& dir, const std::string& name) {
  std::filesystem::create_directories(dir);
  nn::save_checkpoint((dir / (name + ".phew")).string(), m.arch, m.params);
  std::ofstream os(dir / (name + ".json"));
  if (!os) throw std::runtime_error("cannot write manifest for " + name);
  os << model_manifest(m).dump(2) << '\n';
}

inline TrainedModel load_model(const std::filesystem::path& dir, const std::string& name) {
  std::ifstream is(dir / (name + ".json"));
  if (!is) throw ValidationError("cannot open manifest " + (dir / (name + ".json")).string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ValidationError("bad manifest for " + name + ": " + e.what());
  }
  if (j.value("format", "") != "pheme-model") throw ValidationError("not a model manifest: " + name);
  TrainedModel m;
  m.kind = parse_model_kind(j.at("kind").get<std::string>());
  m.train = j.at("train").get<nn::TrainConfig>();
  m.config = j.at("config").get<ModelConfig>();
  m.vocab = Vocabulary(j.at("vocabulary").at("keys").get<std::vector<std::string>>());
  if (hex64(m.vocab.hash()) != j["vocabulary"]["hash"].get<std::string>())
    throw ValidationError("manifest vocabulary hash mismatch for " + name);
  m.keywords = j.at("keywords").at("list").get<std::vector<std::string>>();
  const auto encoder = j.value("encoder", "none");
  if (encoder == "builtin") m.tokens = TokenVocabulary(j.at("tokens").at("list").get<std::vector<std::string>>());
  if (encoder == "file")
    m.file_encoder = std::make_shared<const FileEmbeddingEncoder>(
        FileEmbeddingEncoder::load(j.at("embedding_file").get<std::string>()));
  auto [arch, params] = nn::load_checkpoint((dir / (name + ".phew")).string());
  m.arch = std::move(arch);
  m.params = std::move(params);
  return m;
}

}  // namespace pheme
