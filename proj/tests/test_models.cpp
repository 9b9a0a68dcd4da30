#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "pheme/cohort.hpp"
#include "pheme/metrics.hpp"
#include "pheme/models.hpp"
#include "pheme/nn/checkpoint.hpp"

using namespace pheme;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.structured_hidden = {32, 16};
  c.fusion_hidden = 16;
  c.n_filters = 8;
  c.embed_dim = 16;
  return c;
}

nn::TrainConfig quick_train(int epochs = 30, std::uint64_t seed = 3) {
  nn::TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 32;
  t.lr = 5e-3;
  t.seed = seed;
  return t;
}

struct Split {
  CohortDataset ds;
  std::vector<const PatientRecord*> train, test;
  std::vector<int> ytrain, ytest;

  std::span<const PatientRecord* const> train_span() const { return train; }
  std::span<const PatientRecord* const> test_span() const { return test; }
};

Split split(CohortDataset ds, double train_fraction = 0.7) {
  Split s;
  s.ds = std::move(ds);
  const auto cut = static_cast<std::size_t>(train_fraction * static_cast<double>(s.ds.size()));
  for (std::size_t i = 0; i < s.ds.size(); ++i) {
    (i < cut ? s.train : s.test).push_back(&s.ds.records[i]);
    (i < cut ? s.ytrain : s.ytest).push_back((*s.ds.labels)[i]);
  }
  return s;
}

SyntheticCohortSpec spec(int per_class, std::uint64_t seed) {
  SyntheticCohortSpec s;
  s.n_cases = per_class;
  s.n_controls = per_class;
  s.seed = seed;
  s.mean_note_sentences = 6;
  return s;
}

double auc_on(const TrainedModel& m, std::span<const PatientRecord* const> recs, const std::vector<int>& y) {
  return roc_auc(m.predict_proba(recs), y);
}

std::string checkpoint_bytes(const TrainedModel& m) {
  std::ostringstream os;
  nn::write_checkpoint(os, m.arch, m.params);
  return os.str();
}

}  // namespace

TEST(TrainStructured, SeparableCodesGiveHighTrainAuc) {
  auto s = split(generate_synthetic_cohort(spec(100, 1)), 1.0);
  const auto vocab = build_vocabulary(s.train_span());
  const auto m = train_structured(s.train_span(), s.ytrain, vocab, small_config(), quick_train());
  EXPECT_GT(auc_on(m, s.train_span(), s.ytrain), 0.99);
}

TEST(TrainStructured, SingleClassRejected) {
  auto s = split(generate_synthetic_cohort(spec(10, 1)), 1.0);
  const auto vocab = build_vocabulary(s.train_span());
  std::vector<int> ones(s.train.size(), 1);
  try {
    train_structured(s.train_span(), ones, vocab, small_config(), quick_train());
    FAIL() << "expected an error";
  } catch (const ValidationError& e) {
    EXPECT_STREQ(e.what(), "single-class training set");
  }
}

TEST(TrainStructured, SameSeedSameCheckpointBytes) {
  auto s = split(generate_synthetic_cohort(spec(40, 2)), 1.0);
  const auto vocab = build_vocabulary(s.train_span());
  const auto a = train_structured(s.train_span(), s.ytrain, vocab, small_config(), quick_train(5, 9));
  const auto b = train_structured(s.train_span(), s.ytrain, vocab, small_config(), quick_train(5, 9));
  const auto c = train_structured(s.train_span(), s.ytrain, vocab, small_config(), quick_train(5, 10));
  EXPECT_EQ(checkpoint_bytes(a), checkpoint_bytes(b));
  EXPECT_NE(checkpoint_bytes(a), checkpoint_bytes(c));
}

TEST(TrainText, PlantedKeywordSentencesGeneralise) {
  auto sp = spec(150, 4);
  sp.p_note_evidence_case = 1.0;
  auto s = split(generate_synthetic_cohort(sp));
  const auto m = train_text(s.train_span(), s.ytrain, sp.keywords, small_config(), quick_train(20));
  EXPECT_GT(auc_on(m, s.test_span(), s.ytest), 0.9);
}

TEST(TrainText, MissingPrecomputedEmbeddingPropagates) {
  auto sp = spec(10, 5);
  auto s = split(generate_synthetic_cohort(sp), 1.0);
  const auto path = (std::filesystem::temp_directory_path() / "pheme_models_partial.pheb").string();
  // Rows for every patient's first chunk except the last patient.
  std::vector<std::pair<std::string, std::vector<float>>> rows;
  for (std::size_t i = 0; i + 1 < s.train.size(); ++i) rows.push_back({embedding_key(s.train[i]->patient_id, 0), {0.1f, 0.2f}});
  write_embedding_file(path, 2, rows);
  auto cfg = small_config();
  cfg.embedding_file = path;
  try {
    train_text(s.train_span(), s.ytrain, sp.keywords, cfg, quick_train(1));
    FAIL() << "expected a missing-key error";
  } catch (const ValidationError& e) {
    EXPECT_EQ(std::string(e.what()), "missing precomputed embedding for key " + s.train.back()->patient_id + "#0");
  }
  std::filesystem::remove(path);
}

TEST(TrainText, FileEncoderTrains) {
  auto sp = spec(30, 6);
  sp.p_note_evidence_case = 1.0;
  auto s = split(generate_synthetic_cohort(sp), 1.0);
  const auto path = (std::filesystem::temp_directory_path() / "pheme_models_full.pheb").string();
  std::vector<std::pair<std::string, std::vector<float>>> rows;
  for (std::size_t i = 0; i < s.train.size(); ++i)
    rows.push_back({embedding_key(s.train[i]->patient_id, 0), {s.ytrain[i] ? 1.0f : -1.0f, 0.5f, 0.0f}});
  write_embedding_file(path, 3, rows);
  auto cfg = small_config();
  cfg.embedding_file = path;
  const auto m = train_text(s.train_span(), s.ytrain, sp.keywords, cfg, quick_train(30));
  EXPECT_GT(auc_on(m, s.train_span(), s.ytrain), 0.99);
  EXPECT_EQ(model_manifest(m)["encoder"], "file");
  std::filesystem::remove(path);
}

TEST(TrainText, SingleChunkConfigRuns) {
  auto sp = spec(30, 7);
  sp.p_note_evidence_case = 1.0;
  auto s = split(generate_synthetic_cohort(sp), 1.0);
  auto cfg = small_config();
  cfg.text.chunking.max_chunks = 1;
  cfg.text.chunking.chunk_size = 4;
  const auto m = train_text(s.train_span(), s.ytrain, sp.keywords, cfg, quick_train(3));
  for (const auto& v : m.encode(s.train_span()))
    for (const auto& sample : std::get<nn::TokenBatch>(v)) EXPECT_EQ(sample.size(), 1u);
  for (double p : m.predict_proba(s.train_span())) EXPECT_TRUE(p >= 0.0 && p <= 1.0);
}

TEST(TrainText, ChunkOrderMattersToTheConvolution) {
  // Negative control for the CNN: reversing chunk order changes the output
  // when chunks differ, because convolution windows span neighbours.
  ModelConfig cfg = small_config();
  cfg.kernel_widths = {2};
  const auto arch = text_architecture(6, cfg.embed_dim, cfg);
  const auto p = nn::init_params<double>(arch, 4);
  nn::TokenBatch fwd = {{{0, 1}, {2}, {3, 4}, {5}}};
  nn::TokenBatch rev = {{{5}, {3, 4}, {2}, {0, 1}}};
  const double a = nn::forward(arch, p, {nn::Value<double>(fwd)}).output()(0, 0);
  const double b = nn::forward(arch, p, {nn::Value<double>(rev)}).output()(0, 0);
  EXPECT_NE(a, b);
}

namespace {

struct ModalityAucs {
  double structured, text, fusion;
};

ModalityAucs modality_aucs(const SyntheticCohortSpec& sp, int epochs) {
  auto s = split(generate_synthetic_cohort(sp));
  const auto vocab = build_vocabulary(s.train_span());
  const auto cfg = small_config();
  const auto tc = quick_train(epochs);
  return {auc_on(train_structured(s.train_span(), s.ytrain, vocab, cfg, tc), s.test_span(), s.ytest),
          auc_on(train_text(s.train_span(), s.ytrain, sp.keywords, cfg, tc), s.test_span(), s.ytest),
          auc_on(train_fusion(s.train_span(), s.ytrain, vocab, sp.keywords, cfg, tc), s.test_span(), s.ytest)};
}

}  // namespace

TEST(TrainFusion, SplitEvidenceBeatsEachModality) {
  auto sp = spec(250, 8);
  sp.p_code_suppression = 0.5;
  sp.p_note_evidence_case = 0.0;
  const auto r = modality_aucs(sp, 20);
  EXPECT_GE(r.fusion - r.structured, 0.03) << r.fusion << " vs " << r.structured;
  EXPECT_GE(r.fusion - r.text, 0.03) << r.fusion << " vs " << r.text;
}

TEST(TrainFusion, CodeOnlyEvidenceMatchesStructured) {
  auto sp = spec(200, 9);
  sp.p_code_suppression = 0.0;
  sp.p_note_evidence_case = 0.0;
  const auto r = modality_aucs(sp, 20);
  EXPECT_LT(std::abs(r.fusion - r.structured), 0.05) << r.fusion << " vs " << r.structured;
}

TEST(TrainFusion, SameSeedSameMetrics) {
  auto sp = spec(60, 10);
  sp.p_code_suppression = 0.5;
  EXPECT_EQ(modality_aucs(sp, 3).fusion, modality_aucs(sp, 3).fusion);
}

TEST(TrainFusion, FusedWidthIsCheckedAtConstruction) {
  const ModelConfig defaults;
  const auto arch = fusion_architecture(10, 20, 8, defaults);
  EXPECT_EQ(arch.validate(), (std::vector<std::size_t>{128, 384}));
  EXPECT_EQ(arch.head[1].in_dim, 512u);
  auto bad = arch;
  bad.head[1] = nn::LayerSpec::dense(500, defaults.fusion_hidden);
  EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(PredictProba, RangeOovAndPlantedPositive) {
  auto s = split(generate_synthetic_cohort(spec(80, 11)), 1.0);
  const auto vocab = build_vocabulary(s.train_span());
  const auto m = train_structured(s.train_span(), s.ytrain, vocab, small_config(), quick_train(30));
  for (double p : m.predict_proba(s.train_span())) EXPECT_TRUE(p >= 0.0 && p <= 1.0);

  PatientRecord oov;
  oov.patient_id = "oov";
  oov.codes = {"ICD:UNSEEN1", "MED:UNSEEN2"};
  const double p_oov = m.predict_proba(oov);
  EXPECT_TRUE(std::isfinite(p_oov));
  EXPECT_GT(p_oov, 0.0);
  EXPECT_LT(p_oov, 1.0);

  PatientRecord planted;
  planted.patient_id = "planted";
  for (const auto& c : SyntheticCohortSpec{}.disease_pool()) planted.codes.insert(c);
  EXPECT_GT(m.predict_proba(planted), 0.9);
}

namespace {

// Records whose only feature is the presence of ICD:a.
Split one_feature(const std::vector<std::pair<bool, int>>& rows) {
  CohortDataset ds;
  ds.labels = std::vector<int>();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    PatientRecord r;
    r.patient_id = "r" + std::to_string(i);
    if (rows[i].first) r.codes = {"ICD:a"};
    ds.records.push_back(r);
    ds.labels->push_back(rows[i].second);
  }
  return split(std::move(ds), 1.0);
}

}  // namespace

TEST(Logistic, WeightSignFollowsSeparation) {
  auto s = one_feature({{true, 1}, {true, 1}, {false, 0}, {false, 0}, {true, 1}, {false, 0}});
  const auto vocab = build_vocabulary(s.train_span());
  auto m = train_logistic_baseline(s.train_span(), s.ytrain, vocab, small_config(), quick_train(200));
  EXPECT_GT(m.params.layers[0][0](0, 0), 0.0f);
  auto flipped = one_feature({{true, 0}, {true, 0}, {false, 1}, {false, 1}, {true, 0}, {false, 1}});
  m = train_logistic_baseline(flipped.train_span(), flipped.ytrain, vocab, small_config(), quick_train(200));
  EXPECT_LT(m.params.layers[0][0](0, 0), 0.0f);
}

TEST(Logistic, WeightsShrinkMonotonicallyWithL2) {
  auto s = one_feature({{true, 1}, {true, 1}, {true, 0}, {false, 0}, {false, 0}, {false, 1}, {true, 1}, {false, 0}});
  const auto vocab = build_vocabulary(s.train_span());
  double previous = INFINITY;
  for (double l2 : {0.0, 0.01, 0.1, 1.0, 10.0}) {
    auto cfg = small_config();
    cfg.l2 = l2;
    auto tc = quick_train(3000);
    tc.batch_size = 8;
    tc.lr = 1e-2;
    const auto m = train_logistic_baseline(s.train_span(), s.ytrain, vocab, cfg, tc);
    const double w = std::abs(static_cast<double>(m.params.layers[0][0](0, 0)));
    EXPECT_LT(w, previous) << "l2=" << l2;
    previous = w;
  }
}

TEST(Logistic, TwoPointClosedForm) {
  // x=1 -> y=1, x=0 -> y=0 with objective mean BCE + (l2/2) w^2. Stationarity
  // gives b = -w/2 and sigmoid(-w/2) = 2 * l2 * w; solve by bisection.
  const double l2 = 0.1;
  double lo = 0.0, hi = 10.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (1.0 / (1.0 + std::exp(mid / 2.0)) > 2.0 * l2 * mid ? lo : hi) = mid;
  }
  const double w_star = 0.5 * (lo + hi);

  auto s = one_feature({{true, 1}, {false, 0}});
  const auto vocab = build_vocabulary(s.train_span());
  auto cfg = small_config();
  cfg.l2 = l2;
  nn::TrainConfig tc{20000, 2, 1e-3, 1};
  const auto m = train_logistic_baseline(s.train_span(), s.ytrain, vocab, cfg, tc);
  EXPECT_NEAR(m.params.layers[0][0](0, 0), w_star, 1e-3);
  EXPECT_NEAR(m.params.layers[0][1](0, 0), -w_star / 2.0, 1e-3);
}

TEST(ModelIo, SaveLoadPredictsIdentically) {
  auto sp = spec(40, 12);
  sp.p_note_evidence_case = 0.8;
  auto s = split(generate_synthetic_cohort(sp), 1.0);
  const auto vocab = build_vocabulary(s.train_span());
  const auto m = train_fusion(s.train_span(), s.ytrain, vocab, sp.keywords, small_config(), quick_train(2));
  const auto dir = std::filesystem::temp_directory_path() / "pheme_model_io";
  std::filesystem::remove_all(dir);
  save_model(m, dir, "fusion");
  const auto back = load_model(dir, "fusion");
  EXPECT_EQ(back.kind, ModelKind::fusion);
  EXPECT_EQ(back.vocab.keys(), m.vocab.keys());
  EXPECT_EQ(back.tokens.tokens(), m.tokens.tokens());
  EXPECT_EQ(back.predict_proba(s.train_span()), m.predict_proba(s.train_span()));
  EXPECT_EQ(checkpoint_bytes(back), checkpoint_bytes(m));

  // A manifest whose vocabulary was edited no longer matches its hash.
  std::ifstream is(dir / "fusion.json");
  auto j = json::parse(is);
  is.close();
  j["vocabulary"]["keys"].push_back("ICD:zzz");
  std::ofstream(dir / "fusion.json") << j.dump();
  EXPECT_THROW(load_model(dir, "fusion"), ValidationError);
  std::filesystem::remove_all(dir);
}

TEST(ModelIo, TextEncoderExposesTrainedTable) {
  auto sp = spec(20, 13);
  sp.p_note_evidence_case = 1.0;
  auto s = split(generate_synthetic_cohort(sp), 1.0);
  const auto m = train_text(s.train_span(), s.ytrain, sp.keywords, small_config(), quick_train(2));
  const auto enc = m.text_encoder();
  EXPECT_EQ(enc.dim(), small_config().embed_dim);
  EXPECT_EQ(enc.vocabulary().tokens(), m.tokens.tokens());
}

TEST(ModelKind, ParseRoundTrip) {
  for (auto k : {ModelKind::structured, ModelKind::text, ModelKind::fusion, ModelKind::logistic})
    EXPECT_EQ(parse_model_kind(to_string(k)), k);
  EXPECT_THROW(parse_model_kind("bert"), ValidationError);
}
