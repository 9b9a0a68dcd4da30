#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "pheme/cohort.hpp"

using namespace pheme;

namespace {

std::string record_line(const std::string& id, const std::string& extra = "") {
  return R"({"patient_id":")" + id +
         R"(","demographics":{"sex":"F"},"codes":["ICD:I50"],"labs":[{"test_code":"BNP","abnormal":true}],)"
         R"("notes":[{"note_id":"n1","text":"Stable."}])" +
         extra + "}";
}

bool mentions(const std::string& text, const std::string& needle) { return text.find(needle) != std::string::npos; }

std::string error_of(const std::string& content) {
  std::istringstream in(content);
  try {
    parse_cohort(in, "hf");
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(LoadCohort, ThreeValidLines) {
  std::istringstream in(record_line("p1") + "\n" + record_line("p2") + "\n" + record_line("p3") + "\n");
  const auto ds = parse_cohort(in, "hf");
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.records[1].patient_id, "p2");
  EXPECT_EQ(ds.records[0].labs[0].test_code, "BNP");
  EXPECT_FALSE(ds.labeled());
  EXPECT_EQ(ds.disease_name, "hf");
}

TEST(LoadCohort, DuplicateIdNamesLine) {
  const auto err = error_of(record_line("p1") + "\n" + record_line("p2") + "\n" + record_line("p1") + "\n");
  EXPECT_EQ(err, "duplicate patient_id p1 at line 3");
}

TEST(LoadCohort, EmptyFile) {
  std::istringstream in("");
  const auto ds = parse_cohort(in, "hf");
  EXPECT_EQ(ds.size(), 0u);
  EXPECT_FALSE(ds.labeled());
}

TEST(LoadCohort, MalformedLinesNameLineAndField) {
  auto err = error_of(record_line("p1") + "\n{\"patient_id\":\"p2\",\"demographics\":{},\"labs\":[],\"notes\":[]}\n");
  EXPECT_TRUE(mentions(err, "line 2")) << err;
  EXPECT_TRUE(mentions(err, "'codes'")) << err;

  err = error_of(R"({"patient_id":"p1","demographics":{},"codes":["I50"],"labs":[],"notes":[]})");
  EXPECT_TRUE(mentions(err, "namespace")) << err;

  err = error_of(R"({"patient_id":"p1","demographics":{},"codes":[],"labs":[{"test_code":"","abnormal":true}],"notes":[]})");
  EXPECT_TRUE(mentions(err, "'labs'")) << err;

  err = error_of(R"({"patient_id":"p1","demographics":{},"codes":[],"labs":[],)"
                 R"("notes":[{"note_id":"a","text":""},{"note_id":"a","text":"x"}]})");
  EXPECT_TRUE(mentions(err, "duplicate note_id")) << err;

  err = error_of("not json\n");
  EXPECT_TRUE(mentions(err, "line 1")) << err;
}

TEST(LoadCohort, LabelsAllOrNone) {
  std::istringstream in(record_line("p1", R"(,"label":1)") + "\n" + record_line("p2", R"(,"label":0)") + "\n");
  const auto ds = parse_cohort(in, "hf");
  ASSERT_TRUE(ds.labeled());
  EXPECT_EQ(*ds.labels, (std::vector<int>{1, 0}));
  EXPECT_FALSE(error_of(record_line("p1", R"(,"label":1)") + "\n" + record_line("p2") + "\n").empty());
  EXPECT_FALSE(error_of(record_line("p1", R"(,"label":2)") + "\n").empty());
}

TEST(LoadCohort, WriteThenParseRoundTrips) {
  SyntheticCohortSpec spec;
  spec.n_cases = 20;
  spec.n_controls = 20;
  const auto ds = generate_synthetic_cohort(spec);
  std::stringstream ss;
  write_cohort(ss, ds);
  const auto back = parse_cohort(ss, ds.disease_name);
  ASSERT_EQ(back.size(), ds.size());
  EXPECT_EQ(*back.labels, *ds.labels);
  std::stringstream again;
  write_cohort(again, back);
  EXPECT_EQ(again.str(), ss.str());
}

TEST(Generator, DeterministicForSeed) {
  SyntheticCohortSpec spec;
  spec.n_cases = 1000;
  spec.n_controls = 1000;
  spec.seed = 7;
  std::stringstream a, b;
  write_cohort(a, generate_synthetic_cohort(spec));
  write_cohort(b, generate_synthetic_cohort(spec));
  EXPECT_EQ(a.str(), b.str());
  spec.seed = 8;
  std::stringstream c;
  write_cohort(c, generate_synthetic_cohort(spec));
  EXPECT_NE(a.str(), c.str());
}

TEST(Generator, CodesOnlyCasesScan) {
  SyntheticCohortSpec spec;
  spec.n_cases = 300;
  spec.n_controls = 300;
  spec.p_code_suppression = 0.0;
  spec.p_note_evidence_case = 0.0;
  const auto ds = generate_synthetic_cohort(spec);
  const auto pool = spec.disease_pool();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& r = ds.records[i];
    if ((*ds.labels)[i] == 1) {
      EXPECT_TRUE(std::any_of(pool.begin(), pool.end(), [&](const auto& c) { return r.codes.count(c) > 0; })) << r.patient_id;
    }
    for (const auto& n : r.notes) EXPECT_FALSE(mentions(normalize_text(n.text), "heart failure")) << r.patient_id;
  }
}

TEST(Generator, HeartFailureSizedCohort) {
  SyntheticCohortSpec spec;
  spec.n_cases = 10109;
  spec.n_controls = 10109;
  spec.mean_note_sentences = 2;
  spec.mean_background_codes = 2;
  spec.mean_labs = 1;
  const auto ds = generate_synthetic_cohort(spec);
  EXPECT_EQ(ds.size(), 20218u);
  EXPECT_EQ(std::count(ds.labels->begin(), ds.labels->end(), 1), 10109);
  std::set<std::string> ids;
  for (const auto& r : ds.records) ids.insert(r.patient_id);
  EXPECT_EQ(ids.size(), 20218u);
}

TEST(Generator, SuppressionRateNearSpec) {
  SyntheticCohortSpec spec;
  spec.n_cases = 2000;
  spec.n_controls = 10;
  spec.p_code_suppression = 0.3;
  const auto ds = generate_synthetic_cohort(spec);
  const auto pool = spec.disease_pool();
  int cases = 0, without = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if ((*ds.labels)[i] != 1) continue;
    ++cases;
    const auto& codes = ds.records[i].codes;
    without += std::none_of(pool.begin(), pool.end(), [&](const auto& c) { return codes.count(c) > 0; });
  }
  const double rate = static_cast<double>(without) / cases;
  EXPECT_NEAR(rate, 0.3, 0.05);
}

TEST(Generator, SuppressedCasesStillCarryNoteEvidence) {
  SyntheticCohortSpec spec;
  spec.n_cases = 200;
  spec.n_controls = 1;
  spec.p_code_suppression = 1.0;
  spec.p_note_evidence_case = 0.0;
  const auto ds = generate_synthetic_cohort(spec);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if ((*ds.labels)[i] == 1) {
      EXPECT_TRUE(notes_contain_keyword(ds.records[i].notes, spec.keywords));
    }
  }
}

TEST(Generator, RejectsBadSpecs) {
  SyntheticCohortSpec overlap;
  overlap.disease_code_pool = {"ICD:X1"};
  overlap.background_code_pool = {"ICD:X1", "ICD:X2"};
  EXPECT_THROW(generate_synthetic_cohort(overlap), ValidationError);
  SyntheticCohortSpec prob;
  prob.p_case_code = 1.5;
  EXPECT_THROW(generate_synthetic_cohort(prob), ValidationError);
  SyntheticCohortSpec empty;
  empty.n_cases = 0;
  EXPECT_THROW(generate_synthetic_cohort(empty), ValidationError);
}

namespace {

PhenotypeRule hf_rule() {
  PhenotypeRule r;
  r.disease_name = "heart_failure";
  r.include_codes = {"ICD:I50", "ICD:I11"};
  r.exclude_codes = {"ICD:J44"};
  r.keywords = {"heart failure"};
  return r;
}

}  // namespace

TEST(PhenotypeRule, IncludeCodesLabelPositive) {
  PatientRecord r;
  r.codes = {"ICD:I50", "ICD:I11", "MED:M1"};
  EXPECT_EQ(apply_phenotype_rule(r, hf_rule()), 1);
}

TEST(PhenotypeRule, ExclusionDominates) {
  PatientRecord r;
  r.codes = {"ICD:I50", "ICD:J44"};
  r.notes = {{"n", "Known heart failure."}};
  EXPECT_EQ(apply_phenotype_rule(r, hf_rule()), 0);
}

TEST(PhenotypeRule, KeywordWithoutCodes) {
  PatientRecord r;
  r.notes = {{"n1", "Routine visit."}, {"n2", "History of   Heart\nFailure, stable."}};
  EXPECT_EQ(apply_phenotype_rule(r, hf_rule()), 1);
  r.notes = {{"n1", "Heart rate normal. Kidney failure ruled out."}};
  EXPECT_EQ(apply_phenotype_rule(r, hf_rule()), 0);
}

TEST(PhenotypeRule, MinCodeHits) {
  auto rule = hf_rule();
  rule.min_code_hits = 2;
  PatientRecord r;
  r.codes = {"ICD:I50"};
  EXPECT_EQ(apply_phenotype_rule(r, rule), 0);
  r.codes.insert("ICD:I11");
  EXPECT_EQ(apply_phenotype_rule(r, rule), 1);
}

TEST(PhenotypeRule, PureFunctionAndValidation) {
  SyntheticCohortSpec spec;
  spec.n_cases = 50;
  spec.n_controls = 50;
  const auto ds = generate_synthetic_cohort(spec);
  auto rule = hf_rule();
  for (const auto& r : ds.records) EXPECT_EQ(apply_phenotype_rule(r, rule), apply_phenotype_rule(r, rule));
  rule.exclude_codes.insert("ICD:I50");
  EXPECT_THROW(label_cohort(ds, rule), ValidationError);
  auto no_kw = hf_rule();
  no_kw.keywords.clear();
  EXPECT_THROW(label_cohort(ds, no_kw), ValidationError);
}

TEST(KFold, TenRecordsFiveFolds) {
  const std::vector<int> labels = {1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
  const auto folds = split_stratified_kfold(labels, 5, 3);
  ASSERT_EQ(folds.size(), 5u);
  for (const auto& f : folds) {
    ASSERT_EQ(f.test.size(), 2u);
    EXPECT_EQ(labels[f.test[0]] + labels[f.test[1]], 1);
    EXPECT_EQ(f.train.size(), 8u);
  }
}

TEST(KFold, TwoFoldsOnFourRecords) {
  const std::vector<int> labels = {1, 0, 1, 0};
  const auto folds = split_stratified_kfold(labels, 2, 1);
  ASSERT_EQ(folds.size(), 2u);
  std::set<std::size_t> a(folds[0].test.begin(), folds[0].test.end()), b(folds[1].test.begin(), folds[1].test.end());
  EXPECT_EQ(a.size(), 2u);
  EXPECT_EQ(b.size(), 2u);
  for (auto i : a) EXPECT_FALSE(b.count(i));
}

TEST(KFold, DeterministicAndPartitions) {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(6));
    std::vector<int> labels;
    const auto n = static_cast<std::size_t>(2 * k + static_cast<int>(rng.below(60)));
    for (std::size_t i = 0; i < n; ++i) labels.push_back(i < static_cast<std::size_t>(k) ? 1 : (i < 2u * k ? 0 : rng.bernoulli(0.3)));
    const auto folds = split_stratified_kfold(labels, k, trial);
    const auto again = split_stratified_kfold(labels, k, trial);
    std::vector<int> seen(n, 0);
    for (std::size_t f = 0; f < folds.size(); ++f) {
      EXPECT_EQ(folds[f].test, again[f].test);
      EXPECT_EQ(folds[f].train.size() + folds[f].test.size(), n);
      for (auto i : folds[f].test) ++seen[i];
    }
    EXPECT_TRUE(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));
  }
}

TEST(KFold, TooFewPerClass) {
  EXPECT_THROW(split_stratified_kfold(std::vector<int>{1, 0, 0, 0, 0}, 2, 0), ValidationError);
  EXPECT_THROW(split_stratified_kfold(std::vector<int>{1, 0}, 1, 0), ValidationError);
}
