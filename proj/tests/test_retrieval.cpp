#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "noseprint/noseprint.hpp"
#include "support.hpp"

using namespace noseprint;
using testsupport::TempDir;

namespace {

EmbeddingStore random_store(std::size_t n, std::size_t dim, RngStream& rng, bool unit = true) {
  EmbeddingStore s;
  s.set_dim(dim);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> v(dim);
    for (auto& x : v) x = static_cast<float>(rng.normal(0.0, 1.0));
    if (unit) l2_normalize(v);
    s.add({"img_" + std::to_string(i), std::move(v)});
  }
  return s;
}

// Counts over every positive/negative pair; ties are worth one half.
double brute_force_auc(const std::vector<std::pair<double, int>>& scored) {
  double wins = 0;
  std::size_t pairs = 0;
  for (const auto& p : scored) {
    if (p.second != 1) continue;
    for (const auto& n : scored) {
      if (n.second != 0) continue;
      ++pairs;
      wins += p.first > n.first ? 1.0 : p.first == n.first ? 0.5 : 0.0;
    }
  }
  return wins / double(pairs);
}

std::vector<std::pair<double, int>> random_scores(RngStream& rng) {
  const std::size_t n = 2 + rng.below(60);
  std::vector<std::pair<double, int>> v;
  // Coarse levels force plenty of ties.
  const int levels = 1 + int(rng.below(12));
  for (std::size_t i = 0; i < n; ++i) v.emplace_back(double(rng.below(levels)) / levels, int(rng.below(2)));
  v[0].second = 1;
  v[1].second = 0;
  return v;
}

double norm(const std::vector<float>& v) { return l2_norm(v); }

}  // namespace

// --- embedding store -------------------------------------------------------------

TEST(EmbeddingStore, RoundtripIsBitExact) {
  TempDir dir("prem");
  RngStream rng(1, 1);
  const EmbeddingStore s = random_store(17, 12, rng, false);
  save_embeddings(s, dir / "e.prem");
  const EmbeddingStore back = load_embeddings(dir / "e.prem");
  EXPECT_EQ(back, s);
  EXPECT_EQ(encode_embeddings(back), encode_embeddings(s));
}

TEST(EmbeddingStore, EmptyStoreIsValid) {
  EmbeddingStore s;
  s.set_dim(8);
  const auto bytes = encode_embeddings(s);
  EXPECT_EQ(bytes.size(), 16u);
  const EmbeddingStore back = decode_embeddings(bytes);
  EXPECT_TRUE(back.empty());
  EXPECT_EQ(back.dim(), 8u);
}

TEST(EmbeddingStore, MixedDimsAreRejected) {
  EmbeddingStore s;
  s.add({"a", {1.f, 0.f}});
  EXPECT_THROW(s.add({"b", {1.f, 0.f, 0.f}}), ShapeError);
}

TEST(EmbeddingStore, LayoutMatchesFormat) {
  EmbeddingStore s;
  s.add({"ab", {1.0f}});
  const std::vector<unsigned char> expected = {'P', 'R', 'E', 'M', 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0,
                                               2, 0, 'a', 'b', 0x00, 0x00, 0x80, 0x3F};
  EXPECT_EQ(encode_embeddings(s), expected);
}

TEST(EmbeddingStore, CorruptFilesAreFormatErrors) {
  EmbeddingStore s;
  s.add({"a", {1.f, 2.f}});
  s.add({"b", {3.f, 4.f}});
  const auto good = encode_embeddings(s);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_embeddings(bad_magic), FormatError);

  auto bad_version = good;
  bad_version[4] = 2;
  try {
    decode_embeddings(bad_version);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }

  auto truncated = good;
  truncated.pop_back();
  EXPECT_THROW(decode_embeddings(truncated), FormatError);

  auto trailing = good;
  trailing.push_back(0);
  EXPECT_THROW(decode_embeddings(trailing), FormatError);

  auto dup = good;
  dup[16 + 2 + 1 + 8 + 2] = 'a';  // second record's id becomes "a"
  EXPECT_THROW(decode_embeddings(dup), FormatError);
}

// --- distance ---------------------------------------------------------------------

TEST(Distance, Examples) {
  EXPECT_DOUBLE_EQ(distance(std::vector<float>{0, 0}, std::vector<float>{3, 4}, Metric::euclidean), 5.0);
  EXPECT_NEAR(distance(std::vector<float>{0.3f, -2}, std::vector<float>{0.3f, -2}, Metric::cosine), 0.0, 1e-12);
  EXPECT_NEAR(distance(std::vector<float>{1, 0}, std::vector<float>{0, 5}, Metric::cosine), 1.0, 1e-12);
}

TEST(Distance, CosineOfZeroVectorIsDomainError) {
  EXPECT_THROW(distance(std::vector<float>{0, 0}, std::vector<float>{1, 0}, Metric::cosine), DomainError);
}

TEST(Distance, AxiomsHoldOnRandomVectors) {
  RngStream rng(2, 2);
  const EmbeddingStore s = random_store(30, 7, rng, false);
  const auto& r = s.records();
  for (std::size_t i = 0; i < r.size(); ++i) {
    EXPECT_EQ(distance(r[i].vector, r[i].vector, Metric::euclidean), 0.0);
    for (std::size_t j = 0; j < r.size(); ++j) {
      const double e = distance(r[i].vector, r[j].vector, Metric::euclidean);
      const double c = distance(r[i].vector, r[j].vector, Metric::cosine);
      EXPECT_GE(e, 0.0);
      EXPECT_EQ(e, distance(r[j].vector, r[i].vector, Metric::euclidean));
      EXPECT_EQ(c, distance(r[j].vector, r[i].vector, Metric::cosine));
      EXPECT_GE(c, -1e-12);
      EXPECT_LE(c, 2.0 + 1e-12);
      if (i != j) EXPECT_GT(e, 0.0);
    }
  }
}

// --- query expansion ----------------------------------------------------------------

TEST(QueryExpansion, WorkedExample) {
  EmbeddingStore g;
  g.add({"n", {0.f, 1.f}});
  g.add({"far", {-1.f, 0.f}});
  const auto out = query_expand({"q", {1.f, 0.f}}, g, {.m = 1, .metric = Metric::cosine});
  ASSERT_EQ(out.size(), 2u);
  EXPECT_NEAR(out[0], 0.70711, 1e-5);
  EXPECT_NEAR(out[1], 0.70711, 1e-5);
}

TEST(QueryExpansion, ZeroNeighborsLeavesQueryUnchanged) {
  RngStream rng(3, 3);
  const EmbeddingStore g = random_store(10, 5, rng);
  const EmbeddingRecord q = g.records()[4];
  EXPECT_EQ(query_expand(q, g, {.m = 0}), q.vector);
}

TEST(QueryExpansion, IdenticalNeighborsLeaveQueryUnchanged) {
  EmbeddingStore g;
  const std::vector<float> v = {0.6f, 0.8f};
  for (int i = 0; i < 3; ++i) g.add({"c" + std::to_string(i), v});
  g.add({"other", {-0.8f, 0.6f}});
  const auto out = query_expand({"q", v}, g, {.m = 3});
  for (std::size_t d = 0; d < v.size(); ++d) EXPECT_NEAR(out[d], v[d], 1e-7);
}

TEST(QueryExpansion, LargeMUsesWholeGallery) {
  EmbeddingStore g;
  g.add({"a", {1.f, 0.f}});
  g.add({"b", {0.f, 1.f}});
  const auto big = query_expand({"q", {1.f, 1.f}}, g, {.m = 50, .metric = Metric::euclidean});
  const auto all = query_expand({"q", {1.f, 1.f}}, g, {.m = 2, .metric = Metric::euclidean});
  EXPECT_EQ(big, all);
  EXPECT_NEAR(big[0], 2.0 / 3.0, 1e-7);
  EXPECT_THROW(query_expand({"q", {1.f, 1.f}}, g, {.m = -1}), ArgumentError);
}

TEST(QueryExpansion, ExcludedIdsAreSkipped) {
  EmbeddingStore g;
  g.add({"near", {1.f, 0.1f}});
  g.add({"next", {0.f, 1.f}});
  const auto out = query_expand({"q", {1.f, 0.f}}, g, {.m = 1, .metric = Metric::cosine}, {"near"});
  EXPECT_NEAR(out[0], out[1], 1e-7);
}

TEST(QueryExpansion, ThresholdDropsDissimilarNeighbors) {
  EmbeddingStore g;
  g.add({"opposite", {-1.f, 0.f}});
  QEConfig cfg{.m = 1, .metric = Metric::cosine, .min_similarity = -0.5};
  EXPECT_EQ(query_expand({"q", {1.f, 0.f}}, g, cfg), (std::vector<float>{1.f, 0.f}));
}

TEST(QueryExpansion, IdempotentWhenTopSetIsStable) {
  // A tight cluster far from everything else: expanding twice picks the same
  // neighbors, so the second expansion of the first result reproduces it.
  EmbeddingStore g;
  g.add({"c1", {1.f, 0.05f}});
  g.add({"c2", {1.f, -0.05f}});
  g.add({"far", {-1.f, 0.f}});
  QEConfig cfg{.m = 2, .metric = Metric::cosine};
  const auto once = query_expand({"q", {1.f, 0.f}}, g, cfg);
  const auto twice = query_expand({"q", once}, g, cfg);
  for (std::size_t d = 0; d < once.size(); ++d) EXPECT_NEAR(once[d], twice[d], 1e-7);
}

// --- fusion ----------------------------------------------------------------------------

TEST(Fusion, SingleStoreGivesNormalizedCopy) {
  RngStream rng(4, 4);
  const EmbeddingStore s = random_store(6, 4, rng, false);
  const EmbeddingStore f = fuse_embeddings({&s});
  for (const auto& r : s.records()) {
    auto v = r.vector;
    l2_normalize(v);
    const auto& got = f.at(r.id).vector;
    for (std::size_t d = 0; d < v.size(); ++d) EXPECT_NEAR(got[d], v[d], 1e-7);
  }
}

TEST(Fusion, SelfFusionStacksScaledCopies) {
  RngStream rng(5, 5);
  const EmbeddingStore s = random_store(5, 3, rng);
  const EmbeddingStore f = fuse_embeddings({&s, &s});
  ASSERT_EQ(f.dim(), 6u);
  for (const auto& r : s.records()) {
    const auto& got = f.at(r.id).vector;
    for (std::size_t d = 0; d < 3; ++d) {
      EXPECT_NEAR(got[d], r.vector[d] / std::numbers::sqrt2, 1e-6);
      EXPECT_NEAR(got[d + 3], r.vector[d] / std::numbers::sqrt2, 1e-6);
    }
  }
}

TEST(Fusion, DimsAddUpAndOutputsAreUnit) {
  RngStream rng(6, 6);
  const EmbeddingStore a = random_store(8, 64, rng, false), b = random_store(8, 32, rng, false);
  const EmbeddingStore f = fuse_embeddings({&a, &b});
  EXPECT_EQ(f.dim(), 96u);
  for (const auto& r : f.records()) EXPECT_NEAR(norm(r.vector), 1.0, 1e-6);
}

TEST(Fusion, AverageModeNeedsEqualDims) {
  RngStream rng(7, 7);
  const EmbeddingStore a = random_store(3, 4, rng), b = random_store(3, 4, rng), c = random_store(3, 5, rng);
  const EmbeddingStore f = fuse_embeddings({&a, &b}, FuseMode::average);
  EXPECT_EQ(f.dim(), 4u);
  for (const auto& r : f.records()) EXPECT_NEAR(norm(r.vector), 1.0, 1e-6);
  EXPECT_THROW(fuse_embeddings({&a, &c}, FuseMode::average), ShapeError);
}

TEST(Fusion, IdMismatchListsTheDifference) {
  EmbeddingStore a, b;
  a.add({"x", {1.f}});
  a.add({"only_a", {1.f}});
  b.add({"x", {1.f}});
  b.add({"only_b", {1.f}});
  try {
    fuse_embeddings({&a, &b});
    FAIL();
  } catch (const ArgumentError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("only_a"), std::string::npos) << msg;
    EXPECT_NE(msg.find("only_b"), std::string::npos) << msg;
    EXPECT_EQ(msg.find(" x"), std::string::npos) << msg;
  }
}

// --- pair scoring ----------------------------------------------------------------------

TEST(ScorePairs, IdenticalVectorsScoreZero) {
  EmbeddingStore s;
  s.add({"a", {0.6f, 0.8f}});
  s.add({"b", {0.6f, 0.8f}});
  const auto out = score_pairs({{"a", "b", 1}}, s, Metric::cosine);
  EXPECT_NEAR(out[0].score, 0.0, 1e-12);
}

TEST(ScorePairs, SymmetricInThePair) {
  RngStream rng(8, 8);
  const EmbeddingStore s = random_store(12, 6, rng);
  for (Metric metric : {Metric::cosine, Metric::euclidean})
    for (int m : {0, 3}) {
      const std::optional<QEConfig> qe = QEConfig{.m = m};
      for (std::size_t i = 0; i < 12; ++i)
        for (std::size_t j = 0; j < 12; ++j) {
          const auto& a = s.records()[i].id;
          const auto& b = s.records()[j].id;
          EXPECT_EQ(score_pairs({{a, b, 0}}, s, metric, qe)[0].score, score_pairs({{b, a, 0}}, s, metric, qe)[0].score);
        }
    }
}

TEST(ScorePairs, ZeroExpansionIsBitExact) {
  RngStream rng(9, 9);
  const EmbeddingStore s = random_store(20, 8, rng);
  std::vector<VerificationPair> pairs;
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t j = i + 1; j < 20; ++j) pairs.push_back({s.records()[i].id, s.records()[j].id, int((i + j) % 2)});
  for (Metric metric : {Metric::cosine, Metric::euclidean}) {
    const auto plain = score_pairs(pairs, s, metric);
    const auto qe0 = score_pairs(pairs, s, metric, QEConfig{.m = 0});
    for (std::size_t k = 0; k < pairs.size(); ++k) EXPECT_EQ(plain[k].score, qe0[k].score);
  }
}

TEST(ScorePairs, MissingIdIsNamed) {
  EmbeddingStore s;
  s.add({"a", {1.f}});
  try {
    score_pairs({{"a", "ghost", 0}}, s, Metric::euclidean);
    FAIL();
  } catch (const ArgumentError& e) {
    EXPECT_NE(std::string(e.what()).find("ghost"), std::string::npos);
  }
}

TEST(ScorePairs, AllPairsCoversEveryUnorderedPair) {
  Manifest m;
  for (int i = 0; i < 6; ++i) m.rows.push_back({"p" + std::to_string(i), "id" + std::to_string(i / 3), "", ""});
  const auto pairs = all_pairs(m);
  EXPECT_EQ(pairs.size(), 15u);
  int positives = 0;
  for (const auto& p : pairs) positives += p.label;
  EXPECT_EQ(positives, 6);
}

// --- ROC / AUC -------------------------------------------------------------------------

TEST(Auc, Examples) {
  EXPECT_EQ(roc_auc({{0.9, 1}, {0.8, 1}, {0.1, 0}, {0.2, 0}}).auc, 1.0);
  EXPECT_EQ(roc_auc({{0.5, 1}, {0.5, 1}, {0.5, 0}, {0.5, 0}, {0.5, 0}}).auc, 0.5);
  EXPECT_EQ(roc_auc({{0.8, 1}, {0.4, 1}, {0.6, 0}, {0.2, 0}}).auc, 0.75);
}

TEST(Auc, SingleClassIsDomainError) {
  EXPECT_THROW(roc_auc({{0.1, 1}, {0.2, 1}}), DomainError);
  EXPECT_THROW(roc_auc({{0.1, 0}}), DomainError);
  EXPECT_THROW(roc_auc({{0.1, 0}, {0.2, 2}}), ArgumentError);
}

TEST(Auc, MatchesBruteForceOracleWithTies) {
  RngStream rng(10, 10);
  for (int t = 0; t < 200; ++t) {
    const auto v = random_scores(rng);
    EXPECT_NEAR(roc_auc(v).auc, brute_force_auc(v), 1e-12) << t;
  }
}

TEST(Auc, InvariantUnderIncreasingTransforms) {
  RngStream rng(11, 11);
  for (int t = 0; t < 50; ++t) {
    auto v = random_scores(rng);
    const double base = roc_auc(v).auc;
    for (auto& [s, l] : v) s = std::exp(3.0 * s) - 7.0;
    EXPECT_EQ(roc_auc(v).auc, base);
    for (auto& [s, l] : v) s = std::cbrt(s);
    EXPECT_EQ(roc_auc(v).auc, base);
  }
}

TEST(Auc, CurveIsMonotoneWithFixedEndpoints) {
  RngStream rng(12, 12);
  for (int t = 0; t < 50; ++t) {
    const RocCurve c = roc_auc(random_scores(rng));
    ASSERT_GE(c.points.size(), 2u);
    EXPECT_EQ(c.points.front().fpr, 0.0);
    EXPECT_EQ(c.points.front().tpr, 0.0);
    EXPECT_EQ(c.points.back().fpr, 1.0);
    EXPECT_EQ(c.points.back().tpr, 1.0);
    for (std::size_t i = 1; i < c.points.size(); ++i) {
      EXPECT_GE(c.points[i].fpr, c.points[i - 1].fpr);
      EXPECT_GE(c.points[i].tpr, c.points[i - 1].tpr);
      EXPECT_LT(c.points[i].threshold, c.points[i - 1].threshold);
    }
    EXPECT_NEAR(trapezoid_area(c), c.auc, 1e-12);
  }
}

TEST(Auc, NanScoreIsRejected) {
  EXPECT_THROW(roc_auc({{std::nan(""), 1}, {0.1, 0}}), DomainError);
}

// --- CSV files ---------------------------------------------------------------------------

TEST(Csv, PairsAndScoresRoundtrip) {
  TempDir dir("csv");
  const std::vector<VerificationPair> pairs = {{"a.pgm", "b.pgm", 1}, {"a.pgm", "c.pgm", 0}};
  write_pairs(pairs, dir / "pairs.csv");
  EXPECT_EQ(testsupport::slurp(dir / "pairs.csv"), "a,b,label\na.pgm,b.pgm,1\na.pgm,c.pgm,0\n");
  const auto back = read_pairs(dir / "pairs.csv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].b, "c.pgm");
  EXPECT_EQ(back[0].label, 1);

  const std::vector<ScoredPair> scores = {{pairs[0], -0.1}, {pairs[1], -1.0 / 3.0}};
  write_scores(scores, dir / "scores.csv");
  const auto sback = read_scores(dir / "scores.csv");
  ASSERT_EQ(sback.size(), 2u);
  EXPECT_EQ(sback[1].score, -1.0 / 3.0);
  EXPECT_EQ(sback[0].pair.a, "a.pgm");
}

TEST(Csv, RocFileEndsWithAucLine) {
  TempDir dir("roc");
  const RocCurve c = roc_auc({{0.8, 1}, {0.4, 1}, {0.6, 0}, {0.2, 0}});
  write_roc(c, dir / "roc.csv");
  const std::string text = testsupport::slurp(dir / "roc.csv");
  EXPECT_EQ(text.rfind("threshold,fpr,tpr\n", 0), 0u);
  EXPECT_NE(text.find("\nauc,0.75\n"), std::string::npos) << text;
  EXPECT_NE(text.find("inf,0,0\n"), std::string::npos) << text;
}

TEST(Csv, MalformedFilesAreFormatErrors) {
  TempDir dir("badcsv");
  testsupport::write(dir / "h.csv", "x,y,z\n");
  EXPECT_THROW(read_pairs(dir / "h.csv"), FormatError);
  testsupport::write(dir / "l.csv", "a,b,label\np,q,2\n");
  EXPECT_THROW(read_pairs(dir / "l.csv"), FormatError);
  testsupport::write(dir / "f.csv", "a,b,label\np,q\n");
  EXPECT_THROW(read_pairs(dir / "f.csv"), FormatError);
  testsupport::write(dir / "s.csv", "a,b,label,score\np,q,1,abc\n");
  EXPECT_THROW(read_scores(dir / "s.csv"), FormatError);
  EXPECT_THROW(read_pairs(dir / "missing.csv"), IoError);
}
