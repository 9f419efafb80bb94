#include "diwift/dataset.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

using namespace diwift;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "diwift_dataset_test";
  fs::create_directories(dir);
  return dir / name;
}

std::string write_file(const std::string& name, const std::string& body) {
  const auto p = scratch(name);
  std::ofstream(p) << body;
  return p.string();
}

FieldSchema categorical(std::string name, std::vector<std::string> cats) {
  FieldSchema f;
  f.name = std::move(name);
  f.kind = FieldKind::categorical;
  f.categories = std::move(cats);
  return f;
}

FieldSchema numerical(std::string name, double lo, double hi) {
  FieldSchema f;
  f.name = std::move(name);
  f.min = lo;
  f.max = hi;
  f.has_bounds = true;
  return f;
}

Dataset tiny(std::size_t n) {
  Dataset ds;
  ds.schema = {numerical("a", 0, 1)};
  ds.featmap = build_featmap(ds.schema);
  ds.x = RowMatrix(static_cast<Eigen::Index>(n), 1);
  ds.y = Vector::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) ds.x(static_cast<Eigen::Index>(i), 0) = static_cast<double>(i) / n;
  ds.raw = ds.x;
  return ds;
}

}  // namespace

TEST(LoadCsv, OneHotAndScaling) {
  const auto path = write_file("basic.csv", "color,size,label\nb,10,1\na,30,0\nc,40,1\n,20,0\n");
  auto ds = load_csv(path, {categorical("color", {"a", "b", "c"}), numerical("size", 10, 30)}, "label");
  ASSERT_EQ(ds.rows(), 4u);
  ASSERT_EQ(ds.dim(), 4u);
  EXPECT_EQ(ds.x.row(0).head(3), Eigen::RowVector3d(0, 1, 0));
  EXPECT_EQ(ds.x(0, 3), 0.0);
  EXPECT_EQ(ds.x(1, 3), 1.0);
  EXPECT_EQ(ds.x(2, 3), 1.0);  // 40 clamps
  EXPECT_EQ(ds.x(3, 3), 0.5);
  EXPECT_EQ(ds.x.row(3).head(3).sum(), 0.0);  // missing category
  EXPECT_EQ(ds.y, Eigen::Vector4d(1, 0, 1, 0));
  EXPECT_EQ(ds.feature_name(1), "color=b");
}

TEST(LoadCsv, Errors) {
  const auto schema = std::vector<FieldSchema>{categorical("color", {"a", "b"})};
  EXPECT_THROW(load_csv(write_file("nocol.csv", "shade,label\na,1\n"), schema, "label"), DataError);
  EXPECT_THROW(load_csv(write_file("badlabel.csv", "color,label\na,yes\n"), schema, "label"), DataError);
  EXPECT_THROW(load_csv(write_file("twolabel.csv", "color,label\na,2\n"), schema, "label"), DataError);
  try {
    load_csv(write_file("unknown.csv", "color,label\na,1\nz,0\n"), schema, "label");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos);
  }
  EXPECT_THROW(load_csv("/nonexistent/file.csv", schema, "label"), DataError);
}

TEST(LoadCsv, ConstantFieldIsZeroColumn) {
  warnings_enabled() = false;
  FieldSchema f;
  f.name = "v";
  auto ds = load_csv(write_file("const.csv", "v,label\n5,1\n5,0\n"), {f}, "label");
  warnings_enabled() = true;
  EXPECT_TRUE(ds.x.isZero(0.0));
}

TEST(LoadCsv, InfersCategoriesSorted) {
  auto ds = load_csv(write_file("infer.csv", "c,label\nz,1\nm,0\nz,0\n"), {categorical("c", {})}, "label");
  EXPECT_EQ(ds.schema[0].categories, (std::vector<std::string>{"m", "z"}));
  EXPECT_EQ(ds.x(0, 1), 1.0);
}

TEST(Schema, RejectsDuplicateCategories) {
  EXPECT_THROW(build_featmap({categorical("c", {"a", "a"})}), ConfigError);
  EXPECT_THROW(build_featmap({categorical("c", {})}), ConfigError);
}

TEST(Split, SizesFollowRatiosWithRemainderToTrain) {
  EXPECT_EQ(split_sizes(5, {3, 1, 1}), (std::array<std::size_t, 3>{3, 1, 1}));
  EXPECT_EQ(split_sizes(7, {3, 1, 1}), (std::array<std::size_t, 3>{5, 1, 1}));
  auto s = split(tiny(7), {{3, 1, 1}, 9});
  EXPECT_EQ(s.train.rows(), 5u);
  EXPECT_EQ(s.valid.rows(), 1u);
  EXPECT_EQ(s.test.rows(), 1u);
}

TEST(Split, DisjointAndDeterministic) {
  const auto ds = tiny(40);
  auto a = split(ds, {{3, 1, 1}, 4});
  auto b = split(ds, {{3, 1, 1}, 4});
  EXPECT_EQ(*a.train.raw, *b.train.raw);
  EXPECT_EQ(*a.test.raw, *b.test.raw);
  std::set<double> seen;
  for (const auto* part : {&a.train, &a.valid, &a.test})
    for (Eigen::Index i = 0; i < part->raw->rows(); ++i) seen.insert((*part->raw)(i, 0));
  EXPECT_EQ(seen.size(), 40u);
}

TEST(Split, BoundsComeFromTrain) {
  auto s = split(tiny(50), {{3, 1, 1}, 1});
  const auto& raw = *s.train.raw;
  EXPECT_EQ(s.train.schema[0].min, raw.minCoeff());
  EXPECT_EQ(s.train.schema[0].max, raw.maxCoeff());
  EXPECT_EQ(s.train.x.minCoeff(), 0.0);
  EXPECT_EQ(s.train.x.maxCoeff(), 1.0);
  EXPECT_EQ(s.test.schema[0].min, s.train.schema[0].min);
}

TEST(Split, Errors) {
  EXPECT_THROW(split(tiny(4), {}), DataError);
  EXPECT_THROW(split(tiny(5), {{1, 0, 1}, 0}), DataError);
  EXPECT_THROW(split(tiny(10), {{0, 0, 0}, 0}), ConfigError);
}

TEST(Synthetic, ZeroInputLogits) {
  std::array<double, kSynDim> zero{};
  EXPECT_EQ(syn_logit(SynKind::syn1, zero.data()), 1.0);
  EXPECT_EQ(syn_logit(SynKind::syn2, zero.data()), 1.0);
  EXPECT_EQ(syn_positive_prob(1.0), 0.5);
  auto x = zero;
  x[10] = -0.5;
  x[0] = 0.7;
  x[1] = -1.3;
  EXPECT_TRUE(routes_to_syn1(SynKind::syn3, x.data()));
  EXPECT_EQ(syn_logit(SynKind::syn3, x.data()), std::exp(0.7 * -1.3));
  x[10] = 0.5;
  EXPECT_EQ(syn_logit(SynKind::syn3, x.data()), syn_logit(SynKind::syn2, x.data()));
}

TEST(Synthetic, ReproducibleAndInUnitCube) {
  auto a = gen_syn(SynKind::syn3, 300, 11);
  auto b = gen_syn(SynKind::syn3, 300, 11);
  EXPECT_EQ(a.x, b.x);
  EXPECT_EQ(a.y, b.y);
  EXPECT_GE(a.x.minCoeff(), 0.0);
  EXPECT_LE(a.x.maxCoeff(), 1.0);
  EXPECT_NE(gen_syn(SynKind::syn3, 300, 12).x, a.x);
  EXPECT_THROW(gen_syn(SynKind::syn1, 0, 1), ConfigError);
}

TEST(Synthetic, RelevanceMarksFormulaInputs) {
  for (auto kind : {SynKind::syn1, SynKind::syn2, SynKind::syn3}) {
    auto ds = gen_syn(kind, 200, 5);
    for (Eigen::Index i = 0; i < 200; ++i) {
      const bool low = (*ds.raw)(i, 10) < 0.0;
      std::set<Eigen::Index> expect;
      if (kind == SynKind::syn1 || (kind == SynKind::syn3 && low))
        expect = {0, 1};
      else
        expect = {6, 7, 8, 9};
      if (kind == SynKind::syn3) expect.insert(10);
      for (Eigen::Index k = 0; k < 11; ++k) EXPECT_EQ((*ds.relevance)(i, k), expect.count(k) ? 1 : 0);
    }
  }
}

TEST(Synthetic, Syn3RoutingNearHalf) {
  const std::size_t n = 4000;
  auto ds = gen_syn(SynKind::syn3, n, 21);
  double low = 0;
  for (Eigen::Index i = 0; i < ds.raw->rows(); ++i) low += (*ds.raw)(i, 10) < 0.0;
  const double sigma = std::sqrt(0.25 / n);
  EXPECT_LE(std::abs(low / n - 0.5), 3 * sigma);
}

TEST(Synthetic, LabelRateMatchesClosedForm) {
  // syn1: P(y=1) = E[1/(1+exp(x1 x2))] = 0.5 by symmetry of x1 x2.
  auto ds = gen_syn(SynKind::syn1, 20000, 3);
  const double n = 20000;
  EXPECT_LE(std::abs(ds.y.mean() - 0.5), 3 * std::sqrt(0.25 / n));
}

TEST(Synthetic, ShiftedSampleRaisesPositiveRate) {
  auto base = gen_syn(SynKind::syn3, 4000, 8);
  auto biased = gen_syn_shifted(SynKind::syn3, 4000, 8, 1.0, 0.5);
  EXPECT_EQ(biased.rows(), 4000u);
  // Keeping every positive and half the negatives maps rate q to q / (q + (1-q)/2).
  const double q = base.y.mean();
  const double expect = q / (q + 0.5 * (1 - q));
  EXPECT_LE(std::abs(biased.y.mean() - expect), 3 * std::sqrt(expect * (1 - expect) / 4000) + 3 * std::sqrt(0.25 / 4000));
  EXPECT_THROW(gen_syn_shifted(SynKind::syn3, 10, 1, 0.0, 0.5), ConfigError);
}

TEST(Reweight, IdentityAnnihilationProduct) {
  Dataset ds = tiny(2);
  ds.schema = {numerical("a", 0, 1), numerical("b", 0, 1)};
  ds.featmap = build_featmap(ds.schema);
  ds.x = RowMatrix(2, 2);
  ds.x << 0.4, 0.7, 0.2, 1.0;
  ds.raw.reset();
  EXPECT_EQ(apply_reweight(ds, RowMatrix::Ones(2, 2)).x, ds.x);
  EXPECT_TRUE(apply_reweight(ds, RowMatrix::Zero(2, 2)).x.isZero(0.0));
  RowMatrix p(2, 2);
  p << 1, 0, 1, 1;
  const auto out = apply_reweight(ds, p);
  EXPECT_EQ(out.x(0, 0), 0.4);
  EXPECT_EQ(out.x(0, 1), 0.0);
  EXPECT_EQ(out.y, ds.y);
  EXPECT_THROW(apply_reweight(ds, RowMatrix::Ones(3, 2)), DataError);
}

TEST(Export, CsvRoundTripAndRelevance) {
  auto ds = gen_syn(SynKind::syn3, 50, 2);
  const auto csv = scratch("syn.csv").string();
  const auto rel = scratch("syn.relevance").string();
  write_csv(ds, csv);
  write_relevance(*ds.relevance, rel);
  auto back = load_csv(csv, syn_schema(), "_label");
  EXPECT_EQ(*back.raw, *ds.raw);
  EXPECT_EQ(back.x, ds.x);
  EXPECT_EQ(back.y, ds.y);
  EXPECT_EQ(read_relevance(rel, 50, 11), *ds.relevance);
}
