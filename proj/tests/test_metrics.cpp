#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "voxseg/metrics.hpp"

using namespace voxseg;
namespace fs = std::filesystem;

namespace {

LabelVolume blank(Shape3 s, int classes = 2, Spacing3 sp = {1, 1, 1}) {
  return LabelVolume(s, sp, classes);
}

void fill_box(LabelVolume& lab, std::array<int, 3> lo, std::array<int, 3> hi, std::uint8_t cls) {
  for (int z = lo[0]; z < hi[0]; ++z)
    for (int y = lo[1]; y < hi[1]; ++y)
      for (int x = lo[2]; x < hi[2]; ++x) lab.at(z, y, x) = cls;
}

LabelVolume random_blobs(Shape3 s, int classes, std::uint64_t seed, Spacing3 sp = {1, 1, 1}) {
  LabelVolume lab(s, sp, classes);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> cz(0, s.d - 1), cy(0, s.w - 1), cx(0, s.h - 1);
  std::uniform_real_distribution<double> rad(1.0, s.d / 2.5);
  for (int cls = 1; cls < classes; ++cls) {
    const int zc = cz(rng), yc = cy(rng), xc = cx(rng);
    const double r = rad(rng);
    for (int z = 0; z < s.d; ++z)
      for (int y = 0; y < s.w; ++y)
        for (int x = 0; x < s.h; ++x)
          if ((z - zc) * (z - zc) + (y - yc) * (y - yc) + (x - xc) * (x - xc) <= r * r)
            lab.at(z, y, x) = std::uint8_t(cls);
  }
  return lab;
}

}  // namespace

TEST(Dsc, ClosedForms) {
  auto gt = blank({8, 8, 8});
  fill_box(gt, {2, 2, 2}, {4, 4, 4}, 1);
  EXPECT_EQ(1.0, dsc(gt, gt, 1));

  auto pred = blank({8, 8, 8});
  fill_box(pred, {5, 5, 5}, {7, 7, 7}, 1);
  EXPECT_EQ(0.0, dsc(pred, gt, 1));  // disjoint masks

  // |P| = 4, |G| = 4, |P and G| = 2
  auto p2 = blank({8, 8, 8}), g2 = blank({8, 8, 8});
  fill_box(g2, {0, 0, 0}, {1, 1, 4}, 1);
  fill_box(p2, {0, 0, 2}, {1, 1, 6}, 1);
  EXPECT_EQ(0.5, dsc(p2, g2, 1));
}

TEST(Dsc, EmptyConventions) {
  auto a = blank({4, 4, 4}), b = blank({4, 4, 4});
  EXPECT_EQ(1.0, dsc(a, b, 1));  // both empty
  b.at(1, 1, 1) = 1;
  EXPECT_EQ(0.0, dsc(a, b, 1));  // exactly one empty
}

TEST(Dsc, SymmetryRangeAndShapeChecks) {
  const auto a = random_blobs({10, 10, 10}, 3, 1);
  const auto b = random_blobs({10, 10, 10}, 3, 2);
  for (int cls = 0; cls < 3; ++cls) {
    const double d = dsc(a, b, cls);
    EXPECT_EQ(d, dsc(b, a, cls));
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
  }
  auto c = blank({9, 10, 10}, 3);
  EXPECT_THROW(dsc(a, c, 1), ShapeError);
  auto d2 = blank({10, 10, 10}, 3, {2, 1, 1});
  EXPECT_THROW(dsc(a, d2, 1), ShapeError);
}

TEST(Nsd, IdentityIsOne) {
  const auto a = random_blobs({10, 10, 10}, 2, 3);
  EXPECT_EQ(1.0, nsd(a, a, 1, 0.0));
}

TEST(Nsd, ShiftedCubeClosedForms) {
  // 8^3 cube vs the same cube shifted one voxel along an axis, 1mm spacing
  auto a = blank({12, 12, 12});
  auto b = blank({12, 12, 12});
  fill_box(a, {1, 2, 2}, {9, 10, 10}, 1);
  fill_box(b, {2, 2, 2}, {10, 10, 10}, 1);
  EXPECT_EQ(1.0, nsd(a, b, 1, 1.0));
  EXPECT_LT(nsd(a, b, 1, 0.0), 1.0);
}

TEST(Nsd, EmptyConventionsAndMonotonicity) {
  auto a = blank({6, 6, 6}), b = blank({6, 6, 6});
  EXPECT_EQ(1.0, nsd(a, b, 1, 0.5));
  b.at(3, 3, 3) = 1;
  EXPECT_EQ(0.0, nsd(a, b, 1, 0.5));

  const auto p = random_blobs({10, 10, 10}, 2, 4);
  const auto g = random_blobs({10, 10, 10}, 2, 5);
  double prev = -1;
  for (double tol : {0.0, 0.5, 1.0, 2.0, 4.0, 8.0}) {
    const double v = nsd(p, g, 1, tol);
    EXPECT_GE(v, prev);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_EQ(v, nsd(g, p, 1, tol));
    prev = v;
  }
}

// the distance-transform path must reproduce the brute-force oracle
TEST(Nsd, DistanceTransformMatchesBruteForce) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 8; ++trial) {
    const Spacing3 sp{1.0, 0.5, 2.0};
    const auto p = random_blobs({12, 10, 8}, 3, 100 + trial, sp);
    const auto g = random_blobs({12, 10, 8}, 3, 200 + trial, sp);
    for (int cls = 1; cls < 3; ++cls)
      for (double tol : {0.3, 0.8, 1.3, 2.6}) {
        const double bf = nsd(p, g, cls, tol, SurfaceDistanceMode::brute_force);
        const double dt = nsd(p, g, cls, tol, SurfaceDistanceMode::distance_transform);
        EXPECT_NEAR(bf, dt, 1e-12) << "cls=" << cls << " tol=" << tol;
      }
  }
}

TEST(Evaluate, PerfectCaseAndAggregates) {
  const auto dir =
      fs::temp_directory_path() / ("voxseg_metrics_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir / "gt");
  fs::create_directories(dir / "pred");

  // case A: pred == gt -> DSC 1; case B: |P|=|G|=4 with overlap 2 -> DSC 0.5
  auto gt_a = blank({8, 8, 8});
  fill_box(gt_a, {2, 2, 2}, {5, 5, 5}, 1);
  save_volume(gt_a, dir / "gt" / "case_a");
  save_volume(gt_a, dir / "pred" / "case_a");

  auto gt_b = blank({8, 8, 8}), pred_b = blank({8, 8, 8});
  fill_box(gt_b, {0, 0, 0}, {1, 1, 4}, 1);
  fill_box(pred_b, {0, 0, 2}, {1, 1, 6}, 1);
  save_volume(gt_b, dir / "gt" / "case_b");
  save_volume(pred_b, dir / "pred" / "case_b");

  const auto rep = evaluate_dataset(dir / "pred", dir / "gt", {"organ"});
  ASSERT_EQ(2u, rep.cases.size());
  EXPECT_EQ(1.0, rep.cases[0].dsc_mean);
  EXPECT_EQ(0.5, rep.cases[1].dsc_mean);
  EXPECT_EQ(0.75, rep.aggregate.dsc_mean);

  const auto csv = rep.to_csv();
  EXPECT_EQ(0u, csv.find("case,mean,organ\n"));
  EXPECT_NE(csv.find("\nmean,0.75"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Evaluate, MissingPredictionListedAndExcluded) {
  const auto dir =
      fs::temp_directory_path() / ("voxseg_metrics_miss_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir / "gt");
  fs::create_directories(dir / "pred");
  auto gt = blank({6, 6, 6});
  fill_box(gt, {1, 1, 1}, {3, 3, 3}, 1);
  save_volume(gt, dir / "gt" / "case_x");
  save_volume(gt, dir / "gt" / "case_y");
  save_volume(gt, dir / "pred" / "case_x");

  const auto rep = evaluate_dataset(dir / "pred", dir / "gt");
  ASSERT_EQ(1u, rep.cases.size());
  ASSERT_EQ(1u, rep.missing.size());
  EXPECT_EQ("case_y", rep.missing[0]);
  EXPECT_EQ(1.0, rep.aggregate.dsc_mean);
  EXPECT_NE(rep.to_csv().find("# missing_prediction,case_y"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Evaluate, NsdColumnsBehindFlag) {
  const auto dir =
      fs::temp_directory_path() / ("voxseg_metrics_nsd_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir / "gt");
  fs::create_directories(dir / "pred");
  auto gt = blank({6, 6, 6});
  fill_box(gt, {1, 1, 1}, {4, 4, 4}, 1);
  save_volume(gt, dir / "gt" / "c");
  save_volume(gt, dir / "pred" / "c");
  EXPECT_EQ(std::string::npos, evaluate_dataset(dir / "pred", dir / "gt").to_csv().find("nsd_"));
  const auto rep = evaluate_dataset(dir / "pred", dir / "gt", {}, 1.0);
  EXPECT_NE(rep.to_csv().find("nsd_mean,nsd_class_1"), std::string::npos);
  EXPECT_EQ(1.0, rep.aggregate.nsd_mean);
  fs::remove_all(dir);
}
