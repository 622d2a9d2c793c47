// Copyright 2026 The cpcseg Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <gtest/gtest.h>

#include <cmath>

#include "cpcseg/cpcseg.hpp"

using namespace cpcseg;
using T = Tensor<double>;

namespace {

DissimilarityCurve curve_of(std::vector<double> v, std::size_t base = 1) {
  DissimilarityCurve c;
  c.scores = std::move(v);
  c.base = base;
  return c;
}

std::vector<double> random_unit(std::size_t d, Rng& rng) {
  std::normal_distribution<double> g;
  std::vector<double> v(d);
  double n = 0;
  for (auto& x : v) {
    x = g(rng);
    n += x * x;
  }
  for (auto& x : v) x /= std::sqrt(n);
  return v;
}

}  // namespace

TEST(Dissimilarity, IdenticalOrthogonalOpposite) {
  T z = T::from({4, 2}, {1, 0, 1, 0, 0, 2, 0, -3});
  auto c = dissimilarity_curve(z);
  ASSERT_EQ(c.scores.size(), 3u);
  EXPECT_DOUBLE_EQ(c.scores[0], -1.0);
  EXPECT_DOUBLE_EQ(c.scores[1], 0.0);
  EXPECT_DOUBLE_EQ(c.scores[2], 1.0);
  EXPECT_EQ(c.zero_vectors, 0u);
}

TEST(Dissimilarity, ZeroVectorsAndShortInput) {
  T z = T::from({3, 2}, {1, 0, 0, 0, 1, 1});
  auto c = dissimilarity_curve(z);
  EXPECT_EQ(c.scores, (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(c.zero_vectors, 2u);
  EXPECT_THROW(dissimilarity_curve(T::zeros({1, 3})), ShapeError);
}

TEST(Dissimilarity, ScoresBoundedAndLengthTMinusOne) {
  Rng rng = make_rng(1);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t rows = 2 + trial % 30;
    std::vector<double> v(rows * 5);
    for (auto& x : v) x = g(rng);
    auto c = dissimilarity_curve(T::from({rows, 5}, v));
    ASSERT_EQ(c.scores.size(), rows - 1);
    for (double s : c.scores) {
      EXPECT_GE(s, -1.0);
      EXPECT_LE(s, 1.0);
    }
  }
}

TEST(Peaks, IsolatedPeak) {
  EXPECT_EQ(find_peaks(std::vector<double>{-1, -1, 0.5, -1, -1}, 0.3, 1), (std::vector<std::size_t>{2}));
  auto seg = detect_peaks(curve_of({-1, -1, 0.5, -1, -1}), 0.3, 1);
  // Score i compares frames i and i+1, so the boundary starts frame 3.
  EXPECT_EQ(seg.frames, (std::vector<std::int64_t>{3}));
  EXPECT_EQ(seg.num_frames, 6);
  EXPECT_EQ(seg.provenance.source, Provenance::Source::kDetected);
}

TEST(Peaks, ConstantCurveHasNone) {
  EXPECT_TRUE(find_peaks(std::vector<double>(10, 0.3), 0.0, 1).empty());
}

TEST(Peaks, TwoPeaksWithHandProminences) {
  const std::vector<double> c{0, 0.9, 0.1, 0.8, 0};
  EXPECT_NEAR(peak_prominence(c, 1), 0.9, 1e-12);
  EXPECT_NEAR(peak_prominence(c, 3), 0.7, 1e-12);
  EXPECT_EQ(find_peaks(c, 0.5, 1), (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(find_peaks(c, 0.75, 1), (std::vector<std::size_t>{1}));
  // Closer than the separation: the higher one survives.
  EXPECT_EQ(find_peaks(c, 0.5, 3), (std::vector<std::size_t>{1}));
}

TEST(Peaks, PlateauResolvesLeftAndEqualHeightsKeepLeftmost) {
  EXPECT_EQ(find_peaks(std::vector<double>{0, 1, 1, 1, 0}, 0.5, 1), (std::vector<std::size_t>{1}));
  // A rise into the curve end is no maximum.
  EXPECT_TRUE(find_peaks(std::vector<double>{0, 1, 1}, 0.0, 1).empty());
  EXPECT_EQ(find_peaks(std::vector<double>{0, 1, 0, 1, 0}, 0.5, 3), (std::vector<std::size_t>{1}));
  EXPECT_THROW(find_peaks(std::vector<double>{0, 1, 0}, 0.5, 0), ConfigError);
}

TEST(Peaks, OutputSortedUniqueAndSeparated) {
  Rng rng = make_rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + trial % 60;
    std::vector<double> v(n);
    for (auto& x : v) x = trial % 4 == 0 ? std::round(u(rng) * 3) / 3 : u(rng);
    const std::size_t sep = 1 + trial % 4;
    const double th = (trial % 5) * 0.1;
    auto seg = detect_peaks(curve_of(v), th, sep);
    for (std::size_t i = 0; i < seg.frames.size(); ++i) {
      ASSERT_GE(seg.frames[i], 1);
      ASSERT_LT(seg.frames[i], seg.num_frames);
      if (i) {
        ASSERT_GE(seg.frames[i] - seg.frames[i - 1], std::int64_t(sep));
      }
      const std::size_t idx = std::size_t(seg.frames[i] - 1);
      ASSERT_GE(peak_prominence(v, idx), th);
      ASSERT_GT(v[idx], v[idx - 1]);
    }
  }
}

TEST(Peaks, PiecewiseConstantCodesRecoverChangePoints) {
  Rng rng = make_rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> z;
    std::vector<std::int64_t> truth;
    std::vector<double> code = random_unit(6, rng), prev;
    std::size_t frames = 0;
    double min_gap = 2.0;
    const std::size_t runs = 1 + trial % 7;
    for (std::size_t r = 0; r < runs; ++r) {
      if (r) {
        prev = code;
        code = random_unit(6, rng);
        double dot = 0;
        for (std::size_t d = 0; d < 6; ++d) dot += prev[d] * code[d];
        min_gap = std::min(min_gap, 1.0 - dot);
        truth.push_back(std::int64_t(frames));
      }
      const std::size_t len = 2 + (trial + r) % 5;
      for (std::size_t t = 0; t < len; ++t) z.insert(z.end(), code.begin(), code.end());
      frames += len;
    }
    auto c = dissimilarity_curve(T::from({frames, 6}, z));
    auto seg = detect_peaks(c, min_gap - 1e-9, 1);
    EXPECT_EQ(seg.frames, truth);
  }
}

TEST(Pool, Examples) {
  T z = T::from({2, 2}, {1, 1, 3, 3});
  Segmentation none;
  none.num_frames = 2;
  auto p = pool_segments(z, none);
  EXPECT_EQ(p.means.shape(), (Shape{1, 2}));
  EXPECT_DOUBLE_EQ(p.means.at(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(p.means.at(0, 1), 2.0);

  Rng rng = make_rng(4);
  T w = cpcseg::Tensor<double>::zeros({5, 3});
  std::normal_distribution<double> g;
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = g(rng);
  Segmentation every;
  every.num_frames = 5;
  every.frames = {1, 2, 3, 4};
  auto q = pool_segments(w, every);
  ASSERT_EQ(q.spans.size(), 5u);
  for (std::size_t i = 0; i < w.numel(); ++i) EXPECT_DOUBLE_EQ(q.means[i], w[i]);

  Segmentation bad;
  bad.frames = {7};
  EXPECT_THROW(pool_segments(w, bad), ShapeError);
}

TEST(Pool, WeightedSpanMeansReconstructGlobalMean) {
  Rng rng = make_rng(5);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + trial % 40, d = 3;
    T z = T::zeros({n, d});
    for (std::size_t i = 0; i < z.numel(); ++i) z[i] = g(rng);
    Segmentation s;
    s.num_frames = std::int64_t(n);
    for (std::size_t f = 1; f < n; ++f)
      if (rng() % 3 == 0) s.frames.push_back(std::int64_t(f));
    auto p = pool_segments(z, s);
    for (std::size_t c = 0; c < d; ++c) {
      double global = 0, rebuilt = 0;
      for (std::size_t t = 0; t < n; ++t) global += z.at(t, c);
      for (std::size_t j = 0; j < p.spans.size(); ++j)
        rebuilt += p.means.at(j, c) * double(p.spans[j].second - p.spans[j].first);
      EXPECT_NEAR(rebuilt / double(n), global / double(n), 1e-6);
    }
  }
}

TEST(Offset, Examples) {
  Segmentation s;
  s.num_frames = 20;
  s.frames = {5, 12};
  auto m = apply_offset(s, -10);
  EXPECT_EQ(m.ms(), (std::vector<double>{40, 110}));
  EXPECT_EQ(m.provenance.offset_ms, -10);
  EXPECT_EQ(apply_offset(s, 0), s);

  Segmentation z;
  z.num_frames = 20;
  z.frames = {0, 3};
  EXPECT_EQ(apply_offset(z, -10).frames, (std::vector<std::int64_t>{2}));
  EXPECT_EQ(apply_offset(z, -10, true).frames, (std::vector<std::int64_t>{0, 2}));
  EXPECT_THROW(apply_offset(s, 15), ConfigError);
}

TEST(Offset, RoundTripWithoutDrops) {
  Rng rng = make_rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    Segmentation s;
    s.num_frames = 50;
    for (std::int64_t f = 10; f < 40; ++f)
      if (rng() % 4 == 0) s.frames.push_back(f);
    const std::int64_t delta = (std::int64_t(rng() % 11) - 5) * 10;
    auto back = apply_offset(apply_offset(s, delta), -delta);
    EXPECT_EQ(back.frames, s.frames);
    EXPECT_EQ(back.provenance, s.provenance);
  }
}

TEST(WordBoundaries, TwoOrthogonalRunsGiveOneJunction) {
  // Six segments: three with code e0, three with e1.
  std::vector<double> v;
  for (int j = 0; j < 6; ++j) {
    v.push_back(j < 3 ? 1.0 : 0.0);
    v.push_back(j < 3 ? 0.0 : 1.0);
  }
  SegmentSequence<double> seq{T::from({6, 2}, v), {{0, 4}, {4, 9}, {9, 11}, {11, 15}, {15, 18}, {18, 25}}};
  auto w = word_boundaries(seq, 0.5, 1);
  EXPECT_EQ(w.frames, (std::vector<std::int64_t>{11}));
  EXPECT_EQ(w.num_frames, 25);
}

TEST(WordBoundaries, TooFewSegments) {
  std::size_t too_few = 0;
  SegmentSequence<double> one{T::from({1, 2}, {1, 0}), {{0, 10}}};
  EXPECT_TRUE(word_boundaries(one, 0.0, 1, &too_few).frames.empty());
  EXPECT_EQ(too_few, 1u);
  SegmentSequence<double> two{T::from({2, 2}, {1, 0, -1, 0}), {{0, 4}, {4, 10}}};
  EXPECT_LE(word_boundaries(two, 0.0, 1, &too_few).frames.size(), 1u);
  SegmentSequence<double> bad{T::from({2, 2}, {1, 0, -1, 0}), {{0, 4}}};
  EXPECT_THROW(word_boundaries(bad, 0.0, 1), ShapeError);
}

TEST(BoundaryFiles, RoundTripAndErrors) {
  std::vector<BoundaryMark> marks{{120, BoundaryKind::kWord}, {50, BoundaryKind::kPhone},
                                  {120, BoundaryKind::kPhone}};
  const std::string text = boundary_file_text(marks);
  EXPECT_EQ(text, "50\tphone\n120\tphone\n120\tword\n");
  auto back = parse_boundary_text(text);
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(boundary_times(back, BoundaryKind::kPhone), (std::vector<double>{50, 120}));
  EXPECT_EQ(boundary_times(back, BoundaryKind::kWord), (std::vector<double>{120}));
  EXPECT_THROW(parse_boundary_text("50 phone\n"), DataError);
  EXPECT_THROW(parse_boundary_text("x\tphone\n"), DataError);
  EXPECT_THROW(parse_boundary_text("50\tsyllable\n"), DataError);
  EXPECT_THROW(parse_boundary_text("60\tphone\n50\tphone\n"), DataError);
}

TEST(Instrumentation, DetectPeaksIsCounted) {
  const auto before = counters().detect_peaks_calls;
  detect_peaks(curve_of({0, 1, 0}), 0.0, 1);
  EXPECT_EQ(counters().detect_peaks_calls, before + 1);
}
