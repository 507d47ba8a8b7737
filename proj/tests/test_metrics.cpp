#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "maskmine/metrics.hpp"

using namespace maskmine;

namespace {

ByteGrid random_mask(Rng& rng, std::vector<int64_t> shape, double p = 0.5) {
  ByteGrid g(shape);
  for (auto& v : g.data) v = rng.bernoulli(p) ? 1 : 0;
  return g;
}

// brute-force flood fill used as the independent oracle
std::vector<int32_t> oracle_components(const ByteGrid& mask, Connectivity conn) {
  int64_t d = mask.shape[0], h = mask.shape[1], w = mask.shape[2];
  std::vector<int32_t> label(static_cast<size_t>(mask.numel()), -1);
  int32_t next = 0;
  for (int64_t s = 0; s < mask.numel(); ++s) {
    if (!mask[s] || label[static_cast<size_t>(s)] >= 0) continue;
    std::vector<int64_t> stack = {s};
    label[static_cast<size_t>(s)] = next;
    while (!stack.empty()) {
      int64_t cur = stack.back();
      stack.pop_back();
      int64_t cz = cur / (h * w), cy = (cur / w) % h, cx = cur % w;
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            int manhattan = std::abs(dz) + std::abs(dy) + std::abs(dx);
            if (manhattan == 0) continue;
            if (conn == Connectivity::six && manhattan != 1) continue;
            int64_t z = cz + dz, y = cy + dy, x = cx + dx;
            if (z < 0 || z >= d || y < 0 || y >= h || x < 0 || x >= w) continue;
            int64_t lin = (z * h + y) * w + x;
            if (mask[lin] && label[static_cast<size_t>(lin)] < 0) {
              label[static_cast<size_t>(lin)] = next;
              stack.push_back(lin);
            }
          }
    }
    ++next;
  }
  return label;
}

}  // namespace

TEST_CASE("dice basics") {
  ByteGrid a({2, 2});
  a.data = {1, 1, 0, 0};
  CHECK(dice_per_volume(a, a) == 1.0);

  ByteGrid b({2, 2});
  b.data = {0, 0, 1, 1};
  CHECK(dice_per_volume(a, b) == 0.0);

  ByteGrid empty({2, 2});
  CHECK(dice_per_volume(empty, empty) == 1.0);  // recorded convention
}

TEST_CASE("dice hand-count oracle: |P|=10 |G|=20 overlap 8") {
  ByteGrid pred({1, 5, 10}), gt({1, 5, 10});
  for (int i = 0; i < 10; ++i) pred[i] = 1;       // pixels 0..9
  for (int i = 2; i < 22; ++i) gt[i] = 1;         // pixels 2..21, overlap = 8
  CHECK_THAT(dice_per_volume(pred, gt), Catch::Matchers::WithinAbs(16.0 / 30.0, 1e-12));
}

TEST_CASE("error_counts basics") {
  ByteGrid gt({1, 4, 4});
  for (int i = 0; i < 5; ++i) gt[i] = 1;
  ConfusionCounts c = error_counts(gt, gt);
  CHECK(c.tp == 5);
  CHECK(c.tn == 11);
  CHECK(c.fp == 0);
  CHECK(c.fn == 0);

  ByteGrid ones({1, 4, 4});
  ones.fill(1);
  ByteGrid zeros({1, 4, 4});
  c = error_counts(ones, zeros);
  CHECK(c.fp == 16);
}

TEST_CASE("dice equals 2TP/(2TP+FP+FN) from error_counts") {
  Rng rng(31);
  for (int trial = 0; trial < 300; ++trial) {
    ByteGrid pred = random_mask(rng, {3, 5, 5}, rng.uniform(0.0, 1.0));
    ByteGrid gt = random_mask(rng, {3, 5, 5}, rng.uniform(0.0, 1.0));
    ConfusionCounts c = error_counts(pred, gt);
    double expect = (2 * c.tp + c.fp + c.fn) == 0
                        ? 1.0
                        : 2.0 * static_cast<double>(c.tp) /
                              static_cast<double>(2 * c.tp + c.fp + c.fn);
    REQUIRE(dice_per_volume(pred, gt) == expect);
  }
}

TEST_CASE("largest_component keeps the bigger of two blobs") {
  ByteGrid m({1, 5, 9});
  // 10-voxel blob on the left, 5-voxel blob on the right, separated
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 5; ++x) m.at3(0, y, x) = 1;
  for (int x = 7; x < 9; ++x) {
    m.at3(0, 3, x) = 1;
    m.at3(0, 4, x) = 1;
  }
  m.at3(0, 2, 8) = 1;
  ByteGrid out = largest_component(m);
  int64_t kept = 0;
  for (uint8_t v : out.data) kept += v;
  CHECK(kept == 10);
  CHECK(out.at3(0, 0, 0) == 1);
  CHECK(out.at3(0, 3, 7) == 0);
}

TEST_CASE("largest_component identity and empty cases") {
  ByteGrid m({2, 3, 3});
  m.at3(0, 1, 1) = 1;
  m.at3(1, 1, 1) = 1;
  CHECK(largest_component(m).data == m.data);

  ByteGrid empty({2, 3, 3});
  CHECK(largest_component(empty).data == empty.data);
}

TEST_CASE("largest_component matches flood-fill oracle on random masks") {
  Rng rng(37);
  for (int trial = 0; trial < 200; ++trial) {
    ByteGrid m = random_mask(rng, {6, 6, 6}, 0.25);
    for (Connectivity conn : {Connectivity::six, Connectivity::twenty_six}) {
      std::vector<int32_t> labels = oracle_components(m, conn);
      int32_t n_comp = 0;
      for (int32_t l : labels) n_comp = std::max(n_comp, l + 1);
      std::vector<int64_t> size(static_cast<size_t>(n_comp), 0);
      std::vector<int64_t> first(static_cast<size_t>(n_comp), -1);
      for (int64_t i = 0; i < m.numel(); ++i)
        if (labels[static_cast<size_t>(i)] >= 0) {
          size_t l = static_cast<size_t>(labels[static_cast<size_t>(i)]);
          ++size[l];
          if (first[l] < 0) first[l] = i;
        }
      int32_t best = -1;
      for (int32_t c = 0; c < n_comp; ++c)
        if (best < 0 || size[static_cast<size_t>(c)] > size[static_cast<size_t>(best)] ||
            (size[static_cast<size_t>(c)] == size[static_cast<size_t>(best)] &&
             first[static_cast<size_t>(c)] < first[static_cast<size_t>(best)]))
          best = c;
      ByteGrid expect(m.shape);
      for (int64_t i = 0; i < m.numel(); ++i)
        expect[i] = (best >= 0 && labels[static_cast<size_t>(i)] == best) ? 1 : 0;
      REQUIRE(largest_component(m, conn).data == expect.data);
    }
  }
}

TEST_CASE("volume-averaged mean is not voxel-pooled") {
  // two volumes of very different size with different per-volume dice
  ByteGrid small_pred({1, 1, 2}), small_gt({1, 1, 2});
  small_pred.data = {1, 0};
  small_gt.data = {1, 1};  // dice = 2/3
  ByteGrid big_pred({1, 10, 10}), big_gt({1, 10, 10});
  big_pred.fill(1);
  big_gt.fill(1);  // dice = 1
  double mean = (dice_per_volume(small_pred, small_gt) + dice_per_volume(big_pred, big_gt)) / 2.0;
  CHECK_THAT(mean, Catch::Matchers::WithinAbs((2.0 / 3.0 + 1.0) / 2.0, 1e-12));
  // pooled dice would be dominated by the big volume
  CHECK(mean < 0.99);
}
