#include <catch2/catch_amalgamated.hpp>

#include "maskmine/metrics.hpp"
#include "maskmine/mining.hpp"

using namespace maskmine;

namespace {

ByteGrid random_mask(Rng& rng, std::vector<int64_t> shape, double p = 0.5) {
  ByteGrid g(shape);
  for (auto& v : g.data) v = rng.bernoulli(p) ? 1 : 0;
  return g;
}

// independent per-voxel truth table
uint8_t oracle_class(uint8_t pred, uint8_t gt) {
  if (pred == 0 && gt == 0) return 0;
  if (pred == 1 && gt == 0) return 1;
  if (pred == 0 && gt == 1) return 2;
  return 3;
}

}  // namespace

TEST_CASE("mine_error_mask matches the truth table") {
  ByteGrid pred({2, 2});
  ByteGrid gt({2, 2});
  pred.data = {0, 1, 0, 1};
  gt.data = {0, 0, 1, 1};
  ErrorMask e = mine_error_mask(pred, gt);
  CHECK(e.voxels.data == std::vector<uint8_t>({0, 1, 2, 3}));
}

TEST_CASE("mine_error_mask perfect and complement predictions") {
  Rng rng(7);
  ByteGrid gt = random_mask(rng, {4, 4, 4});
  ErrorMask perfect = mine_error_mask(gt, gt);
  for (uint8_t v : perfect.voxels.data) CHECK((v == kTrueNegative || v == kTruePositive));

  ByteGrid inv(gt.shape);
  for (int64_t i = 0; i < gt.numel(); ++i) inv[i] = 1 - gt[i];
  ErrorMask wrong = mine_error_mask(inv, gt);
  for (uint8_t v : wrong.voxels.data) CHECK((v == kFalsePositive || v == kFalseNegative));
}

TEST_CASE("mine_error_mask input validation") {
  ByteGrid a({2, 2}), b({2, 3});
  CHECK_THROWS_AS(mine_error_mask(a, b), ShapeError);
  ByteGrid c({2, 2});
  c.data[0] = 2;
  CHECK_THROWS_AS(mine_error_mask(c, a), DomainError);
}

TEST_CASE("error mask oracle over random pairs") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int64_t> shape = {rng.uniform_int(1, 6), rng.uniform_int(1, 6),
                                  rng.uniform_int(1, 6)};
    ByteGrid pred = random_mask(rng, shape);
    ByteGrid gt = random_mask(rng, shape);
    ErrorMask e = mine_error_mask(pred, gt);
    for (int64_t i = 0; i < pred.numel(); ++i)
      REQUIRE(e.voxels[i] == oracle_class(pred[i], gt[i]));
  }
}

TEST_CASE("build_mining_targets pwce variant is one-hot") {
  Rng rng(3);
  ByteGrid pred = random_mask(rng, {4, 4});
  ByteGrid gt = random_mask(rng, {4, 4});
  ErrorMask e = mine_error_mask(pred, gt);
  MiningTargets t = build_mining_targets(e, gt, MiningVariant::pwce);
  std::array<int64_t, 4> counts{};
  for (uint8_t v : e.voxels.data) ++counts[v];
  for (int c = 0; c < 4; ++c) {
    int64_t sum = 0;
    for (uint8_t v : t.channels[static_cast<size_t>(c)].data) sum += v;
    CHECK(sum == counts[static_cast<size_t>(c)]);
  }
  // mutually exclusive
  for (int64_t i = 0; i < gt.numel(); ++i) {
    int total = 0;
    for (int c = 0; c < 4; ++c) total += t.channels[static_cast<size_t>(c)][i];
    CHECK(total == 1);
  }
}

TEST_CASE("build_mining_targets dice variant replaces TP with ground truth") {
  Rng rng(5);
  ByteGrid pred = random_mask(rng, {6, 6});
  ByteGrid gt = random_mask(rng, {6, 6});
  ErrorMask e = mine_error_mask(pred, gt);
  MiningTargets t = build_mining_targets(e, gt, MiningVariant::dice);
  CHECK(t.channels[kTruePositive].data == gt.data);
  // FN voxels carry signal on both channel 2 and channel 3
  bool saw_overlap = false;
  for (int64_t i = 0; i < gt.numel(); ++i) {
    if (e.voxels[i] == kFalseNegative) {
      CHECK(t.channels[kFalseNegative][i] == 1);
      CHECK(t.channels[kTruePositive][i] == 1);
      saw_overlap = true;
    }
    // channel3 = channel(FN) ∪ one-hot(TP)
    uint8_t expected = (e.voxels[i] == kFalseNegative || e.voxels[i] == kTruePositive) ? 1 : 0;
    CHECK(t.channels[kTruePositive][i] == expected);
  }
  CHECK(saw_overlap);
}

TEST_CASE("dice variant degenerates to pwce variant for a perfect predictor") {
  Rng rng(9);
  ByteGrid gt = random_mask(rng, {5, 5});
  ErrorMask e = mine_error_mask(gt, gt);
  MiningTargets a = build_mining_targets(e, gt, MiningVariant::pwce);
  MiningTargets b = build_mining_targets(e, gt, MiningVariant::dice);
  for (int c = 0; c < 4; ++c)
    CHECK(a.channels[static_cast<size_t>(c)].data == b.channels[static_cast<size_t>(c)].data);
}

TEST_CASE("collapse_to_binary groups classes by floor(argmax/2)") {
  FloatGrid logits({4, 1});
  logits.data = {0.f, 0.f, 0.f, 10.f};  // one-hot class 3
  CHECK(collapse_to_binary(logits).data == std::vector<uint8_t>({1}));
  logits.data = {0.f, 10.f, 0.f, 0.f};  // class 1
  CHECK(collapse_to_binary(logits).data == std::vector<uint8_t>({0}));
  logits.data = {1.f, 1.f, 1.f, 1.f};  // tie -> class 0
  CHECK(collapse_to_binary(logits).data == std::vector<uint8_t>({0}));
}

TEST_CASE("collapse equivalence: floor(argmax/2) == indicator(argmax in {2,3})") {
  Rng rng(13);
  for (int trial = 0; trial < 2000; ++trial) {
    FloatGrid logits({4, 1});
    for (auto& v : logits.data)
      v = rng.bernoulli(0.2) ? 0.f : static_cast<float>(rng.normal());  // force occasional ties
    int best = 0;
    for (int c = 1; c < 4; ++c)
      if (logits.data[static_cast<size_t>(c)] > logits.data[static_cast<size_t>(best)]) best = c;
    uint8_t expect = (best == 2 || best == 3) ? 1 : 0;
    CHECK(collapse_to_binary(logits).data[0] == expect);
  }
}

TEST_CASE("reconstruction identity over random mask pairs") {
  Rng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<int64_t> shape = {rng.uniform_int(1, 4), rng.uniform_int(1, 8),
                                  rng.uniform_int(1, 8)};
    ByteGrid pred = random_mask(rng, shape);
    ByteGrid gt = random_mask(rng, shape);
    ErrorMask e = mine_error_mask(pred, gt);
    ByteGrid back = collapse_to_binary(one_hot_error(e));
    REQUIRE(back.data == gt.data);
  }
}

TEST_CASE("prediction identity: err in {FP,TP} iff pred == 1") {
  Rng rng(19);
  ByteGrid pred = random_mask(rng, {6, 6});
  ByteGrid gt = random_mask(rng, {6, 6});
  ErrorMask e = mine_error_mask(pred, gt);
  for (int64_t i = 0; i < pred.numel(); ++i) {
    bool predicted = e.voxels[i] == kFalsePositive || e.voxels[i] == kTruePositive;
    CHECK(predicted == (pred[i] == 1));
  }
}

TEST_CASE("tp_channel_mask thresholds channel 3") {
  FloatGrid probs({4, 2, 2});
  probs.fill(0.f);
  for (int64_t i = 0; i < 4; ++i) probs[3 * 4 + i] = 0.9f;
  ByteGrid m = tp_channel_mask(probs);
  for (uint8_t v : m.data) CHECK(v == 1);

  probs.fill(0.5f);  // boundary: >= keeps the voxel
  CHECK(tp_channel_mask(probs).data == std::vector<uint8_t>(4, 1));

  CHECK_THROWS_AS(tp_channel_mask(probs, 0.f), ParameterError);
  CHECK_THROWS_AS(tp_channel_mask(probs, 1.f), ParameterError);
}

TEST_CASE("tp_channel_mask elementwise oracle") {
  Rng rng(23);
  FloatGrid probs({4, 3, 3});
  for (auto& v : probs.data) v = static_cast<float>(rng.uniform());
  ByteGrid m = tp_channel_mask(probs, 0.5f);
  for (int64_t i = 0; i < 9; ++i) CHECK(m[i] == (probs[3 * 9 + i] >= 0.5f ? 1 : 0));
}

TEST_CASE("error-mask class histogram equals confusion counts") {
  Rng rng(29);
  ByteGrid pred = random_mask(rng, {4, 8, 8});
  ByteGrid gt = random_mask(rng, {4, 8, 8});
  ErrorMask e = mine_error_mask(pred, gt);
  std::array<int64_t, 4> hist{};
  for (uint8_t v : e.voxels.data) ++hist[v];
  ConfusionCounts c = error_counts(pred, gt);
  CHECK(hist[kTrueNegative] == c.tn);
  CHECK(hist[kFalsePositive] == c.fp);
  CHECK(hist[kFalseNegative] == c.fn);
  CHECK(hist[kTruePositive] == c.tp);
}
