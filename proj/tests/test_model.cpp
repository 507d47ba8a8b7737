#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "maskmine/losses.hpp"
#include "maskmine/unet.hpp"

using namespace maskmine;
namespace fs = std::filesystem;

namespace {

FloatGrid random_input(Rng& rng, std::vector<int64_t> shape) {
  FloatGrid x(shape);
  for (auto& v : x.data) v = static_cast<float>(rng.uniform());
  return x;
}

std::vector<float> all_param_values(Model& m) {
  std::vector<float> out;
  for (nn::Param* p : m.parameters())
    out.insert(out.end(), p->value.data.begin(), p->value.data.end());
  return out;
}

}  // namespace

TEST_CASE("2D shape contract: depth 1, base 4, in 3, out 2 on 32x32") {
  ModelConfig cfg;
  cfg.dims = 2;
  cfg.depth = 1;
  cfg.base_channels = 4;
  cfg.in_channels = 3;
  Model m(cfg, Rng(0));
  Rng rng(1);
  FloatGrid x = random_input(rng, {1, 3, 32, 32});
  FloatGrid y = m.forward(x, false);
  CHECK(y.shape == std::vector<int64_t>({1, 2, 32, 32}));
}

TEST_CASE("3D shape contract: depth 2 on 16x32x32") {
  ModelConfig cfg;
  cfg.dims = 3;
  cfg.depth = 2;
  cfg.base_channels = 4;
  cfg.in_channels = 1;
  Model m(cfg, Rng(0));
  Rng rng(1);
  FloatGrid x = random_input(rng, {1, 1, 16, 32, 32});
  FloatGrid y = m.forward(x, false);
  CHECK(y.shape == std::vector<int64_t>({1, 2, 16, 32, 32}));
}

TEST_CASE("shape preservation over random valid shapes and block types") {
  Rng rng(2);
  for (BlockType b : {BlockType::basic, BlockType::residual, BlockType::dense}) {
    for (bool se : {false, true}) {
      ModelConfig cfg;
      cfg.dims = 2;
      cfg.depth = static_cast<int>(rng.uniform_int(1, 2));
      cfg.base_channels = 4;
      cfg.in_channels = static_cast<int64_t>(rng.uniform_int(1, 3));
      cfg.block = b;
      cfg.se_enabled = se;
      Model m(cfg, Rng(3));
      int64_t mult = 1 << cfg.depth;
      int64_t h = mult * rng.uniform_int(1, 4);
      int64_t w = mult * rng.uniform_int(1, 4);
      FloatGrid x = random_input(rng, {2, cfg.in_channels, h, w});
      FloatGrid y = m.forward(x, false);
      REQUIRE(y.shape == std::vector<int64_t>({2, 2, h, w}));
    }
  }
}

TEST_CASE("same config and seed give identical initial parameters") {
  ModelConfig cfg;
  cfg.base_channels = 4;
  Model a(cfg, Rng(42));
  Model b(cfg, Rng(42));
  CHECK(all_param_values(a) == all_param_values(b));
}

TEST_CASE("input too small or non-divisible raises a configuration error") {
  ModelConfig cfg;
  cfg.depth = 3;
  cfg.base_channels = 2;
  cfg.in_channels = 1;
  Model m(cfg, Rng(0));
  Rng rng(1);
  FloatGrid x = random_input(rng, {1, 1, 4, 4});  // smaller than 2^3
  CHECK_THROWS_AS(m.forward(x, false), ConfigError);
  FloatGrid x2 = random_input(rng, {1, 1, 24, 20});  // 20 not divisible by 8
  CHECK_THROWS_AS(m.forward(x2, false), ConfigError);
}

TEST_CASE("channel mismatch raises a shape error") {
  ModelConfig cfg;
  cfg.in_channels = 3;
  cfg.base_channels = 2;
  cfg.depth = 1;
  Model m(cfg, Rng(0));
  Rng rng(1);
  FloatGrid x = random_input(rng, {1, 1, 8, 8});
  CHECK_THROWS_AS(m.forward(x, false), ShapeError);
}

TEST_CASE("forward is deterministic in eval mode and batch-consistent") {
  ModelConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 4;
  cfg.in_channels = 1;
  Model m(cfg, Rng(5));
  Rng rng(6);
  FloatGrid x1 = random_input(rng, {1, 1, 16, 16});
  FloatGrid batch({2, 1, 16, 16});
  std::copy(x1.data.begin(), x1.data.end(), batch.data.begin());
  std::copy(x1.data.begin(), x1.data.end(), batch.data.begin() + x1.numel());

  FloatGrid y = m.forward(batch, false);
  for (int64_t i = 0; i < y.numel() / 2; ++i) REQUIRE(y[i] == y[y.numel() / 2 + i]);

  FloatGrid y2 = m.forward(batch, false);
  REQUIRE(y.data == y2.data);
}

TEST_CASE("append_error_head preserves all pre-existing weights bitwise") {
  ModelConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 8;
  cfg.in_channels = 3;
  cfg.se_enabled = true;
  cfg.block = BlockType::residual;
  Model m(cfg, Rng(7));
  Rng rng(8);
  FloatGrid x = random_input(rng, {1, 3, 16, 16});

  std::vector<float> before = all_param_values(m);
  FloatGrid feat_before = m.features(x);
  int64_t count_before = m.parameter_count();

  m.append_error_head(Rng(9));

  FloatGrid feat_after = m.features(x);
  CHECK(feat_before.data == feat_after.data);

  // every pre-existing parameter bitwise unchanged
  std::vector<float> after = all_param_values(m);
  REQUIRE(after.size() > before.size());
  for (size_t i = 0; i < before.size(); ++i) REQUIRE(before[i] == after[i]);

  // analytic parameter count of a 1x1 convolution: C*4 weights + 4 biases
  CHECK(m.parameter_count() - count_before == m.feature_channels() * 4 + 4);

  // 4 output channels on the mining head
  FloatGrid logits = m.forward(x, false, Head::error);
  CHECK(logits.shape == std::vector<int64_t>({1, 4, 16, 16}));

  // refuse double-append
  CHECK_THROWS_AS(m.append_error_head(Rng(10)), ConsistencyError);
}

TEST_CASE("checkpoint round trip reproduces parameters and config") {
  fs::path dir = fs::temp_directory_path() / "maskmine_test_ckpt";
  fs::create_directories(dir);
  ModelConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 4;
  cfg.in_channels = 3;
  cfg.block = BlockType::dense;
  Model m(cfg, Rng(11));
  m.append_error_head(Rng(12));

  Checkpoint::save(m, dir / "m.ckpt");
  Model back = Checkpoint::load(dir / "m.ckpt");
  CHECK(all_param_values(back) == all_param_values(m));
  CHECK(back.has_error_head());
  CHECK(Checkpoint::peek_head(dir / "m.ckpt") == Head::error);

  // load into a 2-channel expectation -> consistency error
  Model fresh(cfg, Rng(13));
  CHECK_THROWS_AS(Checkpoint::load_into(fresh, dir / "m.ckpt"), ConsistencyError);

  // identical outputs after round trip
  Rng rng(14);
  FloatGrid x = random_input(rng, {1, 3, 8, 8});
  FloatGrid y1 = m.forward(x, false, Head::error);
  FloatGrid y2 = back.forward(x, false, Head::error);
  CHECK(y1.data == y2.data);
}

TEST_CASE("gradients flow: one Adam step on a tiny net reduces loss") {
  for (BlockType b : {BlockType::basic, BlockType::residual, BlockType::dense}) {
    ModelConfig cfg;
    cfg.depth = 1;
    cfg.base_channels = 4;
    cfg.in_channels = 1;
    cfg.block = b;
    cfg.se_enabled = true;
    Model m(cfg, Rng(15));

    Rng rng(16);
    FloatGrid x = random_input(rng, {2, 1, 8, 8});
    std::vector<uint8_t> target(2 * 64);
    for (auto& t : target) t = rng.bernoulli(0.5);
    std::vector<float> w(target.size(), 1.f);

    nn::AdamConfig ac;
    ac.lr = 1e-2f;
    nn::Adam opt(m.parameters(), ac);

    float first = 0, last = 0;
    for (int step = 0; step < 30; ++step) {
      FloatGrid logits = m.forward(x, true);
      std::span<const float> ls(logits.ptr(), logits.data.size());
      auto lv = pwce_loss<float>(ls, target, w);
      if (step == 0) first = lv.value;
      last = lv.value;
      FloatGrid dlogits(logits.shape);
      std::copy(lv.grad.begin(), lv.grad.end(), dlogits.data.begin());
      opt.zero_grad();
      m.backward(dlogits);
      opt.step();
    }
    INFO("block type " << to_string(b));
    CHECK(last < 0.5f * first);
  }
}

TEST_CASE("network analytic gradient matches finite differences on a few weights") {
  ModelConfig cfg;
  cfg.depth = 1;
  cfg.base_channels = 2;
  cfg.in_channels = 1;
  cfg.batch_norm = false;  // keep the check numerically clean
  Model m(cfg, Rng(17));

  Rng rng(18);
  FloatGrid x = random_input(rng, {1, 1, 8, 8});
  std::vector<uint8_t> target(64);
  for (auto& t : target) t = rng.bernoulli(0.5);
  std::vector<float> w(64, 1.f);

  auto loss_at = [&]() {
    FloatGrid logits = m.forward(x, true);
    std::span<const float> ls(logits.ptr(), logits.data.size());
    return pwce_loss<float>(ls, target, w).value;
  };

  FloatGrid logits = m.forward(x, true);
  std::span<const float> ls(logits.ptr(), logits.data.size());
  auto lv = pwce_loss<float>(ls, target, w);
  for (nn::Param* p : m.parameters()) p->zero_grad();
  FloatGrid dlogits(logits.shape);
  std::copy(lv.grad.begin(), lv.grad.end(), dlogits.data.begin());
  m.backward(dlogits);

  Rng pick(19);
  auto params = m.parameters();
  for (int trial = 0; trial < 12; ++trial) {
    nn::Param* p = params[static_cast<size_t>(pick.uniform_int(0, static_cast<int64_t>(params.size()) - 1))];
    int64_t idx = pick.uniform_int(0, p->numel() - 1);
    float orig = p->value[idx];
    const float h = 1e-3f;
    p->value[idx] = orig + h;
    float fp = loss_at();
    p->value[idx] = orig - h;
    float fm = loss_at();
    p->value[idx] = orig;
    float numeric = (fp - fm) / (2 * h);
    float analytic = p->grad[idx];
    REQUIRE_THAT(analytic, Catch::Matchers::WithinAbs(numeric, 2e-3 + 0.02 * std::abs(numeric)));
  }
}
