#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "ccenet/ccenet.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace ccenet;
namespace fs = std::filesystem;

namespace {

Tensor row(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor(Shape{1, 1, 1, n}, std::move(v));
}

ModelConfig small_config() {
  ModelConfig c;
  c.input_size = 32;
  c.encoder_channels = {4, 8, 8, 8};
  c.ctx_channels = 8;
  c.batch_size = 2;
  c.total_iters = 4;
  return c;
}

bool has_prefix(const TensorList& l, const std::string& prefix) {
  for (const auto& p : l) {
    if (p.name.rfind(prefix, 0) == 0) return true;
  }
  return false;
}

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("ccenet_test_model_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// losses

TEST(WbceTest, HalfProbabilityGolden) {
  EXPECT_NEAR(wbce_loss(row({0.5, 0.5}), row({1, 0})).item(), std::log(2.0) / 2.0, 1e-12);
}

TEST(WbceTest, PerfectPredictionIsNearZero) {
  Tensor y = row({1, 0, 0, 1, 0});
  EXPECT_LE(wbce_loss(y, y).item(), std::log(1.0 / (1.0 - 1e-7)) + 1e-15);
}

TEST(WbceTest, DegenerateMasksUseClampedWeight) {
  Tensor p = row({0.2, 0.7, 0.4, 0.9});
  const double pos = std::log(0.2) + std::log(0.7) + std::log(0.4) + std::log(0.9);
  EXPECT_NEAR(wbce_loss(p, Tensor(p.shape(), 1.0)).item(), -0.05 * pos / 4.0, 1e-14);
  const double neg = std::log(0.8) + std::log(0.3) + std::log(0.6) + std::log(0.1);
  EXPECT_NEAR(wbce_loss(p, Tensor(p.shape(), 0.0)).item(), -0.05 * neg / 4.0, 1e-14);
}

TEST(WbceTest, FiniteAtExtremeProbabilities) {
  const double v = wbce_loss(row({0.0, 1.0, 0.0}), row({1, 0, 0})).item();
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_GT(v, 0.0);
}

TEST(DiceTest, GoldenCases) {
  EXPECT_EQ(dice_loss(row({1, 0}), row({1, 0}), 1.0).item(), 0.0);
  EXPECT_NEAR(dice_loss(row({0, 0}), row({1, 1}), 1.0).item(), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(dice_loss(row({0, 0}), row({0, 0}), 1.0).item(), 0.0);
}

TEST(JointLossTest, LambdaZeroIsPureCrossEntropy) {
  Tensor p = row({0.3, 0.8, 0.6});
  Tensor y = row({0, 1, 1});
  LossTerms t = joint_loss(p, Tensor(), y, 0.0, 1.0);
  EXPECT_EQ(t.total.item(), wbce_loss(p, y).item());
}

TEST(JointLossTest, SingleBranchIsWbcePlusLambdaDice) {
  Tensor p = row({0.3, 0.8, 0.6});
  Tensor y = row({0, 1, 1});
  LossTerms t = joint_loss(p, Tensor(), y, 0.7, 1.0);
  EXPECT_EQ(t.wbce_aux, 0.0);
  EXPECT_EQ(t.dice_aux, 0.0);
  EXPECT_DOUBLE_EQ(t.total.item(), wbce_loss(p, y).item() + 0.7 * dice_loss(p, y, 1.0).item());
}

TEST(JointLossTest, IdenticalBranchesDoubleTheLoss) {
  Tensor p = row({0.3, 0.8, 0.6});
  Tensor y = row({0, 1, 1});
  const double single = joint_loss(p, Tensor(), y, 1.0, 1.0).total.item();
  EXPECT_EQ(joint_loss(p, p, y, 1.0, 1.0).total.item(), 2.0 * single);
}

TEST(JointLossTest, BatchMean) {
  std::mt19937_64 r(1);
  Tensor p = oracle::random_tensor(Shape{2, 1, 2, 3}, r, 0.1, 0.9);
  Tensor y = gradcheck::rand_mask(p.shape(), r);
  Tensor p0(Shape{1, 1, 2, 3}, std::vector<double>(p.data().begin(), p.data().begin() + 6));
  Tensor p1(Shape{1, 1, 2, 3}, std::vector<double>(p.data().begin() + 6, p.data().end()));
  Tensor y0(Shape{1, 1, 2, 3}, std::vector<double>(y.data().begin(), y.data().begin() + 6));
  Tensor y1(Shape{1, 1, 2, 3}, std::vector<double>(y.data().begin() + 6, y.data().end()));
  const double both = joint_loss(p, Tensor(), y, 1.0, 1.0).total.item();
  const double each = joint_loss(p0, Tensor(), y0, 1.0, 1.0).total.item() +
                      joint_loss(p1, Tensor(), y1, 1.0, 1.0).total.item();
  EXPECT_NEAR(both, each / 2.0, 1e-14);
}

// ---------------------------------------------------------------------------
// optimizer

TEST(PolyLrTest, Schedule) {
  EXPECT_EQ(poly_lr(1e-4, 0, 1000, 0.9), 1e-4);
  EXPECT_NEAR(poly_lr(1e-4, 500, 1000, 0.9), 5.3589e-5, 1e-9);
  EXPECT_NEAR(poly_lr(1e-4, 500, 1000, 0.9), 1e-4 * std::pow(0.5, 0.9), 1e-18);
  EXPECT_EQ(poly_lr(1e-4, 1000, 1000, 0.9), 0.0);
  EXPECT_EQ(poly_lr(1e-4, 1500, 1000, 0.9), 0.0);
}

TEST(SgdTest, ZeroMomentumIsPlainGradientDescent) {
  Tensor p = oracle::param(row({1.0, -2.0}));
  Sgd sgd({{"p", p}}, 0.0);
  p.ensure_grad();
  p.mutable_grad()[0] = 0.5;
  p.mutable_grad()[1] = -1.0;
  sgd.step(0.1);
  EXPECT_DOUBLE_EQ(p[0], 1.0 - 0.05);
  EXPECT_DOUBLE_EQ(p[1], -2.0 + 0.1);
}

TEST(SgdTest, MomentumAccumulatesVelocity) {
  Tensor p = oracle::param(row({0.0}));
  Sgd sgd({{"p", p}}, 0.9);
  p.ensure_grad();
  p.mutable_grad()[0] = 1.0;
  sgd.step(0.1);  // v = 1
  EXPECT_DOUBLE_EQ(p[0], -0.1);
  sgd.step(0.1);  // v = 1.9
  EXPECT_DOUBLE_EQ(p[0], -0.1 - 0.19);
}

TEST(SgdTest, OneStepChangesTheNetwork) {
  ModelConfig cfg = small_config();
  Network net(cfg);
  auto data = gen_synthetic(2, 32, 3);
  auto [images, masks] = stack_batch(data);
  const TensorList before_list = net.parameters();
  std::vector<std::vector<double>> before;
  for (const auto& p : before_list) before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = net.loss(net.forward(images, true), masks).total;
  }
  tape.backward(loss);
  Sgd sgd(net.parameters(), cfg.momentum);
  sgd.step(1e-3);
  bool changed = false;
  for (std::size_t k = 0; k < before.size(); ++k) {
    for (std::size_t i = 0; i < before[k].size(); ++i) changed |= before_list[k].tensor[i] != before[k][i];
  }
  EXPECT_TRUE(changed);
}

// ---------------------------------------------------------------------------
// network

TEST(NetworkTest, DecoderInputChannelsPerAblation) {
  ModelConfig c = small_config();
  EXPECT_EQ(Network(c).decoder_in_channels(), 3 * c.ctx_channels);
  c.use_cca = false;
  EXPECT_EQ(Network(c).decoder_in_channels(), 2 * c.ctx_channels);
  c.use_cgl = false;
  EXPECT_EQ(Network(c).decoder_in_channels(), c.ctx_channels);
}

TEST(NetworkTest, OutputMatchesInputSize) {
  ModelConfig c = small_config();
  c.input_size = 64;
  Network net(c);
  std::mt19937_64 r(2);
  for (std::size_t size : {64, 96}) {
    Tensor image = oracle::random_tensor(Shape{2, 3, size, size}, r, 0, 1);
    Prediction p = net.predict(image);
    for (const Tensor* t : {&p.main, &p.aux, &p.mask}) EXPECT_EQ(t->shape(), (Shape{2, 1, size, size}));
    for (double v : p.main.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    for (double v : p.mask.data()) EXPECT_TRUE(v == 0.0 || v == 1.0);
  }
}

TEST(NetworkTest, AuxHeadZeroCase) {
  ModelConfig c = small_config();
  Network net(c);
  for (double& v : net.aux_classifier().weight.mutable_data()) v = 0.0;
  Tensor m = net.aux_forward(Tensor(Shape{2, c.ctx_channels, 8, 8}), 64, 64);
  EXPECT_EQ(m.shape(), (Shape{2, 1, 64, 64}));
  for (double v : m.data()) EXPECT_EQ(v, 0.5);
}

TEST(NetworkTest, AuxHeadRequiresCca) {
  ModelConfig c = small_config();
  c.use_cca = false;
  Network net(c);
  EXPECT_THROW(net.aux_forward(Tensor(Shape{1, c.ctx_channels, 4, 4}), 32, 32), ConfigError);
}

TEST(NetworkTest, NoAuxMeansSingleBranchLoss) {
  ModelConfig c = small_config();
  c.use_aux = false;
  Network net(c);
  auto data = gen_synthetic(2, 32, 4);
  auto [images, masks] = stack_batch(data);
  ForwardResult r = net.forward(images, true);
  EXPECT_FALSE(r.aux_prob.defined());
  LossTerms t = net.loss(r, masks);
  EXPECT_EQ(t.wbce_aux, 0.0);
  EXPECT_EQ(t.dice_aux, 0.0);
  EXPECT_DOUBLE_EQ(t.total.item(), wbce_loss(r.prob, masks).item() + c.lambda * dice_loss(r.prob, masks, c.epsilon).item());
}

TEST(NetworkTest, AblationParameterSets) {
  ModelConfig c = small_config();
  c.use_cca = c.use_cgl = c.use_aux = false;
  Network base(c);
  EXPECT_FALSE(has_prefix(base.state(), "cca"));
  EXPECT_FALSE(has_prefix(base.state(), "cgl"));
  EXPECT_FALSE(has_prefix(base.state(), "aux"));
  c.use_cca = true;
  EXPECT_TRUE(has_prefix(Network(c).state(), "cca"));
  EXPECT_FALSE(has_prefix(Network(c).state(), "aux"));
  c.use_aux = true;
  EXPECT_TRUE(has_prefix(Network(c).state(), "aux"));
  c.use_cca = false;  // aux without CCA has nothing to attach to
  EXPECT_FALSE(has_prefix(Network(c).state(), "aux"));
}

TEST(NetworkTest, EndToEndGradientNormOff) {
  for (std::uint64_t seed : {11, 12}) {
    for (const auto& g : gradcheck::network_sampled_grads(seed)) {
      EXPECT_LT(g.error(), 1e-3) << g.name << "[" << g.index << "] " << g.analytic << " vs " << g.numeric;
    }
  }
}

TEST(NetworkTest, LossFiniteForExtremeParameters) {
  ModelConfig c = small_config();
  Network net(c);
  for (auto& p : net.parameters()) {
    Tensor t = p.tensor;
    for (double& v : t.mutable_data()) v *= 1e3;
  }
  std::mt19937_64 r(5);
  for (double fill : {0.0, 1.0}) {
    Tensor image(Shape{2, 3, 32, 32}, fill);
    Tensor masks = gradcheck::rand_mask(Shape{2, 1, 32, 32}, r);
    EXPECT_TRUE(std::isfinite(net.loss(net.forward(image, true), masks).total.item()));
  }
  Tensor image = oracle::random_tensor(Shape{2, 3, 32, 32}, r, 0, 1);
  EXPECT_TRUE(std::isfinite(net.loss(net.forward(image, true), gradcheck::rand_mask(Shape{2, 1, 32, 32}, r)).total.item()));
}

// ---------------------------------------------------------------------------
// config and checkpoints

TEST(ConfigTest, TextRoundTrip) {
  ModelConfig c = small_config();
  c.lambda = 0.3;
  c.lr0 = 1.0 / 3.0;
  c.augment.rotate = false;
  c.seed = 1234567890123ull;
  EXPECT_EQ(ModelConfig::from_text(c.to_text()), c);
  EXPECT_EQ(ModelConfig::from_text(c.to_text()).lr0, c.lr0);
}

TEST(ConfigTest, CommentsAndUnknownKeys) {
  ModelConfig c = ModelConfig::from_text("# comment\nlambda = 0.5  # trailing\n\n[section]\nuse_cgl = off\n");
  EXPECT_EQ(c.lambda, 0.5);
  EXPECT_FALSE(c.use_cgl);
  EXPECT_THROW(ModelConfig::from_text("no_such_key = 1\n"), ConfigError);
  EXPECT_THROW(ModelConfig::from_text("lambda = abc\n"), ConfigError);
}

TEST(ConfigTest, ValidationRules) {
  auto bad = [](auto edit) {
    ModelConfig c;
    edit(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](ModelConfig& c) { c.lambda = -1; });
  bad([](ModelConfig& c) { c.epsilon = 0; });
  bad([](ModelConfig& c) { c.epsilon = 1.5; });
  bad([](ModelConfig& c) { c.poly_power = 0; });
  bad([](ModelConfig& c) { c.batch_size = 1; });
  bad([](ModelConfig& c) { c.input_size = 60; });
  ModelConfig ok;
  ok.norm = false;
  ok.batch_size = 1;
  EXPECT_NO_THROW(ok.validate());
  EXPECT_NO_THROW(ModelConfig::full_size().validate());
  EXPECT_EQ(ModelConfig::full_size().lr0, 1e-4);
  EXPECT_EQ(ModelConfig::full_size().batch_size, 8u);
}

TEST(CheckpointTest, RoundTripRestoresPredictions) {
  const fs::path dir = temp_dir("ckpt");
  ModelConfig c = small_config();
  Network a(c);
  auto data = gen_synthetic(2, 32, 6);
  auto [images, masks] = stack_batch(data);
  a.forward(images, true);  // moves the running statistics off their init
  save_checkpoint((dir / "a.bin").string(), c, a.state());
  Checkpoint ck = load_checkpoint((dir / "a.bin").string());
  EXPECT_EQ(ck.config(), c);
  ModelConfig other = c;
  other.seed = 99;
  Network b(other);
  b.load_state(ck.tensors);
  Prediction pa = a.predict(images);
  Prediction pb = b.predict(images);
  for (std::size_t i = 0; i < pa.main.numel(); ++i) EXPECT_EQ(pa.main[i], pb.main[i]);
}

TEST(CheckpointTest, MismatchedArchitectureRejected) {
  ModelConfig c = small_config();
  Network full(c);
  c.use_cca = false;
  Network no_cca(c);
  std::map<std::string, Tensor> values;
  for (const auto& [name, t] : full.state()) values.emplace(name, t);
  EXPECT_THROW(no_cca.load_state(values), ConfigError);
}

TEST(CheckpointTest, CorruptFilesRejected) {
  const fs::path dir = temp_dir("corrupt");
  {
    std::ofstream(dir / "junk.bin") << "not a checkpoint";
  }
  EXPECT_THROW(load_checkpoint((dir / "junk.bin").string()), CheckpointError);
  ModelConfig c = small_config();
  save_checkpoint((dir / "ok.bin").string(), c, Network(c).state());
  fs::resize_file(dir / "ok.bin", fs::file_size(dir / "ok.bin") - 9);
  EXPECT_THROW(load_checkpoint((dir / "ok.bin").string()), CheckpointError);
}

// ---------------------------------------------------------------------------
// training loop

TEST(TrainTest, LogLengthAndScheduleColumn) {
  ModelConfig c = small_config();
  c.total_iters = 10;
  Network net(c);
  auto rows = train(net, gen_synthetic(4, 32, 7));
  ASSERT_EQ(rows.size(), 10u);
  for (const auto& r : rows) {
    EXPECT_NEAR(r.lr, c.lr0 * std::pow(1.0 - static_cast<double>(r.iter) / 10.0, 0.9), 1e-12);
    EXPECT_DOUBLE_EQ(r.total, r.main_loss + r.wbce_aux + c.lambda * r.dice_aux);
  }
}

TEST(TrainTest, DeterministicGivenSeed) {
  ModelConfig c = small_config();
  auto data = gen_synthetic(4, 32, 8);
  Network a(c), b(c);
  auto ra = train(a, data);
  auto rb = train(b, data);
  ASSERT_EQ(ra.size(), rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) EXPECT_EQ(format_log_row(ra[i]), format_log_row(rb[i]));
}

TEST(TrainTest, NonFiniteLossAbortsWithDiagnostic) {
  ModelConfig c = small_config();
  Network net(c);
  net.classifier().bias.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train(net, gen_synthetic(2, 32, 9));
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("iteration 0"), std::string::npos) << m;
    EXPECT_NE(m.find("lr"), std::string::npos) << m;
  }
}

TEST(TrainTest, EvaluateProducesOneRecordPerSample) {
  ModelConfig c = small_config();
  Network net(c);
  auto data = gen_synthetic(3, 48, 10);  // evaluated at 48, network runs at 32
  auto recs = evaluate(net, data);
  ASSERT_EQ(recs.size(), 3u);
  for (const auto& r : recs) EXPECT_EQ(r.counts.total(), 48u * 48u);
}
