#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "checks.hpp"
#include "dcp/prune.hpp"

namespace dcp {
namespace {

using train::TrainConfig;
using train::Trainer;

const data::Dataset& small_train() {
  static const data::Dataset ds = data::synth_dataset(10, 400, 3);
  return ds;
}

TrainConfig small_config(double rate, int epochs = 3) {
  TrainConfig c;
  c.prune_rate = rate;
  c.epochs = epochs;
  c.batch_size = 50;
  return c;
}

std::vector<std::vector<float>> parameter_values(zoo::Network& net) {
  std::vector<std::vector<float>> out;
  for (auto& p : net.parameters()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

TEST(Sgd, MomentumExamples) {
  std::vector<float> w{0.0f}, g{1.0f}, v{0.0f};
  train::sgd_step(w, g, v, 0.1f, 0.9f, 0.0f);
  EXPECT_FLOAT_EQ(w[0], -0.1f);
  train::sgd_step(w, g, v, 0.1f, 0.9f, 0.0f);
  EXPECT_FLOAT_EQ(w[0], -0.29f);

  std::vector<float> w2{0.7f, -1.5f}, g2{0.0f, 0.0f}, v2{0.0f, 0.0f};
  train::sgd_step(w2, g2, v2, 0.1f, 0.9f, 0.0f);
  EXPECT_EQ(w2, (std::vector<float>{0.7f, -1.5f}));
  train::sgd_step(w2, g2, v2, 0.1f, 0.9f, 0.5f);  // decay pulls toward zero
  EXPECT_FLOAT_EQ(w2[0], 0.7f - 0.1f * 0.35f);
}

TEST(Schedule, LearningRateMilestones) {
  TrainConfig c;
  c.epochs = 20;
  EXPECT_FLOAT_EQ(c.lr_at(6), 0.1f);
  EXPECT_FLOAT_EQ(c.lr_at(7), 0.01f);
  EXPECT_FLOAT_EQ(c.lr_at(14), 0.001f);
  EXPECT_EQ(c.resolved_freeze_epoch(), 14);
}

TEST(TrainerRun, ZeroRateIsBitwisePlainTraining) {
  auto cfg = small_config(0.0);
  Trainer gated(zoo::Network(zoo::build_tinycnn(), 2), cfg, small_train(), nullptr);
  cfg.gating = false;
  Trainer plain(zoo::Network(zoo::build_tinycnn(), 2), cfg, small_train(), nullptr);
  gated.run();
  plain.run();
  EXPECT_EQ(gated.step_losses(), plain.step_losses());
  EXPECT_EQ(parameter_values(gated.network()), parameter_values(plain.network()));
  for (const auto& m : gated.masks())
    for (float v : m) EXPECT_EQ(v, 1.0f);
}

TEST(TrainerRun, MaskedChannelsReceiveZeroGradient) {
  Trainer t(zoo::Network(zoo::build_tinycnn(), 3), small_config(0.5), small_train(), nullptr);
  t.run_epoch();
  auto masks = t.masks();
  std::size_t masked = 0;
  for (const auto& m : masks) masked += std::count(m.begin(), m.end(), 0.0f);
  ASSERT_GT(masked, 0u);

  auto& net = t.network();
  std::vector<std::size_t> idx(20);
  std::iota(idx.begin(), idx.end(), 0);
  const Tensor x = data::make_batch(small_train(), idx, {});
  const auto labels = data::gather_labels(small_train(), idx);
  net.zero_grad();
  backward(softmax_cross_entropy<float>(net.forward(x, Mode::kTrain, &masks), labels));
  std::size_t checked = 0;
  for (auto& p : net.parameters()) {
    if (!p.prune_slot) continue;
    const auto& mask = masks[*p.prune_slot];
    const auto g = p.tensor.grad();
    ASSERT_FALSE(g.empty()) << p.name;
    const std::size_t row = g.size() / mask.size();
    for (std::size_t r = 0; r < mask.size(); ++r) {
      if (mask[r] != 0.0f) continue;
      for (std::size_t i = 0; i < row; ++i) ASSERT_EQ(g[r * row + i], 0.0f) << p.name << " row " << r;
      ++checked;
    }
  }
  EXPECT_EQ(checked, 3 * masked);  // weight, gamma, beta
}

// Rows masked for a whole epoch must not move when exempt; without the flag
// weight decay and momentum still move them.
TEST(TrainerRun, ExemptFlagFreezesMaskedRows) {
  for (bool exempt : {true, false}) {
    auto cfg = small_config(0.5);
    cfg.exempt_masked = exempt;
    Trainer t(zoo::Network(zoo::build_tinycnn(), 4), cfg, small_train(), nullptr);
    t.run_epoch();
    const auto masks = t.masks();
    const auto before = parameter_values(t.network());
    t.run_epoch();
    ASSERT_EQ(train::mask_churn(masks, t.masks()), 0u);
    const auto after = parameter_values(t.network());
    auto params = t.network().parameters();
    std::size_t moved = 0, rows = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].prune_slot) continue;
      const auto& mask = masks[*params[i].prune_slot];
      const std::size_t row = before[i].size() / mask.size();
      for (std::size_t r = 0; r < mask.size(); ++r) {
        if (mask[r] != 0.0f) continue;
        ++rows;
        moved += !std::equal(before[i].begin() + r * row, before[i].begin() + (r + 1) * row, after[i].begin() + r * row);
      }
    }
    ASSERT_GT(rows, 0u);
    if (exempt)
      EXPECT_EQ(moved, 0u);
    else
      EXPECT_GT(moved, 0u);
  }
}

TEST(TrainerRun, NoChurnAfterFreeze) {
  Trainer t(zoo::Network(zoo::build_tinycnn(), 5), small_config(0.3, 6), small_train(), nullptr);
  ASSERT_EQ(t.config().resolved_freeze_epoch(), 4);
  std::vector<engine::Mask> at_freeze;
  t.on_epoch_end = [&](Trainer& tr) {
    if (tr.epoch() == 4) at_freeze = tr.masks();
  };
  t.run();
  for (const auto& r : t.metrics())
    if (r.epoch >= 4) {
      EXPECT_EQ(r.churn, 0u) << "epoch " << r.epoch;
    }
  EXPECT_EQ(t.masks(), at_freeze);
  EXPECT_TRUE(t.utilities().frozen);
}

TEST(TrainerRun, ResumeReproducesTheTrajectory) {
  const auto cfg = small_config(0.3, 4);
  Trainer straight(zoo::Network(zoo::build_tinycnn(), 6), cfg, small_train(), nullptr);
  straight.run();

  Trainer first(zoo::Network(zoo::build_tinycnn(), 6), cfg, small_train(), nullptr);
  first.run_epoch();
  first.run_epoch();
  const auto bytes = io::encode(first.snapshot());
  Trainer resumed = Trainer::resume(io::decode(bytes), small_train(), nullptr);
  EXPECT_EQ(resumed.epoch(), 2);
  resumed.run();

  EXPECT_EQ(resumed.step_losses(), straight.step_losses());
  EXPECT_EQ(parameter_values(resumed.network()), parameter_values(straight.network()));
  EXPECT_EQ(resumed.masks(), straight.masks());
  EXPECT_EQ(train::metrics_csv(resumed.metrics()), train::metrics_csv(straight.metrics()));
}

TEST(Evaluate, EmptySetThrowsAndUniformLogitsGiveChance) {
  zoo::Network net(zoo::build_tinycnn(), 1);
  data::Dataset empty;
  EXPECT_THROW(train::evaluate(net, empty), std::invalid_argument);

  for (auto& l : net.linears()) {
    for (float& v : l.weight.mutable_data()) v = 0.0f;
    for (float& v : l.bias.mutable_data()) v = 0.0f;
  }
  const auto ds = data::synth_dataset(10, 200, 9);
  const auto r = train::evaluate(net, ds);
  EXPECT_NEAR(r.accuracy, 0.1, 0.02);
  EXPECT_NEAR(r.loss, std::log(10.0), 1e-5);
}

TEST(TrainerRun, DivergenceNamesTheFirstBadTensor) {
  auto cfg = small_config(0.3);
  cfg.lr0 = 1e30f;
  Trainer t(zoo::Network(zoo::build_tinycnn(), 7), cfg, small_train(), nullptr);
  try {
    t.run();
    FAIL() << "expected divergence";
  } catch (const train::DivergenceError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("non-finite loss at epoch 0"), std::string::npos) << msg;
    EXPECT_EQ(msg.find("first non-finite tensor: loss"), std::string::npos) << msg;
  }
}

TEST(TrainerRun, PrunedTrainingLearnsAndCompactMatchesMasked) {
  train::retain_freed_memory();
  const auto tr = data::synth_dataset(10, 4000, 1);
  const auto te = data::synth_dataset(10, 1000, stream_key(1, {0x7e57}));
  TrainConfig cfg;
  cfg.prune_rate = 0.3;
  cfg.epochs = 10;
  Trainer t(zoo::Network(zoo::build_tinycnn(), 1), cfg, tr, &te);
  t.run();
  std::size_t masked = 0;
  for (const auto& m : t.masks()) masked += std::count(m.begin(), m.end(), 0.0f);
  EXPECT_EQ(masked, 43u);  // floor(0.3 * 144)

  const auto masked_eval = train::evaluate(t.network(), te, &t.masks());
  EXPECT_GE(masked_eval.accuracy, 0.95);
  EXPECT_EQ(masked_eval.accuracy, t.metrics().back().accuracy);
  zoo::Network compact = prune::export_compact(t.network(), prune::PruneSpec::from_masks(t.masks()));
  const auto compact_eval = train::evaluate(compact, te);
  EXPECT_EQ(compact_eval.accuracy, masked_eval.accuracy);
  EXPECT_NEAR(compact_eval.loss, masked_eval.loss, 1e-5);
}

TEST(Config, ValidationErrors) {
  auto bad = [](auto edit) {
    TrainConfig c;
    edit(c);
    EXPECT_THROW(c.validate(), engine::ConfigError);
  };
  bad([](TrainConfig& c) { c.prune_rate = 1.0; });
  bad([](TrainConfig& c) { c.prune_rate = -0.1; });
  bad([](TrainConfig& c) { c.epochs = 2; });
  bad([](TrainConfig& c) { c.batch_size = 0; });
  bad([](TrainConfig& c) { c.freeze_epoch = 21; });
  bad([](TrainConfig& c) { c.schedule = engine::DecaySchedule::parse("fixed:0.5"), c.schedule.value = 1.0f; });
  bad([](TrainConfig& c) { c.init = "imagenet"; });
  EXPECT_NO_THROW(TrainConfig{}.validate());
}

TEST(Config, JsonRoundTrip) {
  TrainConfig c;
  c.prune_rate = 0.3;
  c.schedule = engine::DecaySchedule::parse("fixed:0.1");
  c.weight_decay = 5e-4f;
  c.freeze_epoch = 3;
  c.exempt_masked = true;
  const auto back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.prune_rate, 0.3);
  EXPECT_EQ(back.freeze_epoch, 3);
  EXPECT_THROW(TrainConfig::from_json("{\"epochs\":3}"), engine::ConfigError);
}

TEST(Metrics, CsvFormat) {
  train::MetricsRow r{3, "eval", 0.5, 0.875, 0.01, 0.9, engine::kNoThreshold, 2};
  EXPECT_EQ(r.csv(), "3,eval,0.500000,0.875000,0.010000,0.900000,-inf,2");
  r.threshold = 0.25f;
  const std::vector<train::MetricsRow> rows{r};
  EXPECT_EQ(train::metrics_csv(rows), std::string(train::kMetricsHeader) + "\n3,eval,0.500000,0.875000,0.010000,0.900000,0.250000,2\n");
}

}  // namespace
}  // namespace dcp
