#include <gtest/gtest.h>

#include <sstream>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "vrec/attacks.hpp"
#include "vrec/filter.hpp"

using namespace vrec;

namespace {

struct Instance {
  std::vector<MlpModel> models;
  Vector x;
  int target = 0;
};

// Small random model, random input, a target the model does not already predict.
Instance random_instance(std::uint64_t seed) {
  auto c = oracle::random_grad_case(seed);
  Rng rng(derive_seed(seed, 1));
  for (double& v : c.x) v = uniform(rng, 0.0, 1.0);
  const int pred = predict(c.model, c.x);
  const int classes = static_cast<int>(c.model.num_classes());
  return {{c.model}, c.x, (pred + 1) % classes};
}

double linf(const Vector& a, const Vector& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

int target_for(int label, int num_classes) { return (label + 1) % num_classes; }

}  // namespace

TEST(Pgd, ZeroStepsIsIdentity) {
  const auto in = random_instance(1);
  AttackBudget b;
  b.steps = 0;
  EXPECT_EQ(pgd(in.models, in.x, in.target, b).perturbed, in.x);
}

TEST(Pgd, BudgetAndBoxAlwaysHold) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto in = random_instance(s);
    AttackBudget b;
    b.epsilon = 0.05 + 0.01 * static_cast<double>(s % 10);
    b.step = b.epsilon / 3.0;
    b.steps = 20;
    b.seed = s;
    for (auto kind : {AttackKind::pgd, AttackKind::pgd_dropout}) {
      const auto ex = run_attack(kind, in.models, in.x, in.target, b);
      ASSERT_LE(linf(ex.perturbed, in.x), b.epsilon + 1e-15);
      for (double v : ex.perturbed) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
      }
    }
  }
}

TEST(Pgd, OneStepOnLinearSoftmaxMatchesClosedForm) {
  Rng rng(5);
  DenseLayer l{Matrix(3, 4), Vector(3, 0.0), Activation::identity};
  for (double& w : l.weight.data) w = uniform(rng, -1.0, 1.0);
  for (double& v : l.bias) v = uniform(rng, -0.2, 0.2);
  const std::vector<MlpModel> models{MlpModel({l})};
  const Vector x{0.5, 0.02, 0.97, 0.4};
  const int yt = 2;
  AttackBudget b;
  b.steps = 1;
  b.step = 0.05;
  b.epsilon = 0.1;
  // Gradient of the NLL toward y_t for logits W x + b is W^T (p - onehot).
  const auto p = forward(models[0], x);
  Vector expect(4);
  for (std::size_t c = 0; c < 4; ++c) {
    double g = 0.0;
    for (std::size_t r = 0; r < 3; ++r) g += l.weight(r, c) * (p[r] - (r == yt ? 1.0 : 0.0));
    const double sgn = g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0);
    expect[c] = std::clamp(x[c] - b.step * sgn, 0.0, 1.0);
  }
  const auto got = pgd(models, x, yt, b).perturbed;
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(got[c], expect[c], 1e-15);
}

TEST(Pgd, DeterministicAndValidated) {
  const auto in = random_instance(3);
  AttackBudget b;
  b.seed = 4;
  EXPECT_EQ(pgd_dropout(in.models, in.x, in.target, b, 0.2).perturbed,
            pgd_dropout(in.models, in.x, in.target, b, 0.2).perturbed);
  EXPECT_THROW((void)pgd(in.models, in.x, 99, b), std::out_of_range);
  const std::vector<MlpModel> none;
  EXPECT_THROW((void)pgd(none, in.x, 0, b), std::invalid_argument);
  b.epsilon = 0.0;
  EXPECT_THROW((void)pgd(in.models, in.x, in.target, b), std::invalid_argument);
}

TEST(Pgd, ZeroDropoutIsPlainPgd) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto in = random_instance(s);
    AttackBudget b;
    b.seed = s;
    EXPECT_EQ(pgd_dropout(in.models, in.x, in.target, b, 0.0).perturbed, pgd(in.models, in.x, in.target, b).perturbed);
  }
}

TEST(Pgd, FullConfidenceCapIsPlainPgd) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto in = random_instance(s);
    AttackBudget b;
    EXPECT_EQ(pgd_low_confidence(in.models, in.x, in.target, b, 1.0).perturbed,
              pgd(in.models, in.x, in.target, b).perturbed);
  }
}

TEST(Pgd, LowConfidenceStoppingRule) {
  const auto& f = fixture::trained_store();
  const std::vector<MlpModel> m{f.model(1)};
  AttackBudget b;
  int successes = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    const auto& s = f.task.test[i];
    const int yt = target_for(s.label, f.task.num_classes);
    const auto ex = pgd_low_confidence(m, s.x, yt, b, 0.95);
    if (!ex.success) continue;
    ++successes;
    const double p = forward(m[0], ex.perturbed)[static_cast<std::size_t>(yt)];
    EXPECT_GE(p, 0.95);
    // Stopping means at most one step past the cap.
    EXPECT_LT(ex.steps_taken, b.steps);
  }
  EXPECT_GT(successes, 25);
  EXPECT_THROW((void)pgd_low_confidence(m, f.task.test[0].x, 1, b, 0.05), std::invalid_argument);
}

TEST(Cw, ZeroCDrivesDeltaToZero) {
  const auto in = random_instance(7);
  AttackBudget b;
  b.c_init = 0.0;
  b.c_min = 0.0;
  b.c_max = 0.0;
  b.search_rounds = 2;
  const auto ex = cw(in.models, in.x, in.target, b);
  EXPECT_FALSE(ex.success);
  EXPECT_EQ(ex.perturbed, in.x);
}

TEST(Cw, EadWithZeroBetaIsCw) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto in = random_instance(s);
    AttackBudget b;
    b.beta = 0.0;
    b.cw_steps = 50;
    b.confidence = 0.5;
    EXPECT_EQ(ead(in.models, in.x, in.target, b).perturbed, cw(in.models, in.x, in.target, b).perturbed);
  }
}

TEST(Cw, SuccessRateAndContractOnGlyphs) {
  const auto& f = fixture::trained_store();
  const std::vector<MlpModel> m{f.model(1)};
  AttackBudget b;
  int successes = 0;
  const int n = 60;
  for (int i = 0; i < n; ++i) {
    const auto& s = f.task.test[static_cast<std::size_t>(i)];
    const int yt = target_for(s.label, f.task.num_classes);
    for (auto kind : {AttackKind::cw, AttackKind::ead}) {
      const auto ex = run_attack(kind, m, s.x, yt, b);
      if (ex.success) {
        EXPECT_EQ(predict(m[0], ex.perturbed), yt);
        EXPECT_TRUE(ex.model_success[0]);
        if (kind == AttackKind::cw) ++successes;
      }
    }
  }
  EXPECT_GE(successes, static_cast<int>(0.9 * n));
}

TEST(Cw, LargerBetaDoesNotGrowL1) {
  const auto& f = fixture::trained_store();
  const std::vector<MlpModel> m{f.model(1)};
  std::vector<double> change;
  for (std::size_t i = 0; i < 20; ++i) {
    const auto& s = f.task.test[i];
    const int yt = target_for(s.label, f.task.num_classes);
    AttackBudget b0;
    b0.beta = 0.0;
    AttackBudget b1 = b0;
    b1.beta = 0.1;
    const auto e0 = ead(m, s.x, yt, b0);
    const auto e1 = ead(m, s.x, yt, b1);
    if (e0.success && e1.success) change.push_back(norm_l1(e1.delta()) - norm_l1(e0.delta()));
  }
  ASSERT_GE(change.size(), 10u);
  EXPECT_LE(median(change), 0.0);
}

TEST(Adaptive, DropoutAndLowConfidenceVersusPlainPgd) {
  const auto& f = fixture::trained_store();
  const std::vector<MlpModel> breached{f.model(1)};
  const auto& deployed = f.model(2);
  AttackBudget b;
  // Gaps are compared over examples that reach the deployed model with label y_t; the rest
  // carry a label mismatch and are not what the filter has to catch.
  std::vector<double> d_plain;
  std::vector<double> d_drop;
  int plain_transfer = 0;
  int lowconf_transfer = 0;
  const int n = 300;
  for (int i = 0; i < n; ++i) {
    const auto& s = f.task.test[static_cast<std::size_t>(i)];
    const int yt = target_for(s.label, f.task.num_classes);
    b.seed = static_cast<std::uint64_t>(i);
    const auto plain = pgd(breached, s.x, yt, b);
    const auto drop = pgd_dropout(breached, s.x, yt, b, 0.1);
    const auto low = pgd_low_confidence(breached, s.x, yt, b, 0.95);
    if (predict(deployed, plain.perturbed) == yt) {
      ++plain_transfer;
      d_plain.push_back(delta_max(plain.perturbed, deployed, breached));
    }
    if (predict(deployed, drop.perturbed) == yt) d_drop.push_back(delta_max(drop.perturbed, deployed, breached));
    lowconf_transfer += predict(deployed, low.perturbed) == yt ? 1 : 0;
  }
  ASSERT_GE(d_plain.size(), 20u);
  ASSERT_GE(d_drop.size(), 20u);
  EXPECT_LE(median(d_drop), median(d_plain));
  EXPECT_LT(lowconf_transfer, plain_transfer);
}

TEST(Prune, NoPruneNoFinetuneIsIdentity) {
  const auto& f = fixture::trained_store();
  TrainConfig c;
  c.epochs = 0;
  EXPECT_EQ(prune_finetune(f.model(1), 0.0, f.task.train, 0.1, c), f.model(1));
}

TEST(Prune, ZeroesTheRequestedShare) {
  const auto& f = fixture::trained_store();
  TrainConfig c;
  c.epochs = 0;
  const auto& m = f.model(1);
  std::size_t weights = 0;
  std::size_t zeros_before = 0;
  for (const auto& l : m.layers()) {
    weights += l.weight.data.size();
    for (double w : l.weight.data) zeros_before += w == 0.0 ? 1 : 0;
  }
  const auto p = prune_finetune(m, 0.3, f.task.train, 0.1, c);
  std::size_t zeros = 0;
  for (const auto& l : p.layers()) {
    for (double w : l.weight.data) zeros += w == 0.0 ? 1 : 0;
  }
  EXPECT_EQ(zeros, zeros_before + static_cast<std::size_t>(0.3 * static_cast<double>(weights)));
  EXPECT_THROW((void)prune_finetune(m, 0.6, f.task.train, 0.1, c), std::invalid_argument);
  EXPECT_THROW((void)prune_finetune(m, 0.1, f.task.train, 0.0, c), std::invalid_argument);
}

TEST(Prune, BenignFinetuneHasLimitedImpact) {
  const auto& f = fixture::trained_store();
  const auto& deployed = f.model(2);
  const std::vector<MlpModel> breached{f.model(1)};
  const auto state = make_filter(deployed, breached, f.task.validation, 0.05);
  TrainConfig c;
  c.epochs = 5;
  c.seed = 9;
  const auto tuned = prune_finetune(f.model(1), 0.0, f.task.train, 0.1, c);
  EXPECT_NE(tuned, f.model(1));
  const std::vector<MlpModel> surrogate{tuned};
  AttackBudget b;
  auto filter_rate = [&](const std::vector<MlpModel>& source) {
    int transferred = 0;
    int flagged = 0;
    for (std::size_t i = 0; i < 150; ++i) {
      const auto& s = f.task.test[i];
      const int yt = target_for(s.label, f.task.num_classes);
      const auto ex = pgd(source, s.x, yt, b);
      const auto v = judge(ex.perturbed, state);
      if (v.label != yt) continue;
      ++transferred;
      flagged += v.decision == Decision::flagged ? 1 : 0;
    }
    return transferred == 0 ? 1.0 : static_cast<double>(flagged) / transferred;
  };
  EXPECT_GE(filter_rate(surrogate), filter_rate(breached) - 0.05);
}

TEST(AttackIo, JsonLinesRoundTrip) {
  const auto in = random_instance(11);
  AttackBudget b;
  b.seed = 42;
  b.cw_steps = 20;
  std::vector<AdvExample> exs{pgd(in.models, in.x, in.target, b), cw(in.models, in.x, in.target, b)};
  exs[0].model_ids = {1, 2};
  std::stringstream ss;
  write_jsonl(ss, exs);
  const auto back = read_jsonl(ss);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].perturbed, exs[i].perturbed);
    EXPECT_EQ(back[i].original, exs[i].original);
    EXPECT_EQ(back[i].kind, exs[i].kind);
    EXPECT_EQ(back[i].model_ids, exs[i].model_ids);
    EXPECT_EQ(back[i].final_losses, exs[i].final_losses);
    EXPECT_EQ(to_json(back[i].budget), to_json(exs[i].budget));
  }
  // Replaying the recorded budget reproduces the example.
  EXPECT_EQ(pgd(in.models, back[0].original, back[0].target, back[0].budget).perturbed, exs[0].perturbed);
}

TEST(AttackIo, BudgetJsonValidates) {
  EXPECT_THROW((void)attack_budget_from_json({{"eps", 0.1}}), std::invalid_argument);
  EXPECT_THROW((void)attack_budget_from_json({{"search_rounds", 0}}), std::invalid_argument);
  EXPECT_THROW((void)parse_attack_kind("fgsm"), std::invalid_argument);
  for (auto k : {AttackKind::pgd, AttackKind::cw, AttackKind::ead, AttackKind::pgd_dropout, AttackKind::pgd_low_confidence}) {
    EXPECT_EQ(parse_attack_kind(to_string(k)), k);
  }
}
