#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "golden.hpp"
#include "vrec/experiment.hpp"

using namespace vrec;

namespace {

TaskDataset mini_task() {
  GlyphParams p;
  p.num_classes = 4;
  p.side = 8;
  p.train_per_class = 60;
  p.validation_per_class = 30;
  p.test_per_class = 40;
  return make_glyph_task(p, 2);
}

BreachScenario mini_scenario() {
  BreachScenario s;
  s.horizon = 2;
  s.trials = 2;
  s.attack_inputs = 40;
  s.hidden_per_label = 30;
  s.train.epochs = 15;
  s.train.hidden_layers = {24, 24};
  s.budget.steps = 30;
  s.budget.step = 0.01;
  s.threads = 1;
  return s;
}

RoundResult round_with(int i, double post) {
  RoundResult r;
  r.round = i;
  r.post_success = post;
  return r;
}

}  // namespace

TEST(Nbr, Definition) {
  const std::vector<RoundResult> ok{round_with(1, 0.1), round_with(2, 0.2), round_with(3, 0.05)};
  EXPECT_EQ(compute_nbr(ok, 0.2), 3);
  const std::vector<RoundResult> first_fails{round_with(1, 0.3), round_with(2, 0.0)};
  EXPECT_EQ(compute_nbr(first_fails, 0.2), 0);
  // Recovery after a failed round does not count.
  const std::vector<RoundResult> gap{round_with(1, 0.0), round_with(2, 0.5), round_with(3, 0.0)};
  EXPECT_EQ(compute_nbr(gap, 0.2), 1);
}

TEST(Round, HandBuiltData) {
  RoundData d;
  d.round = 1;
  for (int i = 1; i <= 100; ++i) {
    d.validation_deltas.push_back(0.01 * i);
    d.holdout_deltas.push_back(0.01 * i - 0.005);
  }
  d.adv_deltas = {2.0, 0.5, 1.5, -3.0};
  d.transferred = {1, 1, 1, 0};
  d.source_success = {1, 1, 1, 1};
  const auto r = evaluate_round(d, 0.05);
  // T = 0.95; holdout values >= 0.95 are 0.955 .. 0.995.
  EXPECT_DOUBLE_EQ(r.fpr_realized, 0.05);
  EXPECT_DOUBLE_EQ(r.pre_transfer, 0.75);
  EXPECT_DOUBLE_EQ(r.post_success, 0.25);
  EXPECT_DOUBLE_EQ(r.filter_rate, 2.0 / 3.0);
  // Lower median of the transferred gaps {2.0, 0.5, 1.5}.
  EXPECT_DOUBLE_EQ(r.d_adv_med, 1.5);
}

TEST(Game, ZeroAttackInputsRecoverEverything) {
  auto s = mini_scenario();
  s.attack_inputs = 0;
  s.trials = 1;
  const auto g = run_breach_game(mini_task(), s);
  ASSERT_EQ(g.trials.size(), 1u);
  EXPECT_EQ(g.trials[0].nbr, s.horizon);
  for (const auto& r : g.trials[0].rounds) EXPECT_EQ(r.post_success, 0.0);
}

TEST(Game, InvariantsAndDeterminism) {
  const auto task = mini_task();
  const auto s = mini_scenario();
  const auto a = run_breach_game(task, s);
  const auto b = run_breach_game(task, s);
  std::ostringstream ca;
  std::ostringstream cb;
  write_report_csv(ca, a);
  write_report_csv(cb, b);
  EXPECT_EQ(ca.str(), cb.str());
  for (const auto& t : a.trials) {
    ASSERT_EQ(t.rounds.size(), static_cast<std::size_t>(s.horizon));
    for (const auto& r : t.rounds) {
      for (double v : {r.pre_transfer, r.post_success, r.filter_rate, r.fpr_realized, r.benign_acc}) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
      EXPECT_LE(r.post_success, r.pre_transfer);
    }
    EXPECT_EQ(t.nbr, compute_nbr(t.rounds, s.nbr_cutoff));
  }
}

TEST(Game, AttackInputsAreCorrectlyClassifiedAndTargeted) {
  const auto task = mini_task();
  const auto s = mini_scenario();
  const auto pool = train_version_pool(task, s, 0);
  ASSERT_EQ(pool.size(), 3u);
  const std::vector<MlpModel> attacked{pool[0].model};
  const auto inputs = select_attack_inputs(task, pool[1].model, attacked, 30, 5);
  EXPECT_EQ(inputs.size(), 30u);
  for (const auto& in : inputs) {
    const auto& x = task.test[in.index];
    EXPECT_EQ(predict(pool[1].model, x.x), x.label);
    EXPECT_NE(in.target, x.label);
    EXPECT_NE(in.target, predict(pool[0].model, x.x));
  }
}

TEST(Report, CsvRoundTripAndNbrRecompute) {
  const auto g = run_breach_game(mini_task(), mini_scenario());
  std::stringstream ss;
  write_report_csv(ss, g);
  const auto rows = read_report_csv(ss);
  std::size_t k = 0;
  for (const auto& t : g.trials) {
    std::vector<RoundResult> mine;
    for (const auto& r : t.rounds) {
      const auto& back = rows[k++];
      EXPECT_NEAR(back.pre_transfer, r.pre_transfer, 1e-12);
      EXPECT_NEAR(back.post_success, r.post_success, 1e-12);
      EXPECT_NEAR(back.filter_rate, r.filter_rate, 1e-12);
      EXPECT_NEAR(back.fpr_realized, r.fpr_realized, 1e-12);
      EXPECT_NEAR(back.benign_acc, r.benign_acc, 1e-12);
      EXPECT_NEAR(back.d_benign_med, r.d_benign_med, 1e-12);
      EXPECT_NEAR(back.d_adv_med, r.d_adv_med, 1e-12);
      EXPECT_EQ(back.trial, r.trial);
      mine.push_back(back);
    }
    EXPECT_EQ(compute_nbr(mine, 0.2), t.nbr);
  }
  EXPECT_EQ(k, rows.size());
}

TEST(Report, EmptyResultIsHeaderOnly) {
  std::ostringstream os;
  write_report_csv(os, BreachGameResult{});
  EXPECT_EQ(os.str(), "trial,round,pre_transfer,post_success,filter_rate,fpr_realized,benign_acc,d_benign_med,d_adv_med\n");
}

TEST(Report, GoldenMiniScenario) {
  auto s = mini_scenario();
  s.trials = 1;
  const auto g = run_breach_game(mini_task(), s);
  const auto summary = report_summary(g);
  const auto frozen = golden::load_or_record("mini_report", summary);
  EXPECT_EQ(summary["nbr_per_trial"], frozen["nbr_per_trial"]);
  const auto& got = summary["trials"][0]["rounds"];
  const auto& want = frozen["trials"][0]["rounds"];
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    for (const auto& key : report_columns()) {
      EXPECT_NEAR(got[i][key].get<double>(), want[i][key].get<double>(), 1e-9) << key << " round " << i + 1;
    }
  }
}

TEST(Report, EmitWritesBothFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "vrec_emit_test";
  std::filesystem::remove_all(dir);
  BreachGameResult g;
  g.trials.push_back({0, {round_with(1, 0.1)}, 1});
  emit_report(g, dir / "sub" / "r", {{"k", 1}});
  std::ifstream js(dir / "sub" / "r.json");
  const auto j = nlohmann::json::parse(js);
  EXPECT_EQ(j["config"]["k"], 1);
  EXPECT_EQ(j["nbr"], 1.0);
  EXPECT_TRUE(std::filesystem::exists(dir / "sub" / "r.csv"));
  std::filesystem::remove_all(dir);
}

TEST(Sweeps, FprSweepSingleEntryMatchesGameAndIsMonotone) {
  const auto task = mini_task();
  const auto s = mini_scenario();
  const std::vector<double> one{0.05};
  const auto sweep1 = fpr_sweep(task, s, one);
  EXPECT_EQ(sweep1.games[0].nbrs(), run_breach_game(task, s).nbrs());
  const std::vector<double> many{0.0, 0.01, 0.05, 0.1};
  const auto sweep = fpr_sweep(task, s, many);
  for (std::size_t k = 1; k < many.size(); ++k) {
    for (std::size_t t = 0; t < sweep.games[k].trials.size(); ++t) {
      EXPECT_GE(sweep.games[k].trials[t].nbr, sweep.games[k - 1].trials[t].nbr);
    }
  }
  const std::vector<double> unsorted{0.1, 0.05};
  EXPECT_THROW((void)fpr_sweep(task, s, unsorted), std::invalid_argument);
}

TEST(Sweeps, StrengthSweepBasics) {
  const auto task = mini_task();
  auto s = mini_scenario();
  s.trials = 1;
  const std::vector<double> eps{0.002, 0.1};
  const auto pts = strength_sweep(task, s, eps);
  ASSERT_EQ(pts.size(), 2u);
  EXPECT_EQ(pts[0].epsilon, 0.002);
  // A tiny budget cannot move inputs across the boundary at all.
  EXPECT_EQ(pts[0].post_success_mean, 0.0);
  EXPECT_GT(pts[1].game.trials[0].rounds[0].pre_transfer, pts[0].game.trials[0].rounds[0].pre_transfer);
}

TEST(Scenario, Validation) {
  auto bad = [](auto mutate) {
    auto s = mini_scenario();
    mutate(s);
    EXPECT_THROW(s.validate(), std::invalid_argument);
  };
  bad([](BreachScenario& s) { s.horizon = 0; });
  bad([](BreachScenario& s) { s.nbr_cutoff = 1.0; });
  bad([](BreachScenario& s) { s.target_fpr = 0.7; });
  bad([](BreachScenario& s) { s.trials = 0; });
  bad([](BreachScenario& s) { s.prune_ratio = 0.8; });
}
