#include <gtest/gtest.h>

#include <atomic>
#include <map>
#include <thread>

#include "vrec/gateway.hpp"

using namespace vrec;

namespace {

TaskDataset small_task() {
  GlyphParams p;
  p.num_classes = 4;
  p.side = 8;
  p.train_per_class = 60;
  p.validation_per_class = 40;
  p.test_per_class = 20;
  return make_glyph_task(p, 3);
}

GatewayOptions small_options() {
  GatewayOptions o;
  o.hidden_per_label = 30;
  o.train.epochs = 8;
  o.train.hidden_layers = {16, 16};
  o.seed = 5;
  return o;
}

// Store with a single deployed version and nothing retired.
struct Bootstrapped {
  TaskDataset task = small_task();
  VersionStore store;
  Bootstrapped() {
    const auto o = small_options();
    Rng rng(o.seed);
    (void)retire_and_replace(store, task, o.sigma0, o.train, rng, o.hidden_per_label);
  }
};

}  // namespace

TEST(Gateway, NoFilterBeforeFirstBreach) {
  Bootstrapped b;
  Gateway g(b.store, b.task, small_options());
  EXPECT_FALSE(g.snapshot()->filter.has_value());
  const auto r = g.classify(b.task.test[0].x);
  EXPECT_FALSE(r.flagged);
  EXPECT_FALSE(r.delta.has_value());
  EXPECT_EQ(r.version, 1);
  const auto j = nlohmann::json::parse(g.handle_line(R"({"classify": )" + nlohmann::json(b.task.test[1].x).dump() + "}"));
  EXPECT_TRUE(j.at("delta").is_null());
  EXPECT_TRUE(j.at("threshold").is_null());
  EXPECT_EQ(j.at("flagged"), false);
}

TEST(Gateway, BreachRotatesAndCalibrates) {
  Bootstrapped b;
  Gateway g(b.store, b.task, small_options());
  const auto before = g.status();
  EXPECT_EQ(before.at("rotations"), 0);
  EXPECT_TRUE(before.at("threshold").is_null());

  const auto resp = nlohmann::json::parse(g.handle_line(R"({"breach": true, "id": 7})"));
  EXPECT_EQ(resp.at("rotated"), true);
  EXPECT_EQ(resp.at("deployed"), 2);
  EXPECT_EQ(resp.at("retired"), nlohmann::json::array({1}));
  EXPECT_EQ(resp.at("id"), 7);

  const auto after = g.status();
  EXPECT_EQ(after.at("rotations"), 1);
  EXPECT_EQ(after.at("deployed"), 2);
  EXPECT_TRUE(after.at("threshold").is_number());
  const auto snap = g.snapshot();
  ASSERT_TRUE(snap->filter.has_value());
  EXPECT_EQ(after.at("threshold").get<double>(), *snap->filter->threshold);

  const auto r = g.classify(b.task.test[0].x);
  EXPECT_EQ(r.version, 2);
  ASSERT_TRUE(r.delta.has_value());
  EXPECT_EQ(r.flagged, *r.delta >= *r.threshold);
}

TEST(Gateway, CountersTrackQueries) {
  Bootstrapped b;
  Gateway g(b.store, b.task, small_options());
  (void)g.breach();
  std::uint64_t flagged = 0;
  for (int i = 0; i < 20; ++i) flagged += g.classify(b.task.test[static_cast<std::size_t>(i)].x).flagged;
  const auto s = g.status();
  EXPECT_EQ(s.at("queries"), 20);
  EXPECT_EQ(s.at("flagged"), flagged);
  EXPECT_EQ(s.at("latency_us").at("count"), 20);
  EXPECT_GE(s.at("latency_us").at("max").get<double>(), s.at("latency_us").at("mean").get<double>());
}

TEST(Gateway, BadRequestsProduceErrors) {
  Bootstrapped b;
  Gateway g(b.store, b.task, small_options());
  EXPECT_THROW((void)g.classify(Vector(3, 0.5)), DimensionError);

  auto err = [&](const std::string& line) { return nlohmann::json::parse(g.handle_line(line)); };
  EXPECT_TRUE(err(R"({"classify": [0.1, 0.2]})").contains("error"));
  EXPECT_TRUE(err("{not json").contains("error"));
  EXPECT_TRUE(err("[1, 2]").contains("error"));
  EXPECT_TRUE(err(R"({"hello": 1})").contains("error"));
  const auto with_id = err(R"({"frobnicate": 1, "id": "abc"})");
  EXPECT_EQ(with_id.at("id"), "abc");
  EXPECT_EQ(g.status().at("errors"), 5);
  EXPECT_EQ(g.status().at("queries"), 0);
}

TEST(Gateway, ServerRoundTripKeepsConnectionAfterErrors) {
  Bootstrapped b;
  Gateway g(b.store, b.task, small_options());
  GatewayServer server(g);
  ASSERT_NE(server.port(), 0);
  GatewayClient client("127.0.0.1", server.port());

  const auto first = client.request({{"classify", b.task.test[0].x}, {"id", 1}});
  EXPECT_EQ(first.at("id"), 1);
  EXPECT_EQ(first.at("version"), 1);
  EXPECT_EQ(first.at("label").get<int>(), g.classify(b.task.test[0].x).label);

  EXPECT_TRUE(nlohmann::json::parse(client.request_line("garbage")).contains("error"));
  EXPECT_TRUE(client.request({{"classify", Vector(2, 0.0)}}).contains("error"));

  const auto rot = client.request({{"breach", true}});
  EXPECT_EQ(rot.at("deployed"), 2);
  const auto after = client.request({{"classify", b.task.test[0].x}});
  EXPECT_EQ(after.at("version"), 2);
  EXPECT_TRUE(after.at("delta").is_number());
  EXPECT_EQ(client.request({{"status", true}}).at("rotations"), 1);
  server.stop();
}

TEST(Gateway, RotationIsAtomicUnderConcurrentClassify) {
  Bootstrapped b;
  Gateway g(b.store, b.task, small_options());
  (void)g.breach();

  // Record every snapshot that ever becomes visible.
  std::map<int, std::shared_ptr<const GatewaySnapshot>> published;
  auto record = [&](std::shared_ptr<const GatewaySnapshot> s) { published[s->deployed->id] = std::move(s); };
  record(g.snapshot());

  struct Seen {
    int version;
    double threshold;
    std::size_t input;
    int label;
    bool flagged;
    double delta;
  };
  constexpr int kThreads = 8;
  constexpr int kPerThread = 250;
  std::vector<std::vector<Seen>> seen(kThreads);
  std::atomic<bool> go{false};
  std::vector<std::thread> workers;
  for (int t = 0; t < kThreads; ++t) {
    workers.emplace_back([&, t] {
      while (!go) std::this_thread::yield();
      for (int i = 0; i < kPerThread; ++i) {
        const auto k = static_cast<std::size_t>((t * kPerThread + i) % static_cast<int>(b.task.test.size()));
        const auto r = g.classify(b.task.test[k].x);
        seen[static_cast<std::size_t>(t)].push_back({r.version, *r.threshold, k, r.label, r.flagged, *r.delta});
      }
    });
  }
  go = true;
  for (int k = 0; k < 2; ++k) record(g.breach());
  for (auto& w : workers) w.join();

  // Every response must match one complete snapshot: its version, that version's threshold,
  // and the label and delta that snapshot computes.
  ASSERT_EQ(published.size(), 3u);
  for (const auto& per : seen) {
    for (const auto& s : per) {
      const auto it = published.find(s.version);
      ASSERT_NE(it, published.end()) << "unknown version " << s.version;
      const auto expect = classify_handler(b.task.test[s.input].x, *it->second);
      ASSERT_EQ(s.threshold, *expect.threshold);
      ASSERT_EQ(s.label, expect.label);
      ASSERT_EQ(s.delta, *expect.delta);
      ASSERT_EQ(s.flagged, expect.flagged);
    }
  }
  EXPECT_EQ(g.status().at("queries"), kThreads * kPerThread);
  EXPECT_EQ(g.status().at("rotations"), 3);
}
