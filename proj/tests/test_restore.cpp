#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>

#include "doctest.h"
#include "hcache/restore.hpp"

using namespace hcache;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.n_layers = 4;
  c.d_hidden = 64;
  c.n_heads = 4;
  c.d_ffn = 256;
  c.vocab_size = 128;
  return c;
}

DevicePool make_pool(const std::string& name, int devices, double bw, double lat) {
  DevicePool pool;
  pool.bw_bytes_per_s = bw;
  pool.read_latency_s = lat;
  fs::path base = fs::path("restoretest") / name;
  fs::remove_all(base);
  for (int i = 0; i < devices; ++i) {
    fs::path root = base / ("dev" + std::to_string(i));
    fs::create_directories(root);
    pool.roots.push_back(root);
  }
  return pool;
}

std::vector<int> seq(int n, int vocab) {
  std::vector<int> t(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) t[std::size_t(i)] = (i * 13 + 5) % vocab;
  return t;
}

// Prefills `tokens`, persists what `plan` needs (plus extras when
// `store_everything`), and returns the reference cache.
KVCache build_session(StorageManager& store, const std::string& id,
                      const WeightSet& ws, const std::vector<int>& tokens,
                      const RestorationPlan& plan, bool store_everything = false) {
  PrefillResult pr = prefill(ws, TokenSeq{tokens});
  SessionSeed seed{id,
                   ws.config.hash(),
                   ws.config.n_layers,
                   ws.config.d_hidden,
                   ws.config.elem_bytes,
                   plan,
                   tokens};
  store.create_session(seed);
  for (int L = 0; L < ws.config.n_layers; ++L) {
    LayerMethod m = plan.layer_assignment[std::size_t(L)];
    if (m == LayerMethod::Hidden || store_everything)
      store.snapshot(id, L, StateKind::Hidden, pr.layer_inputs[std::size_t(L)]);
    if (m == LayerMethod::KvOffload || store_everything)
      store.snapshot(id, L, StateKind::Kv, interleave_kv(pr.kv.layers[std::size_t(L)]));
  }
  store.finalize(id);
  return std::move(pr.kv);
}

void check_kv_equal(const KVCache& a, const KVCache& b) {
  REQUIRE(a.layers.size() == b.layers.size());
  for (std::size_t L = 0; L < a.layers.size(); ++L) {
    CHECK(max_abs_diff(a.layers[L].k, b.layers[L].k) == 0.0);
    CHECK(max_abs_diff(a.layers[L].v, b.layers[L].v) == 0.0);
  }
}

// c_h for a 256-token layer equals io_h when flops = 6.4e10 at bw 1e9
ThrottleConfig throttle_with_flops(double flops) {
  ThrottleConfig t;
  t.mode = ThrottleConfig::Mode::Simulated;
  t.profile.flops = flops;
  t.profile.efficiency = 1.0;
  t.gemm_step_tokens = 256;
  t.minibatch_tokens = 1024;
  return t;
}

constexpr double kIoH = 256.0 * 64 * 4 / 1e9;  // 65.536 us per layer

}  // namespace

TEST_CASE("balanced all-hidden pipeline finishes in (N+1) stages") {
  WeightSet ws = init_model(tiny(), 3);
  StorageManager store(make_pool("balanced", 1, 1e9, 0));
  RestorationPlan p = RestorationPlan::make(4, 4, Complement::None);
  KVCache want = build_session(store, "s", ws, seq(256, 128), p);

  ThrottleConfig th = throttle_with_flops(6.4e10);  // c_h == io_h
  RestoreResult r = restore(store, "s", ws, p, th);
  check_kv_equal(r.kv, want);
  CHECK(r.timeline.total_s == doctest::Approx(5 * kIoH).epsilon(1e-9));
  CHECK(r.timeline.fill_s == doctest::Approx(kIoH).epsilon(1e-9));
  CHECK(r.timeline.bubble_fraction() < 0.25);
}

TEST_CASE("pure KV restoration is io-serial with an idle compute lane") {
  WeightSet ws = init_model(tiny(), 3);
  StorageManager store(make_pool("purekv", 1, 1e9, 0));
  RestorationPlan p = RestorationPlan::make(4, 0, Complement::KvOffload);
  KVCache want = build_session(store, "s", ws, seq(256, 128), p);

  RestoreResult r = restore(store, "s", ws, p, throttle_with_flops(6.4e10));
  check_kv_equal(r.kv, want);
  CHECK(r.timeline.total_s == doctest::Approx(4 * 2 * kIoH).epsilon(1e-9));
  CHECK(r.timeline.bubble_fraction() == doctest::Approx(1.0));
}

TEST_CASE("io at twice compute leaves the predicted bubble") {
  WeightSet ws = init_model(tiny(), 3);
  StorageManager store(make_pool("bubble", 1, 1e9, 0));
  RestorationPlan p = RestorationPlan::make(4, 4, Complement::None);
  build_session(store, "s", ws, seq(256, 128), p);

  RestoreResult r = restore(store, "s", ws, p, throttle_with_flops(1.28e11));
  // fetches serialize: 4 * io + final projection of io/2
  CHECK(r.timeline.total_s == doctest::Approx(4.5 * kIoH).epsilon(1e-9));
  CHECK(r.timeline.bubble_fraction() == doctest::Approx(4.0 / 9.0).epsilon(1e-9));
}

TEST_CASE("hybrid KV_OFFLOAD plan reproduces the prefill cache bit for bit") {
  WeightSet ws = init_model(tiny(), 9);
  StorageManager store(make_pool("hybrid", 2, 1e9, 0));
  RestorationPlan p = RestorationPlan::make(4, 2, Complement::KvOffload);
  KVCache want = build_session(store, "s", ws, seq(200, 128), p);
  RestoreResult r = restore(store, "s", ws, p, throttle_with_flops(6.4e10));
  check_kv_equal(r.kv, want);
}

TEST_CASE("recompute prefix reproduces the prefill cache bit for bit") {
  WeightSet ws = init_model(tiny(), 10);
  StorageManager store(make_pool("recomp", 2, 1e9, 0));
  RestorationPlan p = RestorationPlan::make(4, 1, Complement::Recompute);
  KVCache want = build_session(store, "s", ws, seq(100, 128), p);
  RestoreResult r = restore(store, "s", ws, p, throttle_with_flops(6.4e10));
  check_kv_equal(r.kv, want);
  // three recompute stages plus the hidden layer appear on the timeline
  int recompute_events = 0;
  for (const auto& e : r.timeline.events)
    if (e.kind == "recompute") ++recompute_events;
  CHECK(recompute_events == 3);
}

TEST_CASE("total time matches the planner's two-lane model to one stage") {
  WeightSet ws = init_model(tiny(), 4);
  for (int l_h : {0, 2, 4}) {
    StorageManager store(make_pool("model" + std::to_string(l_h), 1, 1e9, 0));
    Complement c = l_h == 4 ? Complement::None : Complement::KvOffload;
    RestorationPlan p = RestorationPlan::make(4, l_h, c);
    build_session(store, "s", ws, seq(256, 128), p);
    ThrottleConfig th = throttle_with_flops(6.4e10);
    RestoreResult r = restore(store, "s", ws, p, th);

    ProfiledTimings t;
    t.io_h = kIoH;
    t.io_kv = 2 * kIoH;
    t.c_h = th.projection_seconds_minibatched(256, 64);
    t.c_token = th.full_layer_seconds(256, 64);
    t.n_layers = 4;
    double m = makespan(p, t);
    CHECK(r.timeline.total_s >= m - 1e-12);
    CHECK(r.timeline.total_s <= m + std::max(t.io_kv, t.c_h) + 1e-12);
  }
}

TEST_CASE("faster devices never slow restoration down") {
  WeightSet ws = init_model(tiny(), 5);
  RestorationPlan p = RestorationPlan::make(4, 4, Complement::None);
  double prev = 1e300;
  for (double bw : {5e8, 1e9, 4e9, 1e12}) {
    StorageManager store(make_pool("bw", 1, bw, 0));
    build_session(store, "s", ws, seq(256, 128), p);
    RestoreResult r = restore(store, "s", ws, p, throttle_with_flops(6.4e10));
    CHECK(r.timeline.total_s <= prev + 1e-15);
    prev = r.timeline.total_s;
  }
}

TEST_CASE("wall-clock mode restores the same cache") {
  WeightSet ws = init_model(tiny(), 6);
  StorageManager store(make_pool("wall", 2, 0, 0));
  RestorationPlan p = RestorationPlan::make(4, 3, Complement::KvOffload);
  KVCache want = build_session(store, "s", ws, seq(150, 128), p);
  ThrottleConfig th = throttle_with_flops(6.4e10);
  th.mode = ThrottleConfig::Mode::WallClock;
  RestoreResult r = restore(store, "s", ws, p, th);
  check_kv_equal(r.kv, want);
  CHECK(r.timeline.total_s > 0);
  CHECK_FALSE(r.timeline.events.empty());
}

TEST_CASE("restore rejects a plan that disagrees with the manifest") {
  WeightSet ws = init_model(tiny(), 7);
  StorageManager store(make_pool("mismatch", 1, 1e9, 0));
  RestorationPlan stored = RestorationPlan::make(4, 4, Complement::None);
  build_session(store, "s", ws, seq(64, 128), stored);
  RestorationPlan other = RestorationPlan::make(4, 2, Complement::KvOffload);
  CHECK_THROWS_AS(restore(store, "s", ws, other, throttle_with_flops(6.4e10)),
                  std::invalid_argument);
}

TEST_CASE("token-wise split at the extremes matches the layer-wise paths") {
  WeightSet ws = init_model(tiny(), 8);
  StorageManager store(make_pool("tw", 1, 1e9, 0));
  RestorationPlan all_h = RestorationPlan::make(4, 4, Complement::None);
  KVCache want = build_session(store, "s", ws, seq(256, 128), all_h, true);
  ThrottleConfig th = throttle_with_flops(6.4e10);

  RestoreResult full = restore_token_wise(store, "s", ws, 256, th);
  check_kv_equal(full.kv, want);
  RestoreResult layer = restore(store, "s", ws, all_h, th);
  CHECK(full.timeline.total_s == doctest::Approx(layer.timeline.total_s).epsilon(1e-9));

  RestoreResult none = restore_token_wise(store, "s", ws, 0, th);
  check_kv_equal(none.kv, want);

  CHECK_THROWS(restore_token_wise(store, "s", ws, 257, th));
  CHECK_THROWS(restore_token_wise(store, "s", ws, -1, th));
}

TEST_CASE("mid-sequence token split restores correctly but reads more") {
  WeightSet ws = init_model(tiny(), 12);
  StorageManager store(make_pool("twmid", 1, 1e9, 0));
  RestorationPlan all_h = RestorationPlan::make(4, 4, Complement::None);
  KVCache want = build_session(store, "s", ws, seq(320, 128), all_h, true);
  // io-bound regime: the overlapping chunk reads and per-layer barriers of
  // the vertical split cost real time
  ThrottleConfig th = throttle_with_flops(1e12);
  th.gemm_step_tokens = 1;

  RestoreResult layer = restore(store, "s", ws, all_h, th);
  for (int split : {130, 192, 256}) {
    RestoreResult r = restore_token_wise(store, "s", ws, split, th);
    check_kv_equal(r.kv, want);
    CHECK(r.timeline.total_s > layer.timeline.total_s);
  }
}
