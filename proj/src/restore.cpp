#include "hcache/restore.hpp"

#include <chrono>
#include <condition_variable>
#include <mutex>
#include <queue>
#include <thread>

namespace hcache {

int ThrottleConfig::round_up_tokens(int n) const {
  if (n <= 0) return 0;
  int step = std::max(1, gemm_step_tokens);
  return ((n + step - 1) / step) * step;
}

double ThrottleConfig::projection_seconds(int n_tokens, int d_hidden) const {
  double n = double(round_up_tokens(n_tokens));
  double d = double(d_hidden);
  return 4.0 * n * d * d / profile.eff_flops();
}

double ThrottleConfig::full_layer_seconds(int n_tokens, int d_hidden) const {
  double n = double(round_up_tokens(n_tokens));
  double d = double(d_hidden);
  // quadratic attention term uses the true token count
  double nn = double(n_tokens);
  return (24.0 * n * d * d + nn * nn * d) / profile.eff_flops();
}

double ThrottleConfig::projection_seconds_minibatched(int n_tokens, int d_hidden) const {
  double t = 0;
  int left = n_tokens;
  int mb = std::max(1, minibatch_tokens);
  while (left > 0) {
    int take = std::min(mb, left);
    t += projection_seconds(take, d_hidden);
    left -= take;
  }
  return t;
}

namespace {

struct LayerWork {
  int layer;
  LayerMethod method;
};

std::vector<LayerWork> compute_order(const RestorationPlan& plan) {
  std::vector<LayerWork> order;
  // recompute prefix first, then hidden, then the KV suffix (io-only)
  for (int L = 0; L < plan.n_layers(); ++L)
    if (plan.layer_assignment[std::size_t(L)] == LayerMethod::Recompute)
      order.push_back({L, LayerMethod::Recompute});
  for (int L = 0; L < plan.n_layers(); ++L)
    if (plan.layer_assignment[std::size_t(L)] == LayerMethod::Hidden)
      order.push_back({L, LayerMethod::Hidden});
  for (int L = 0; L < plan.n_layers(); ++L)
    if (plan.layer_assignment[std::size_t(L)] == LayerMethod::KvOffload)
      order.push_back({L, LayerMethod::KvOffload});
  return order;
}

// Real data movement/compute for one layer of the plan.
void execute_layer(StorageManager& store, const SessionManifest& m,
                   const WeightSet& ws, const LayerWork& w, KVCache& kv) {
  switch (w.method) {
    case LayerMethod::Hidden: {
      auto h = store.read_layer(m, w.layer, StateKind::Hidden);
      if (!h) throw std::runtime_error("missing hidden chunks for layer " +
                                       std::to_string(w.layer));
      LayerKV lkv = project_hidden_to_kv(ws, w.layer, *h, 0);
      kv.layers[std::size_t(w.layer)] = std::move(lkv);
      break;
    }
    case LayerMethod::KvOffload: {
      auto rows = store.read_layer(m, w.layer, StateKind::Kv);
      if (!rows) throw std::runtime_error("missing KV chunks for layer " +
                                          std::to_string(w.layer));
      kv.layers[std::size_t(w.layer)] = split_kv(*rows);
      break;
    }
    case LayerMethod::Recompute:
      break;  // handled in one pass over the prefix
  }
}

RestoreResult restore_simulated(StorageManager& store, const SessionManifest& m,
                                const WeightSet& ws, const RestorationPlan& plan,
                                const ThrottleConfig& throttle) {
  RestoreResult res;
  res.kv.layers.resize(std::size_t(ws.config.n_layers));

  // recompute prefix in one forward pass over the original tokens
  if (plan.complement == Complement::Recompute && plan.l_o > 0) {
    TokenSeq seq{m.tokens};
    prefill_layers(ws, seq, 0, plan.l_o, res.kv);
  }
  auto order = compute_order(plan);
  std::vector<PipelineJob> jobs;
  for (const auto& w : order) {
    execute_layer(store, m, ws, w, res.kv);
    PipelineJob job;
    job.layer = w.layer;
    switch (w.method) {
      case LayerMethod::Hidden:
        job.has_io = true;
        job.io_s = store.simulated_read_seconds(m, w.layer, StateKind::Hidden);
        job.io_kind = "fetch_hidden";
        job.has_compute = true;
        job.compute_s = throttle.projection_seconds_minibatched(m.n_tokens,
                                                                ws.config.d_hidden);
        job.compute_kind = "project";
        break;
      case LayerMethod::KvOffload:
        job.has_io = true;
        job.io_s = store.simulated_read_seconds(m, w.layer, StateKind::Kv);
        job.io_kind = "fetch_kv";
        break;
      case LayerMethod::Recompute:
        job.has_compute = true;
        job.compute_s = throttle.full_layer_seconds(m.n_tokens, ws.config.d_hidden);
        job.compute_kind = "recompute";
        break;
    }
    jobs.push_back(job);
  }
  res.timeline = simulate_pipeline(jobs, throttle.prefetch_depth);
  return res;
}

RestoreResult restore_wall(StorageManager& store, const SessionManifest& m,
                           const WeightSet& ws, const RestorationPlan& plan,
                           const ThrottleConfig& throttle) {
  RestoreResult res;
  res.kv.layers.resize(std::size_t(ws.config.n_layers));
  auto order = compute_order(plan);

  struct Fetched {
    LayerWork work;
    std::optional<Matrix> rows;
    double start_s, end_s;
  };
  std::mutex mu;
  std::condition_variable cv;
  std::queue<Fetched> staged;
  std::size_t max_staged = std::size_t(throttle.prefetch_depth) + 1;
  auto t0 = std::chrono::steady_clock::now();
  auto now_s = [&t0] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  std::thread io([&] {
    for (const auto& w : order) {
      if (w.method == LayerMethod::Recompute) continue;
      StateKind kind =
          w.method == LayerMethod::Hidden ? StateKind::Hidden : StateKind::Kv;
      {
        std::unique_lock<std::mutex> lk(mu);
        cv.wait(lk, [&] { return staged.size() < max_staged; });
      }
      Fetched f;
      f.work = w;
      f.start_s = now_s();
      f.rows = store.read_layer(m, w.layer, kind);
      f.end_s = now_s();
      {
        std::lock_guard<std::mutex> lk(mu);
        staged.push(std::move(f));
      }
      cv.notify_all();
    }
  });

  Timeline tl;
  if (plan.complement == Complement::Recompute && plan.l_o > 0) {
    double s = now_s();
    TokenSeq seq{m.tokens};
    prefill_layers(ws, seq, 0, plan.l_o, res.kv);
    tl.events.push_back({Lane::Compute, plan.l_o - 1, "recompute", s, now_s()});
  }
  std::size_t n_fetches = 0;
  for (const auto& w : order)
    if (w.method != LayerMethod::Recompute) ++n_fetches;
  for (std::size_t i = 0; i < n_fetches; ++i) {
    Fetched f;
    {
      std::unique_lock<std::mutex> lk(mu);
      cv.wait(lk, [&] { return !staged.empty(); });
      f = std::move(staged.front());
      staged.pop();
    }
    cv.notify_all();
    tl.events.push_back({Lane::Io, f.work.layer,
                         f.work.method == LayerMethod::Hidden ? "fetch_hidden"
                                                              : "fetch_kv",
                         f.start_s, f.end_s});
    if (!f.rows)
      throw std::runtime_error("missing chunks for layer " +
                               std::to_string(f.work.layer));
    if (f.work.method == LayerMethod::Hidden) {
      double s = now_s();
      res.kv.layers[std::size_t(f.work.layer)] =
          project_hidden_to_kv(ws, f.work.layer, *f.rows, 0);
      tl.events.push_back({Lane::Compute, f.work.layer, "project", s, now_s()});
    } else {
      res.kv.layers[std::size_t(f.work.layer)] = split_kv(*f.rows);
    }
  }
  io.join();
  for (const auto& e : tl.events) tl.total_s = std::max(tl.total_s, e.end_s);
  for (const auto& e : tl.events)
    if (e.lane == Lane::Io) {
      tl.fill_s = e.end_s;
      break;
    }
  res.timeline = std::move(tl);
  return res;
}

}  // namespace

RestoreResult restore(StorageManager& store, const std::string& session_id,
                      const WeightSet& ws, const RestorationPlan& plan,
                      const ThrottleConfig& throttle) {
  SessionManifest m = store.open(session_id);
  if (m.n_layers != ws.config.n_layers || plan.n_layers() != ws.config.n_layers)
    throw std::invalid_argument("restore: layer count mismatch");
  if (plan.serialize() != m.plan.serialize())
    throw std::invalid_argument("restore: plan does not match session manifest");
  if (throttle.mode == ThrottleConfig::Mode::WallClock)
    return restore_wall(store, m, ws, plan, throttle);
  return restore_simulated(store, m, ws, plan, throttle);
}

RestoreResult restore_token_wise(StorageManager& store, const std::string& session_id,
                                 const WeightSet& ws, int hidden_tokens,
                                 const ThrottleConfig& throttle) {
  SessionManifest m = store.open(session_id);
  int n = m.n_tokens;
  if (hidden_tokens < 0 || hidden_tokens > n)
    throw std::invalid_argument("restore_token_wise: bad split");
  int s = hidden_tokens;
  int d = ws.config.d_hidden;
  RestoreResult res;
  res.kv.layers.resize(std::size_t(ws.config.n_layers));

  // per-layer IO: hidden chunks covering [0, s) plus KV chunks overlapping [s, n)
  int hidden_chunk_tokens = s;  // contiguous prefix
  int kv_chunks = (s < n)
                      ? (n + kChunkTokens - 1) / kChunkTokens - s / kChunkTokens
                      : 0;
  double io_layer =
      store.simulated_read_seconds_tokens(hidden_chunk_tokens, d, m.elem_bytes) +
      store.simulated_read_seconds_tokens(kv_chunks * kChunkTokens, 2 * d,
                                          m.elem_bytes);
  double c_layer = s > 0 ? throttle.projection_seconds_minibatched(s, d) : 0.0;

  Timeline tl;
  double t = 0;
  for (int L = 0; L < ws.config.n_layers; ++L) {
    // data: project hidden prefix, splice stored KV for the rest
    LayerKV out{Matrix(0, 0), Matrix(0, 0)};
    if (s > 0) {
      auto h = store.read_layer(m, L, StateKind::Hidden);
      if (!h) throw std::runtime_error("token-wise: no hidden chunks");
      Matrix prefix = row_slice(*h, 0, std::size_t(s));
      out = project_hidden_to_kv(ws, L, prefix, 0);
    }
    if (s < n) {
      auto rows = store.read_layer(m, L, StateKind::Kv);
      if (!rows) throw std::runtime_error("token-wise: no KV chunks");
      LayerKV rest = split_kv(row_slice(*rows, std::size_t(s), std::size_t(n)));
      append_rows(out.k, rest.k);
      append_rows(out.v, rest.v);
    }
    res.kv.layers[std::size_t(L)] = std::move(out);

    // timing: transmission of layer L+1 overlaps computation of layer L,
    // with a synchronization barrier at every layer boundary
    if (L == 0) {
      tl.events.push_back({Lane::Io, 0, "fetch_split", 0, io_layer});
      t = io_layer;
      tl.fill_s = io_layer;
    }
    double stage = 0;
    if (c_layer > 0) {
      tl.events.push_back({Lane::Compute, L, "project", t, t + c_layer});
      stage = c_layer;
    }
    if (L + 1 < ws.config.n_layers) {
      tl.events.push_back({Lane::Io, L + 1, "fetch_split", t, t + io_layer});
      stage = std::max(stage, io_layer);
    }
    t += stage;
  }
  tl.total_s = t;
  res.timeline = std::move(tl);
  return res;
}

}  // namespace hcache
