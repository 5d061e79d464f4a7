#include "hcache/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace hcache {

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::HCache: return "HCACHE";
    case Strategy::KvOffload: return "KV_OFFLOAD";
    case Strategy::Recompute: return "RECOMPUTE";
    case Strategy::Ideal: return "IDEAL";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "HCACHE" || s == "hcache") return Strategy::HCache;
  if (s == "KV_OFFLOAD" || s == "kv_offload") return Strategy::KvOffload;
  if (s == "RECOMPUTE" || s == "recompute") return Strategy::Recompute;
  if (s == "IDEAL" || s == "ideal") return Strategy::Ideal;
  throw std::invalid_argument("unknown strategy: " + s);
}

namespace {

double percentile(std::vector<double> xs, double p) {
  if (xs.empty()) return 0;
  std::sort(xs.begin(), xs.end());
  double idx = p * double(xs.size() - 1);
  std::size_t lo = std::size_t(idx);
  std::size_t hi = std::min(lo + 1, xs.size() - 1);
  double frac = idx - double(lo);
  return xs[lo] * (1 - frac) + xs[hi] * frac;
}

// Per-layer forward cost for n_new tokens attending to a cache of
// cache_after entries (post-append): 8nd^2 projections + FFN + score pair.
double layer_seconds(const ModelConfig& cfg, const HardwareProfile& p, int n_new,
                     int cache_after) {
  double d = cfg.d_hidden;
  double fl = 8.0 * n_new * d * d + 4.0 * n_new * d * cfg.d_ffn +
              double(n_new) * double(cache_after) * d;
  return fl / p.eff_flops();
}

struct SavingState {
  double occupancy = 0;  // virtual snapshot-buffer fill, bytes
  double last_t = 0;
  std::uint64_t stalls = 0;
};

// GPU stall charged for persisting `tokens` rows this step. The copy of one
// layer's states overlaps the next layer's compute, so only the excess over
// per-layer compute stalls. Two-stage pays a host-memory copy and fills a
// bounded buffer that drains to the devices in the background; direct IO
// pays the device write (including the per-op latency) on the spot.
double saving_step_cost(const SimProfile& sim, const ModelConfig& cfg,
                        const RestorationPlan& plan, int ndev, int tokens,
                        int write_ops_per_layer, double step_compute, double now,
                        std::size_t capacity, SavingState& st) {
  if (sim.saving == SavingMode::Off || tokens == 0) return 0;
  int nh = 0, nkv = 0;
  for (auto m : plan.layer_assignment) {
    if (m == LayerMethod::Hidden) ++nh;
    if (m == LayerMethod::KvOffload) ++nkv;
  }
  double eb = cfg.elem_bytes;
  double bytes_h = double(tokens) * cfg.d_hidden * eb;
  double bytes_kv = 2.0 * bytes_h;
  double per_layer_compute = step_compute / cfg.n_layers;
  double stall = 0;

  if (sim.saving == SavingMode::Direct) {
    for (int i = 0; i < nh; ++i)
      stall += std::max(0.0, write_ops_per_layer * sim.device_write_latency_s +
                                 bytes_h / (sim.device_write_bw * ndev) -
                                 per_layer_compute);
    for (int i = 0; i < nkv; ++i)
      stall += std::max(0.0, write_ops_per_layer * sim.device_write_latency_s +
                                 bytes_kv / (sim.device_write_bw * ndev) -
                                 per_layer_compute);
    return stall;
  }

  // two-stage: drain the virtual buffer for the time elapsed since the last
  // step, at the chunk-granular device write rate
  double chunk_b = double(kChunkTokens) * cfg.d_hidden * eb;
  double drain_rate =
      ndev * chunk_b / (sim.device_write_latency_s + chunk_b / sim.device_write_bw);
  st.occupancy = std::max(0.0, st.occupancy - (now - st.last_t) * drain_rate);
  st.last_t = now;

  for (int i = 0; i < nh; ++i)
    stall += std::max(0.0, bytes_h / sim.host_bw - per_layer_compute);
  for (int i = 0; i < nkv; ++i)
    stall += std::max(0.0, bytes_kv / sim.host_bw - per_layer_compute);

  double add = nh * bytes_h + nkv * bytes_kv;
  if (st.occupancy + add > double(capacity)) {
    double wait = (st.occupancy + add - double(capacity)) / drain_rate;
    stall += wait;
    st.occupancy = double(capacity);
    ++st.stalls;
  } else {
    st.occupancy += add;
  }
  return stall;
}

struct Active {
  std::size_t idx = 0;  // index into trace.requests
  KVCache kv;
  int last_token = -1;
  std::vector<int> out;
  std::vector<Matrix> hidden;  // this round's rows, HIDDEN-planned layers only
  int hist_before = 0;
  int budget = 1;
  bool flushed = false;
  double first_emit_t = 0, last_emit_t = 0;
  RequestMetrics rm;
};

}  // namespace

void Metrics::finalize_aggregates() {
  std::vector<double> ttft, tbt;
  double hist_sum = 0, restore_sum = 0;
  tbt_mean = 0;
  for (const auto& r : per_request) {
    ttft.push_back(r.ttft_s);
    if (r.generated > 1) tbt.push_back(r.tbt_s);
    hist_sum += r.history_tokens;
    restore_sum += r.restore_s;
  }
  ttft_p50 = percentile(ttft, 0.50);
  ttft_p95 = percentile(ttft, 0.95);
  tbt_p50 = percentile(tbt, 0.50);
  tbt_p95 = percentile(tbt, 0.95);
  for (double x : tbt) tbt_mean += x;
  if (!tbt.empty()) tbt_mean /= double(tbt.size());
  restore_tokens_per_s = restore_sum > 0 ? hist_sum / restore_sum : 0;
  storage_bytes_per_token =
      saved_tokens > 0 ? double(saved_bytes) / double(saved_tokens) : 0;
}

std::string Metrics::to_csv() const {
  std::ostringstream os;
  os << "# strategy=" << to_string(strategy) << "\n";
  os << "session,round,arrival_s,history,restore_s,ttft_s,tbt_s,generated\n";
  os << std::setprecision(17);
  for (const auto& r : per_request)
    os << r.session_id << ',' << r.round << ',' << r.arrival_s << ','
       << r.history_tokens << ',' << r.restore_s << ',' << r.ttft_s << ','
       << r.tbt_s << ',' << r.generated << "\n";
  return os.str();
}

Metrics Metrics::from_csv(const std::string& text) {
  Metrics m;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line.rfind("# strategy=", 0) == 0) {
      m.strategy = strategy_from_string(line.substr(11));
      continue;
    }
    if (line.rfind("session,", 0) == 0) continue;
    RequestMetrics r;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    if (!(ls >> r.session_id >> r.round >> r.arrival_s >> r.history_tokens >>
          r.restore_s >> r.ttft_s >> r.tbt_s >> r.generated))
      throw std::runtime_error("metrics csv: bad row: " + line);
    m.per_request.push_back(std::move(r));
  }
  m.finalize_aggregates();
  return m;
}

Metrics run(const Trace& trace, const WeightSet& ws, DevicePool pool,
            const RunOptions& opt) {
  const ModelConfig& cfg = ws.config;
  pool.validate();
  int ndev = pool.count();
  StorageManager store(std::move(pool));
  bool persist = opt.strategy == Strategy::HCache || opt.strategy == Strategy::KvOffload;
  RestorationPlan run_plan =
      opt.strategy == Strategy::HCache
          ? opt.hcache_plan
          : RestorationPlan::make(cfg.n_layers, 0, Complement::KvOffload);
  if (persist && run_plan.n_layers() != cfg.n_layers)
    throw std::invalid_argument("run: plan does not cover the model's layers");
  bool wall = opt.throttle.mode == ThrottleConfig::Mode::WallClock;

  Metrics ms;
  ms.strategy = opt.strategy;
  ms.per_request.resize(trace.requests.size());
  ms.outputs.resize(trace.requests.size());

  std::map<std::string, std::vector<int>> history;
  std::deque<std::size_t> waiting;
  std::vector<Active> dec;
  std::size_t next_arr = 0;
  double t = 0;
  SavingState sav;

  auto persist_states = [&](const std::string& sid, const std::vector<Matrix>& hidden,
                            const KVCache& kv, int row_begin, int n_rows) {
    for (int L = 0; L < cfg.n_layers; ++L) {
      Matrix rows;
      StateKind kind = StateKind::Hidden;
      switch (run_plan.layer_assignment[std::size_t(L)]) {
        case LayerMethod::Hidden:
          rows = hidden[std::size_t(L)];
          kind = StateKind::Hidden;
          break;
        case LayerMethod::KvOffload: {
          LayerKV slice{row_slice(kv.layers[std::size_t(L)].k, std::size_t(row_begin),
                                  std::size_t(row_begin + n_rows)),
                        row_slice(kv.layers[std::size_t(L)].v, std::size_t(row_begin),
                                  std::size_t(row_begin + n_rows))};
          rows = interleave_kv(slice);
          kind = StateKind::Kv;
          break;
        }
        case LayerMethod::Recompute:
          continue;
      }
      while (!store.snapshot(sid, L, kind, rows)) store.drain();
      ms.saved_bytes += rows.v.size() * std::uint64_t(cfg.elem_bytes);
    }
    store.drain_all();
  };

  auto accumulate = [&](Active& a, const std::vector<Matrix>& layer_inputs) {
    if (!persist) return;
    for (int L = 0; L < cfg.n_layers; ++L)
      if (run_plan.layer_assignment[std::size_t(L)] == LayerMethod::Hidden)
        append_rows(a.hidden[std::size_t(L)], layer_inputs[std::size_t(L)]);
  };

  auto complete = [&](Active& a) {
    const Request& rq = trace.requests[a.idx];
    std::vector<int> round_tokens = rq.prompt;
    round_tokens.insert(round_tokens.end(), a.out.begin(), a.out.end());
    if (persist) {
      bool exists = rq.round > 1 || !rq.context.empty();
      if (exists) {
        store.reopen_for_append(rq.session_id, round_tokens);
      } else {
        SessionSeed seed{rq.session_id, cfg.hash(),     cfg.n_layers,
                         cfg.d_hidden,  cfg.elem_bytes, run_plan,
                         round_tokens};
        store.create_session(seed);
      }
      persist_states(rq.session_id, a.hidden, a.kv, a.hist_before,
                     int(round_tokens.size()));
      store.finalize(rq.session_id);
      ms.saved_tokens += round_tokens.size();
    }
    auto& hist = history[rq.session_id];
    hist.insert(hist.end(), round_tokens.begin(), round_tokens.end());
    a.rm.generated = int(a.out.size());
    a.rm.tbt_s = a.out.size() > 1
                     ? (a.last_emit_t - a.first_emit_t) / double(a.out.size() - 1)
                     : 0;
    ms.per_request[a.idx] = a.rm;
    ms.outputs[a.idx] = std::move(a.out);
  };

  // One batched decode step over `batch`. Every member's pending token runs
  // through the model; members that already emitted their budget are only
  // flushing that last token's state into the cache.
  auto decode_batch = [&](std::vector<Active*>& batch) {
    double step_compute = 0;
    for (Active* a : batch)
      step_compute += cfg.n_layers * layer_seconds(cfg, opt.throttle.profile, 1,
                                                   a->kv.length() + 1);
    int tok = int(batch.size());
    double stall = persist
                       ? saving_step_cost(opt.sim, cfg, run_plan, ndev, tok, tok,
                                          step_compute, t, store.buffer_capacity(), sav)
                       : 0;
    t += step_compute + stall;
    for (Active* a : batch) {
      DecodeResult dr = decode_step(ws, a->kv, a->last_token);
      accumulate(*a, dr.layer_inputs);
      if (int(a->out.size()) < a->budget) {
        a->out.push_back(dr.next_token);
        a->last_token = dr.next_token;
        a->last_emit_t = t;
      } else {
        a->flushed = true;
      }
    }
  };

  auto admit = [&](std::size_t idx) {
    const Request& rq = trace.requests[idx];
    auto& hist = history[rq.session_id];

    // long-context sessions were ingested offline; materialize their state
    // on first sight, charged at zero serving time
    if (!rq.context.empty() && hist.empty()) {
      KVCache seed_kv;
      PrefillResult pr = forward_tokens(ws, seed_kv, TokenSeq{rq.context});
      if (persist) {
        SessionSeed seed{rq.session_id, cfg.hash(),     cfg.n_layers,
                         cfg.d_hidden,  cfg.elem_bytes, run_plan,
                         rq.context};
        store.create_session(seed);
        persist_states(rq.session_id, pr.layer_inputs, seed_kv, 0,
                       int(rq.context.size()));
        store.finalize(rq.session_id);
        ms.saved_tokens += rq.context.size();
      }
      hist = rq.context;
    }

    Active a;
    a.idx = idx;
    a.budget = rq.output_budget;
    a.hist_before = int(hist.size());
    a.hidden.resize(std::size_t(cfg.n_layers));
    a.rm.session_id = rq.session_id;
    a.rm.round = rq.round;
    a.rm.arrival_s = rq.arrival_s;
    a.rm.history_tokens = a.hist_before;

    KVCache kv;
    double restore_s = 0;
    if (!hist.empty()) {
      switch (opt.strategy) {
        case Strategy::Ideal:
          forward_tokens(ws, kv, TokenSeq{hist});
          break;
        case Strategy::Recompute: {
          auto t0 = std::chrono::steady_clock::now();
          forward_tokens(ws, kv, TokenSeq{hist});
          if (wall) {
            restore_s = std::chrono::duration<double>(
                            std::chrono::steady_clock::now() - t0)
                            .count();
          } else {
            restore_s = cfg.n_layers * opt.throttle.full_layer_seconds(
                                           int(hist.size()), cfg.d_hidden);
          }
          break;
        }
        default: {
          RestoreResult rr =
              restore(store, rq.session_id, ws, run_plan, opt.throttle);
          kv = std::move(rr.kv);
          restore_s = rr.timeline.total_s;
        }
      }
    }
    t += restore_s;
    a.rm.restore_s = restore_s;

    int np = int(rq.prompt.size());
    PrefillResult pr = forward_tokens(ws, kv, TokenSeq{rq.prompt});
    double prefill_s = cfg.n_layers * layer_seconds(cfg, opt.throttle.profile, np,
                                                    a.hist_before + np);
    double stall =
        persist ? saving_step_cost(opt.sim, cfg, run_plan, ndev, np,
                                   (np + kChunkTokens - 1) / kChunkTokens,
                                   prefill_s, t, store.buffer_capacity(), sav)
                : 0;
    t += prefill_s + stall;

    a.kv = std::move(kv);
    a.rm.ttft_s = t - rq.arrival_s;
    a.first_emit_t = a.last_emit_t = t;
    a.out.push_back(pr.next_token);
    a.last_token = pr.next_token;
    accumulate(a, pr.layer_inputs);

    if (a.budget == 1) {
      std::vector<Active*> one{&a};
      decode_batch(one);  // flush the single emitted token's state
      complete(a);
    } else {
      dec.push_back(std::move(a));
    }
  };

  while (next_arr < trace.requests.size() || !waiting.empty() || !dec.empty()) {
    while (next_arr < trace.requests.size() &&
           trace.requests[next_arr].arrival_s <= t + 1e-12)
      waiting.push_back(next_arr++);
    if (waiting.empty() && dec.empty()) {
      t = std::max(t, trace.requests[next_arr].arrival_s);
      continue;
    }
    if (!waiting.empty()) {
      // strict phase ordering: a pending restoration+prefill pauses decode
      std::size_t idx = waiting.front();
      waiting.pop_front();
      admit(idx);
      continue;
    }
    std::vector<Active*> batch;
    batch.reserve(dec.size());
    for (auto& a : dec) batch.push_back(&a);
    decode_batch(batch);
    for (auto it = dec.begin(); it != dec.end();) {
      if (it->flushed) {
        complete(*it);
        it = dec.erase(it);
      } else {
        ++it;
      }
    }
  }

  ms.backpressure_stalls = sav.stalls + store.backpressure_events();
  ms.finalize_aggregates();
  return ms;
}

ProfiledTimings profile_hardware(const WeightSet& ws, StorageManager& store,
                                 const ThrottleConfig& throttle) {
  const ModelConfig& cfg = ws.config;
  int mb = throttle.minibatch_tokens;
  int d = cfg.d_hidden;

  ProfiledTimings t;
  t.n_layers = cfg.n_layers;

  if (throttle.mode == ThrottleConfig::Mode::Simulated) {
    t.io_h = store.simulated_read_seconds_tokens(mb, d, cfg.elem_bytes);
    t.io_kv = store.simulated_read_seconds_tokens(mb, 2 * d, cfg.elem_bytes);
    t.c_h = throttle.projection_seconds_minibatched(mb, d);
    t.c_token = throttle.full_layer_seconds(mb, d);
    t.validate();
    return t;
  }

  // wall clock: write one scratch layer of each kind, then time the reads
  // and the two compute stages directly
  static int scratch_counter = 0;
  std::string sid = "__profile" + std::to_string(scratch_counter++);
  std::vector<int> tokens(static_cast<std::size_t>(mb));
  for (int i = 0; i < mb; ++i) tokens[std::size_t(i)] = i % cfg.vocab_size;
  KVCache kv;
  PrefillResult pr = forward_tokens(ws, kv, TokenSeq{tokens});

  SessionSeed seed{sid,  cfg.hash(),     cfg.n_layers,
                   d,    cfg.elem_bytes, RestorationPlan::make(cfg.n_layers, cfg.n_layers,
                                                               Complement::None),
                   tokens};
  store.create_session(seed);
  while (!store.snapshot(sid, 0, StateKind::Hidden, pr.layer_inputs[0])) store.drain();
  while (!store.snapshot(sid, 0, StateKind::Kv, interleave_kv(kv.layers[0])))
    store.drain();
  store.finalize(sid);
  SessionManifest m = store.open(sid);

  auto timed = [](auto&& fn) {
    double best = 1e300;
    for (int rep = 0; rep < 3; ++rep) {
      auto t0 = std::chrono::steady_clock::now();
      fn();
      double dt =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      best = std::min(best, dt);
    }
    return best;
  };

  t.io_h = timed([&] { store.read_layer(m, 0, StateKind::Hidden); });
  t.io_kv = timed([&] { store.read_layer(m, 0, StateKind::Kv); });
  t.c_h = timed([&] { project_hidden_to_kv(ws, 0, pr.layer_inputs[0], 0); });
  t.c_token = timed([&] {
    KVCache scratch;
    prefill_layers(ws, TokenSeq{tokens}, 0, 1, scratch);
  });
  t.validate();
  return t;
}

std::string report(const std::vector<Metrics>& sets, bool csv) {
  const Metrics* hc = nullptr;
  for (const auto& m : sets)
    if (m.strategy == Strategy::HCache) hc = &m;

  std::ostringstream os;
  if (csv) {
    os << "strategy,requests,ttft_p50_s,ttft_p95_s,tbt_mean_s,restore_tok_per_s,"
          "bytes_per_token,ttft_vs_hcache\n";
    for (const auto& m : sets) {
      double ratio = hc && hc->ttft_p50 > 0 ? m.ttft_p50 / hc->ttft_p50 : 0;
      os << to_string(m.strategy) << ',' << m.per_request.size() << ','
         << m.ttft_p50 << ',' << m.ttft_p95 << ',' << m.tbt_mean << ','
         << m.restore_tokens_per_s << ',' << m.storage_bytes_per_token << ','
         << ratio << "\n";
    }
    return os.str();
  }

  os << std::left << std::setw(12) << "strategy" << std::right << std::setw(6)
     << "reqs" << std::setw(14) << "ttft_p50" << std::setw(14) << "ttft_p95"
     << std::setw(14) << "tbt_mean" << std::setw(16) << "restore_tok/s"
     << std::setw(12) << "bytes/tok" << std::setw(10) << "vs_hc" << "\n";
  for (const auto& m : sets) {
    char buf[256];
    double ratio = hc && hc->ttft_p50 > 0 ? m.ttft_p50 / hc->ttft_p50 : 0;
    std::snprintf(buf, sizeof(buf), "%-12s%6zu%14.5g%14.5g%14.5g%16.5g%12.5g%10.2f",
                  to_string(m.strategy), m.per_request.size(), m.ttft_p50,
                  m.ttft_p95, m.tbt_mean, m.restore_tokens_per_s,
                  m.storage_bytes_per_token, ratio);
    os << buf << "\n";
  }
  return os.str();
}

}  // namespace hcache
