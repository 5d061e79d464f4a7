#pragma once

#include <map>
#include <string>
#include <vector>

#include "hcache/cost_model.hpp"
#include "hcache/restore.hpp"
#include "hcache/storage.hpp"
#include "hcache/trace.hpp"

namespace hcache {

enum class Strategy { HCache, KvOffload, Recompute, Ideal };
const char* to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

enum class SavingMode { TwoStage, Direct, Off };

// Timing model for the serving loop's simulated clock. Compute times come
// from the throttle profile; saving costs follow the per-layer overlap
// model: a layer's state copy stalls the GPU only when it outlasts that
// layer's compute.
struct SimProfile {
  double host_bw = 25e9;               // stage-1 bulk snapshot bandwidth
  double device_write_bw = 6.9e9;      // per device, stage-2 flush
  double device_write_latency_s = 5e-5;  // per write op (small-write penalty)
  SavingMode saving = SavingMode::TwoStage;
};

struct RequestMetrics {
  std::string session_id;
  int round = 1;
  double arrival_s = 0;
  int history_tokens = 0;
  double restore_s = 0;
  double ttft_s = 0;
  double tbt_s = 0;  // mean, excluding the first token; 0 when budget == 1
  int generated = 0;
};

struct Metrics {
  Strategy strategy = Strategy::Ideal;
  std::vector<RequestMetrics> per_request;
  std::vector<std::vector<int>> outputs;  // generated token ids per request

  double ttft_p50 = 0, ttft_p95 = 0;
  double tbt_mean = 0, tbt_p50 = 0, tbt_p95 = 0;
  double restore_tokens_per_s = 0;  // sum(history) / sum(restore time)
  double storage_bytes_per_token = 0;
  std::uint64_t saved_bytes = 0;
  std::uint64_t saved_tokens = 0;
  std::uint64_t backpressure_stalls = 0;

  void finalize_aggregates();
  std::string to_csv() const;
  static Metrics from_csv(const std::string& text);
};

struct RunOptions {
  Strategy strategy = Strategy::HCache;
  ThrottleConfig throttle;
  SimProfile sim;
  RestorationPlan hcache_plan;  // required for Strategy::HCache
};

// Drives restore -> prefill -> decode per request over a virtual clock with
// continuous batching (one restoration+prefill in flight; strict phase
// ordering). Generated tokens are computed with the real model; durations
// come from the simulated profile (or wall clock, per throttle.mode).
Metrics run(const Trace& trace, const WeightSet& ws, DevicePool pool,
            const RunOptions& opt);

// Offline micro-profiler: measures per-layer io_h, io_kv, c_h, c_token at
// the throttle's mini-batch size against a scratch session in `store`.
ProfiledTimings profile_hardware(const WeightSet& ws, StorageManager& store,
                                 const ThrottleConfig& throttle);

// Aligned comparison table; ratio columns are relative to the HCACHE row
// when present. csv=true emits machine-readable lines instead.
std::string report(const std::vector<Metrics>& sets, bool csv = false);

}  // namespace hcache
