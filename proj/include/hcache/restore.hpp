#pragma once

#include "hcache/cost_model.hpp"
#include "hcache/model.hpp"
#include "hcache/pipeline.hpp"
#include "hcache/planner.hpp"
#include "hcache/storage.hpp"

namespace hcache {

// Clock/throttle for the restoration engine. Simulated mode is fully
// deterministic: IO times come from the device pool throttle, compute times
// from the analytic GEMM model below. Wall-clock mode measures real threads.
struct ThrottleConfig {
  enum class Mode { WallClock, Simulated };
  Mode mode = Mode::Simulated;
  HardwareProfile profile;
  int gemm_step_tokens = 256;  // GEMM cost plateaus at multiples of this
  int prefetch_depth = 1;
  int minibatch_tokens = 1024;

  // Step-shaped token count: a GEMM over n tokens costs the same as one over
  // the next plateau boundary (vendor kernels are tuned for regular sizes).
  int round_up_tokens(int n) const;
  double projection_seconds(int n_tokens, int d_hidden) const;
  double full_layer_seconds(int n_tokens, int d_hidden) const;
  // per-layer projection time with the sequence split into minibatches
  double projection_seconds_minibatched(int n_tokens, int d_hidden) const;
};

struct RestoreResult {
  KVCache kv;
  Timeline timeline;
};

// Executes `plan` over a finalized session: hidden layers are fetched and
// projected on two overlapped lanes, the KV-offload suffix is fetched in
// residual IO time, the recompute prefix reruns the model from the original
// tokens while later layers' hidden states are prefetched.
RestoreResult restore(StorageManager& store, const std::string& session_id,
                      const WeightSet& ws, const RestorationPlan& plan,
                      const ThrottleConfig& throttle);

// Ablation-only token-wise (vertical) split: at every layer the first
// `hidden_tokens` positions are projected from hidden states while the rest
// arrive as KV, with per-layer synchronization between the lanes.
RestoreResult restore_token_wise(StorageManager& store, const std::string& session_id,
                                 const WeightSet& ws, int hidden_tokens,
                                 const ThrottleConfig& throttle);

}  // namespace hcache
