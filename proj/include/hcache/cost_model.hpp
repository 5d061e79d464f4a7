#pragma once

#include <string>

#include "hcache/model.hpp"
#include "hcache/planner.hpp"

namespace hcache {

// Analytical hardware description for restoration-time estimates.
// `flops * efficiency` is the achievable GEMM rate; `bw` is the aggregate
// bandwidth between the compute device and the storage backend.
struct HardwareProfile {
  std::string label = "default";
  double flops = 312e12;
  double bw = 32e9;  // bytes/s
  int elem_bytes = 2;
  double efficiency = 1.0;

  double eff_flops() const { return flops * efficiency; }
  void validate() const;
};

struct CostBreakdown {
  double io_hidden_s = 0;
  double c_hidden_s = 0;
  double t_hidden_s = 0;  // max(io_hidden, c_hidden)
  double io_kv_s = 0;
  double c_attn_s = 0;
  double c_ffn_s = 0;
  double t_rec_s = 0;  // c_attn + c_ffn
};

// All times are per layer; multiply by n_layers for the whole model.
// IO formulas count bytes (element width made explicit), compute formulas
// count model FLOPs with the multiply-add-is-2 convention.
double io_time_hidden(int n_seq, const ModelConfig& cfg, const HardwareProfile& p);
double compute_time_hidden(int n_seq, const ModelConfig& cfg, const HardwareProfile& p);
double restore_time_hcache(int n_seq, const ModelConfig& cfg, const HardwareProfile& p,
                           int n_layers = 1);
double io_time_kv(int n_seq, const ModelConfig& cfg, const HardwareProfile& p);
// Full-layer recompute: (24*n*d^2 + n^2*d) / FLOPS, residual/norm counted as zero.
double recompute_time(int n_seq, const ModelConfig& cfg, const HardwareProfile& p);

CostBreakdown cost_breakdown(int n_seq, const ModelConfig& cfg, const HardwareProfile& p);

// Persisted bytes per strategy for n_tokens of context under `plan`.
// HCache stores hidden states for HIDDEN layers and K+V for KV_OFFLOAD
// layers; recomputed layers store nothing. Offload stores K+V everywhere.
struct StorageBytes {
  std::uint64_t hcache = 0;
  std::uint64_t offload = 0;
};
StorageBytes storage_bytes(const RestorationPlan& plan, const ModelConfig& cfg,
                           int n_tokens, int elem_bytes);

// Flat key=value profile file: label, flops, bw_bytes_per_s, elem_bytes,
// efficiency (optional).
HardwareProfile load_profile(const std::string& path);
void save_profile(const HardwareProfile& p, const std::string& path);

}  // namespace hcache
