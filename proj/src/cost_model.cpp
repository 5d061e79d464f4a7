#include "hcache/cost_model.hpp"

#include <sstream>
#include <stdexcept>

#include "hcache/config_file.hpp"

namespace hcache {

void HardwareProfile::validate() const {
  if (flops <= 0 || bw <= 0 || efficiency <= 0)
    throw std::invalid_argument("HardwareProfile: nonpositive field");
  if (elem_bytes != 2 && elem_bytes != 4)
    throw std::invalid_argument("HardwareProfile: elem_bytes must be 2 or 4");
}

namespace {
void check(int n_seq, const HardwareProfile& p) {
  if (n_seq < 1) throw std::invalid_argument("cost model: n_seq < 1");
  p.validate();
}
}  // namespace

double io_time_hidden(int n_seq, const ModelConfig& cfg, const HardwareProfile& p) {
  check(n_seq, p);
  return double(n_seq) * double(cfg.d_hidden) * double(p.elem_bytes) / p.bw;
}

double compute_time_hidden(int n_seq, const ModelConfig& cfg, const HardwareProfile& p) {
  check(n_seq, p);
  double d = double(cfg.d_hidden);
  return 4.0 * double(n_seq) * d * d / p.eff_flops();
}

double restore_time_hcache(int n_seq, const ModelConfig& cfg, const HardwareProfile& p,
                           int n_layers) {
  return double(n_layers) *
         std::max(io_time_hidden(n_seq, cfg, p), compute_time_hidden(n_seq, cfg, p));
}

double io_time_kv(int n_seq, const ModelConfig& cfg, const HardwareProfile& p) {
  return 2.0 * io_time_hidden(n_seq, cfg, p);
}

double recompute_time(int n_seq, const ModelConfig& cfg, const HardwareProfile& p) {
  check(n_seq, p);
  double n = double(n_seq), d = double(cfg.d_hidden);
  double c_attn = (8.0 * n * d * d + n * n * d) / p.eff_flops();
  double c_ffn = 16.0 * n * d * d / p.eff_flops();
  return c_attn + c_ffn;  // epsilon (norm/residual) counted as zero
}

CostBreakdown cost_breakdown(int n_seq, const ModelConfig& cfg, const HardwareProfile& p) {
  CostBreakdown b;
  b.io_hidden_s = io_time_hidden(n_seq, cfg, p);
  b.c_hidden_s = compute_time_hidden(n_seq, cfg, p);
  b.t_hidden_s = std::max(b.io_hidden_s, b.c_hidden_s);
  b.io_kv_s = io_time_kv(n_seq, cfg, p);
  double n = double(n_seq), d = double(cfg.d_hidden);
  b.c_attn_s = (8.0 * n * d * d + n * n * d) / p.eff_flops();
  b.c_ffn_s = 16.0 * n * d * d / p.eff_flops();
  b.t_rec_s = b.c_attn_s + b.c_ffn_s;
  return b;
}

StorageBytes storage_bytes(const RestorationPlan& plan, const ModelConfig& cfg,
                           int n_tokens, int elem_bytes) {
  StorageBytes out;
  std::uint64_t per_token_hidden = std::uint64_t(cfg.d_hidden) * std::uint64_t(elem_bytes);
  for (LayerMethod m : plan.layer_assignment) {
    switch (m) {
      case LayerMethod::Hidden: out.hcache += per_token_hidden; break;
      case LayerMethod::KvOffload: out.hcache += 2 * per_token_hidden; break;
      case LayerMethod::Recompute: break;  // stored as original tokens only
    }
    out.offload += 2 * per_token_hidden;
  }
  out.hcache *= std::uint64_t(n_tokens);
  out.offload *= std::uint64_t(n_tokens);
  return out;
}

HardwareProfile load_profile(const std::string& path) {
  auto kv = read_kv_file(path);
  HardwareProfile p;
  if (kv.count("label")) p.label = kv["label"];
  if (kv.count("flops")) p.flops = std::stod(kv["flops"]);
  if (kv.count("bw_bytes_per_s")) p.bw = std::stod(kv["bw_bytes_per_s"]);
  if (kv.count("elem_bytes")) p.elem_bytes = std::stoi(kv["elem_bytes"]);
  if (kv.count("efficiency")) p.efficiency = std::stod(kv["efficiency"]);
  p.validate();
  return p;
}

void save_profile(const HardwareProfile& p, const std::string& path) {
  std::map<std::string, std::string> kv;
  kv["label"] = p.label;
  std::ostringstream f, b, e;
  f << p.flops;
  b << p.bw;
  e << p.efficiency;
  kv["flops"] = f.str();
  kv["bw_bytes_per_s"] = b.str();
  kv["elem_bytes"] = std::to_string(p.elem_bytes);
  kv["efficiency"] = e.str();
  write_kv_file(path, kv);
}

}  // namespace hcache
