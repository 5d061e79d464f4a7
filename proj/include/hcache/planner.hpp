#pragma once

#include <string>
#include <vector>

namespace hcache {

enum class Complement { None, KvOffload, Recompute };
enum class LayerMethod { Hidden, KvOffload, Recompute };

const char* to_string(Complement c);
const char* to_string(LayerMethod m);

// Per-layer stage timings from offline profiling. One vector applies to
// every layer.
struct ProfiledTimings {
  double io_h = 0;      // hidden-state fetch, s/layer
  double io_kv = 0;     // KV fetch, s/layer
  double c_h = 0;       // hidden -> KV projection, s/layer
  double c_token = 0;   // full-layer recompute from tokens, s/layer
  int n_layers = 0;

  void validate() const;  // throws on nonpositive entries
};

// Layer-wise split: l_h layers restored from hidden states, l_o via the
// complement. RECOMPUTE takes the first l_o layers (prefix), KV_OFFLOAD the
// last l_o (suffix).
struct RestorationPlan {
  int l_h = 0;
  int l_o = 0;
  Complement complement = Complement::None;
  std::vector<LayerMethod> layer_assignment;

  int n_layers() const { return l_h + l_o; }
  static RestorationPlan make(int n_layers, int l_h, Complement c);

  std::string serialize() const;  // "l_h=.. l_o=.. complement=.."
  static RestorationPlan parse(const std::string& record);
};

// Closed-form bubble-free partition:
//   c_h > io_h  -> KV_OFFLOAD complement, l_h = ceil(n*io_kv / (io_kv + c_h - io_h))
//   c_h <= io_h -> RECOMPUTE complement,  l_h = ceil(n*c_token / (c_token + io_h - c_h))
// clamped to [0, n_layers]; l_h == n_layers degrades to complement NONE.
RestorationPlan plan(const ProfiledTimings& t);

// Two-lane completion time of a plan: max of the compute-lane and IO-lane
// stage sums.
double makespan(const RestorationPlan& p, const ProfiledTimings& t);

// Exhaustive argmin over every split and both complements; ties broken
// toward larger l_h (less storage). Oracle for the closed form.
RestorationPlan brute_force_plan(const ProfiledTimings& t);

}  // namespace hcache
