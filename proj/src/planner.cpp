#include "hcache/planner.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace hcache {

const char* to_string(Complement c) {
  switch (c) {
    case Complement::None: return "NONE";
    case Complement::KvOffload: return "KV_OFFLOAD";
    case Complement::Recompute: return "RECOMPUTE";
  }
  return "?";
}

const char* to_string(LayerMethod m) {
  switch (m) {
    case LayerMethod::Hidden: return "HIDDEN";
    case LayerMethod::KvOffload: return "KV_OFFLOAD";
    case LayerMethod::Recompute: return "RECOMPUTE";
  }
  return "?";
}

void ProfiledTimings::validate() const {
  if (io_h <= 0 || io_kv <= 0 || c_h <= 0 || c_token <= 0)
    throw std::invalid_argument("ProfiledTimings: nonpositive timing");
  if (n_layers < 1) throw std::invalid_argument("ProfiledTimings: n_layers < 1");
}

RestorationPlan RestorationPlan::make(int n_layers, int l_h, Complement c) {
  if (l_h < 0 || l_h > n_layers) throw std::invalid_argument("plan: l_h out of range");
  RestorationPlan p;
  p.l_h = l_h;
  p.l_o = n_layers - l_h;
  p.complement = (p.l_o == 0) ? Complement::None : c;
  if (p.l_o > 0 && c == Complement::None)
    throw std::invalid_argument("plan: l_o > 0 needs a complement method");
  p.layer_assignment.assign(std::size_t(n_layers), LayerMethod::Hidden);
  if (p.complement == Complement::Recompute) {
    for (int i = 0; i < p.l_o; ++i)
      p.layer_assignment[std::size_t(i)] = LayerMethod::Recompute;  // prefix
  } else if (p.complement == Complement::KvOffload) {
    for (int i = n_layers - p.l_o; i < n_layers; ++i)
      p.layer_assignment[std::size_t(i)] = LayerMethod::KvOffload;  // suffix
  }
  return p;
}

std::string RestorationPlan::serialize() const {
  std::ostringstream os;
  os << "l_h=" << l_h << " l_o=" << l_o << " complement=" << to_string(complement);
  return os.str();
}

RestorationPlan RestorationPlan::parse(const std::string& record) {
  int lh = -1, lo = -1;
  char comp[32] = {0};
  if (std::sscanf(record.c_str(), "l_h=%d l_o=%d complement=%31s", &lh, &lo, comp) != 3)
    throw std::runtime_error("RestorationPlan: bad record: " + record);
  std::string c(comp);
  Complement cm;
  if (c == "NONE") cm = Complement::None;
  else if (c == "KV_OFFLOAD") cm = Complement::KvOffload;
  else if (c == "RECOMPUTE") cm = Complement::Recompute;
  else throw std::runtime_error("RestorationPlan: bad complement: " + c);
  if (lo > 0 && cm == Complement::None)
    throw std::runtime_error("RestorationPlan: l_o > 0 with complement NONE");
  return make(lh + lo, lh, cm);
}

RestorationPlan plan(const ProfiledTimings& t) {
  t.validate();
  int n = t.n_layers;
  double lh_real;
  Complement comp;
  if (t.c_h > t.io_h) {
    comp = Complement::KvOffload;
    lh_real = double(n) * t.io_kv / (t.io_kv + t.c_h - t.io_h);
  } else {
    comp = Complement::Recompute;
    lh_real = double(n) * t.c_token / (t.c_token + t.io_h - t.c_h);
  }
  int l_h = int(std::ceil(lh_real - 1e-12));
  l_h = std::max(0, std::min(n, l_h));
  return RestorationPlan::make(n, l_h, comp);
}

double makespan(const RestorationPlan& p, const ProfiledTimings& t) {
  if (p.n_layers() != t.n_layers)
    throw std::invalid_argument("makespan: plan/timings layer count mismatch");
  double lh = double(p.l_h), lo = double(p.l_o);
  switch (p.complement) {
    case Complement::None:
      return std::max(t.c_h * lh, t.io_h * lh);
    case Complement::KvOffload:
      // compute lane projects l_h layers; IO lane fetches hidden then KV
      return std::max(t.c_h * lh, t.io_h * lh + t.io_kv * lo);
    case Complement::Recompute:
      // compute lane: recompute prefix then projections; IO lane prefetches
      return std::max(t.io_h * lh, t.c_token * lo + t.c_h * lh);
  }
  return 0;
}

RestorationPlan brute_force_plan(const ProfiledTimings& t) {
  t.validate();
  RestorationPlan best;
  double best_cost = 0;
  bool have = false;
  for (int lh = 0; lh <= t.n_layers; ++lh) {
    for (Complement c : {Complement::KvOffload, Complement::Recompute}) {
      RestorationPlan cand = RestorationPlan::make(t.n_layers, lh, c);
      double cost = makespan(cand, t);
      // strict improvement, or equal cost with larger l_h (less storage)
      if (!have || cost < best_cost ||
          (cost == best_cost && cand.l_h > best.l_h)) {
        best = cand;
        best_cost = cost;
        have = true;
      }
    }
  }
  return best;
}

}  // namespace hcache
