#include "hcache/trace.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace hcache {

namespace {

struct Rng {
  std::uint64_t s;
  explicit Rng(std::uint64_t seed) : s(seed ^ 0xA5A5A5A5DEADBEEFull) {}
  std::uint64_t next() {
    std::uint64_t z = (s += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }
  double uniform() { return double(next() >> 11) * 0x1p-53; }
  // geometric with the given mean, support {1, 2, ...}
  int geometric(double mean) {
    double p = 1.0 / std::max(1.0, mean);
    double u = std::max(uniform(), 1e-300);
    return 1 + int(std::floor(std::log(u) / std::log(1.0 - p)));
  }
  double exponential(double rate) {
    double u = std::max(uniform(), 1e-300);
    return -std::log(u) / rate;
  }
  int uniform_int(int lo, int hi) {  // inclusive
    return lo + int(next() % std::uint64_t(hi - lo + 1));
  }
  std::vector<int> tokens(int n, int vocab) {
    std::vector<int> t(static_cast<std::size_t>(n));
    for (auto& x : t) x = int(next() % std::uint64_t(vocab));
    return t;
  }
};

}  // namespace

void TraceParams::validate() const {
  if (n_sessions < 1 || rounds < 1 || vocab < 1)
    throw std::invalid_argument("TraceParams: counts must be >= 1");
  if (mean_input < 1 || mean_output < 1 || lc_mean_input < 1 || lc_mean_output < 1)
    throw std::invalid_argument("TraceParams: means must be >= 1");
  if (arrival_rate_per_s <= 0 || round_gap_s < 0)
    throw std::invalid_argument("TraceParams: bad arrival parameters");
  if (ctx_min < 1 || ctx_max < ctx_min)
    throw std::invalid_argument("TraceParams: bad context range");
}

Trace gen_trace(TraceKind kind, const TraceParams& params, std::uint64_t seed) {
  params.validate();
  Trace tr;
  tr.kind = kind;
  tr.params = params;
  tr.seed = seed;
  Rng rng(seed);

  double arrival = 0;
  for (int s = 0; s < params.n_sessions; ++s) {
    arrival += rng.exponential(params.arrival_rate_per_s);
    std::string sid = "sess" + std::to_string(s);
    if (kind == TraceKind::Conversation) {
      int history = 0;
      for (int r = 1; r <= params.rounds; ++r) {
        Request req;
        req.session_id = sid;
        req.round = r;
        req.history_tokens = history;
        req.prompt = rng.tokens(rng.geometric(params.mean_input), params.vocab);
        req.output_budget = rng.geometric(params.mean_output);
        req.arrival_s = arrival + double(r - 1) * params.round_gap_s;
        history += int(req.prompt.size()) + req.output_budget;
        tr.requests.push_back(std::move(req));
      }
    } else {
      Request req;
      req.session_id = sid;
      req.round = 1;
      req.context = rng.tokens(rng.uniform_int(params.ctx_min, params.ctx_max),
                               params.vocab);
      req.history_tokens = int(req.context.size());
      req.prompt = rng.tokens(
          std::min(params.lc_max_io, rng.geometric(params.lc_mean_input)),
          params.vocab);
      req.output_budget =
          std::min(params.lc_max_io, rng.geometric(params.lc_mean_output));
      req.arrival_s = arrival;
      tr.requests.push_back(std::move(req));
    }
  }
  std::stable_sort(tr.requests.begin(), tr.requests.end(),
                   [](const Request& a, const Request& b) {
                     return a.arrival_s < b.arrival_s;
                   });
  return tr;
}

}  // namespace hcache
