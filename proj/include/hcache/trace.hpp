#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hcache {

enum class TraceKind { Conversation, LongContext };

struct Request {
  std::string session_id;
  int round = 1;              // 1-based conversation round
  int history_tokens = 0;     // context the engine must restore before serving
  std::vector<int> context;   // pre-existing context tokens (long-context only)
  std::vector<int> prompt;    // new prompt tokens
  int output_budget = 1;      // generated tokens (fixed budget, greedy)
  double arrival_s = 0;
};

struct TraceParams {
  int n_sessions = 4;
  int rounds = 3;                   // conversation rounds per session
  double mean_input = 66.8;         // tokens, geometric around the mean
  double mean_output = 358.8;
  double arrival_rate_per_s = 0.1;  // Poisson session starts
  double round_gap_s = 30.0;
  int ctx_min = 4096;               // long-context: context length range
  int ctx_max = 16384;
  double lc_mean_input = 44.7;
  double lc_mean_output = 50.2;
  int lc_max_io = 99;               // long-context inputs/outputs stay below 100
  int vocab = 1024;

  void validate() const;
};

struct Trace {
  TraceKind kind;
  TraceParams params;
  std::uint64_t seed = 0;
  std::vector<Request> requests;  // sorted by arrival
};

Trace gen_trace(TraceKind kind, const TraceParams& params, std::uint64_t seed);

}  // namespace hcache
