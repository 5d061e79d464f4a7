#pragma once

#include <string>
#include <vector>

namespace hcache {

enum class Lane { Io, Compute };

struct TimelineEvent {
  Lane lane;
  int layer = -1;
  std::string kind;  // "fetch_hidden", "fetch_kv", "project", "recompute", ...
  double start_s = 0;
  double end_s = 0;
};

struct Timeline {
  std::vector<TimelineEvent> events;
  double total_s = 0;
  double fill_s = 0;  // first fetch stage, reported separately

  double lane_busy(Lane lane) const;
  // (busier lane busy - other lane busy) / total: 0 for perfectly overlapped
  // equal lanes, ~1 when one lane sits idle.
  double bubble_fraction() const;
  std::string export_text() const;  // one record per event
};

// One pipeline job per restored layer, listed in compute order. Jobs with an
// IO stage are fetched in the same relative order on the IO lane; a job's
// compute stage waits for its own fetch. `prefetch_depth` bounds how many
// fetched-but-unconsumed staging buffers may exist (KV-offload fetches
// stream directly into the cache and are exempt).
struct PipelineJob {
  int layer = -1;
  double io_s = 0;
  double compute_s = 0;
  bool has_io = false;
  bool has_compute = false;
  const char* io_kind = "fetch";
  const char* compute_kind = "compute";
};

Timeline simulate_pipeline(const std::vector<PipelineJob>& jobs, int prefetch_depth);

}  // namespace hcache
