#include "hcache/pipeline.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace hcache {

double Timeline::lane_busy(Lane lane) const {
  double b = 0;
  for (const auto& e : events)
    if (e.lane == lane) b += e.end_s - e.start_s;
  return b;
}

double Timeline::bubble_fraction() const {
  if (events.empty()) throw std::invalid_argument("bubble_fraction: empty timeline");
  if (total_s <= 0) return 0;
  double io = lane_busy(Lane::Io), comp = lane_busy(Lane::Compute);
  double f = (std::max(io, comp) - std::min(io, comp)) / total_s;
  return std::min(1.0, std::max(0.0, f));
}

std::string Timeline::export_text() const {
  std::ostringstream os;
  os << "# lane layer kind start_s end_s\n";
  for (const auto& e : events)
    os << (e.lane == Lane::Io ? "IO" : "COMPUTE") << " " << e.layer << " " << e.kind
       << " " << e.start_s << " " << e.end_s << "\n";
  return os.str();
}

Timeline simulate_pipeline(const std::vector<PipelineJob>& jobs, int prefetch_depth) {
  if (prefetch_depth < 1) throw std::invalid_argument("prefetch_depth < 1");
  Timeline tl;

  std::vector<std::size_t> io_order;
  for (std::size_t j = 0; j < jobs.size(); ++j)
    if (jobs[j].has_io) io_order.push_back(j);

  // Staged jobs (fetch feeding a compute stage) in io order; staging buffers
  // are limited, so fetch of staged rank r waits for the compute of staged
  // rank r - (depth+1) to release its buffer. With depth 1 this is classic
  // double buffering: fetch of layer n+1 overlaps compute of layer n.
  std::vector<std::size_t> staged_order;
  for (std::size_t j : io_order)
    if (jobs[j].has_compute) staged_order.push_back(j);
  std::vector<std::size_t> staged_rank(jobs.size(), std::size_t(-1));
  for (std::size_t r = 0; r < staged_order.size(); ++r)
    staged_rank[staged_order[r]] = r;

  double io_free = 0, compute_free = 0;
  std::vector<double> fetch_end(jobs.size(), 0);
  std::vector<double> compute_end(jobs.size(), 0);
  std::vector<bool> computed(jobs.size(), false);
  std::size_t next_io = 0;

  // A fetch's buffer dependency always points at an earlier compute job, so a
  // forward sweep over compute jobs that greedily issues ready fetches
  // resolves everything.
  auto issue_ready_fetches = [&]() {
    while (next_io < io_order.size()) {
      std::size_t j = io_order[next_io];
      double dep = 0;
      if (jobs[j].has_compute) {
        std::size_t r = staged_rank[j];
        if (r >= std::size_t(prefetch_depth) + 1) {
          std::size_t blocker = staged_order[r - std::size_t(prefetch_depth) - 1];
          if (!computed[blocker]) return;
          dep = compute_end[blocker];
        }
      }
      double start = std::max(io_free, dep);
      double end = start + jobs[j].io_s;
      tl.events.push_back({Lane::Io, jobs[j].layer, jobs[j].io_kind, start, end});
      fetch_end[j] = end;
      io_free = end;
      if (tl.events.size() == 1) tl.fill_s = end;
      ++next_io;
    }
  };

  issue_ready_fetches();
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    if (!jobs[j].has_compute) continue;
    double start = std::max(compute_free, jobs[j].has_io ? fetch_end[j] : 0.0);
    double end = start + jobs[j].compute_s;
    tl.events.push_back(
        {Lane::Compute, jobs[j].layer, jobs[j].compute_kind, start, end});
    compute_end[j] = end;
    computed[j] = true;
    compute_free = end;
    issue_ready_fetches();
  }
  if (next_io != io_order.size())
    throw std::logic_error("pipeline: unresolved fetch dependency");

  for (const auto& e : tl.events) tl.total_s = std::max(tl.total_s, e.end_s);
  std::stable_sort(tl.events.begin(), tl.events.end(),
                   [](const TimelineEvent& a, const TimelineEvent& b) {
                     return a.start_s < b.start_s;
                   });
  return tl;
}

}  // namespace hcache
