#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "hcache/matrix.hpp"
#include "hcache/model.hpp"
#include "hcache/planner.hpp"

namespace hcache {

constexpr int kChunkTokens = 64;

enum class StateKind { Hidden, Kv };
const char* to_string(StateKind k);

// Directories standing in for SSDs. bw/latency feed the simulated-clock IO
// model only; real file IO is never throttled.
struct DevicePool {
  std::vector<std::filesystem::path> roots;
  double bw_bytes_per_s = 0;   // 0 = unlimited (simulated reads cost latency only)
  double read_latency_s = 0;   // per chunk read

  int count() const { return int(roots.size()); }
  void validate() const;
};

struct ChunkKey {
  std::string session_id;
  int layer = 0;
  StateKind kind = StateKind::Hidden;
  int chunk_idx = 0;
};

// Round-robin placement, starting device rotated per layer so concurrent
// layer reads spread across the pool.
int device_for_chunk(const ChunkKey& key, int device_count);

struct LayerChunks {
  int layer = 0;
  StateKind kind = StateKind::Hidden;
  int n_chunks = 0;
  int n_tokens = 0;
};

struct SessionManifest {
  std::string session_id;
  std::uint64_t config_hash = 0;
  int n_tokens = 0;
  int n_layers = 0;
  int d_hidden = 0;
  int elem_bytes = 4;
  int device_count = 0;
  int chunk_tokens = kChunkTokens;
  RestorationPlan plan;
  std::vector<int> tokens;  // original token ids (recompute source)
  std::vector<LayerChunks> layers;
  bool finalized = false;

  const LayerChunks* find(int layer, StateKind kind) const;
};

struct SessionSeed {
  std::string session_id;
  std::uint64_t config_hash = 0;
  int n_layers = 0;
  int d_hidden = 0;
  int elem_bytes = 4;
  RestorationPlan plan;
  std::vector<int> tokens;
};

// Chunked, striped persistence of hidden states and complement-layer KV.
// Stage 1 (snapshot) is a bulk copy into a bounded host FIFO; stage 2
// (drain) assembles 64-token chunks and writes them to the device pool.
class StorageManager {
 public:
  explicit StorageManager(DevicePool pool,
                          std::size_t buffer_capacity_bytes = 256ull << 20);
  ~StorageManager();

  void create_session(const SessionSeed& seed);  // throws on duplicate id
  void reopen_for_append(const std::string& session_id, const std::vector<int>& new_tokens);

  // rows: Hidden -> n x d_hidden; Kv -> n x 2*d_hidden (K row then V row per
  // token, use interleave_kv). Returns false on backpressure (buffer full);
  // nothing is enqueued in that case.
  bool snapshot(const std::string& session_id, int layer, StateKind kind,
                const Matrix& rows);

  // Stage 2: assembles queued records, writes every completed chunk.
  // Returns the number of chunks flushed.
  std::size_t drain(std::size_t max_chunks = std::size_t(-1));
  void drain_all();

  // Flushes partial chunks and writes the manifest. Drains first; idempotent.
  void finalize(const std::string& session_id);

  SessionManifest open(const std::string& session_id) const;  // throws if incomplete

  // Token-ordered reassembly of one layer; nullopt when the layer/kind was
  // never stored (e.g. a recompute-planned layer).
  std::optional<Matrix> read_layer(const SessionManifest& m, int layer,
                                   StateKind kind) const;

  // Per-device serial, cross-device parallel read-time estimate under the
  // pool throttle. Used by the simulated clock.
  double simulated_read_seconds(const SessionManifest& m, int layer,
                                StateKind kind) const;
  double simulated_read_seconds_tokens(int n_tokens, int width, int elem_bytes) const;

  void start_daemon();
  void stop_daemon();

  std::size_t buffer_bytes() const;
  std::size_t buffer_capacity() const { return capacity_; }
  std::uint64_t backpressure_events() const;
  const DevicePool& pool() const { return pool_; }

 private:
  struct Record {
    std::string session_id;
    int layer;
    StateKind kind;
    std::vector<std::uint8_t> bytes;
  };
  struct Assembly {
    std::vector<std::uint8_t> partial;  // < chunk_bytes
    int next_chunk_idx = 0;
    int n_tokens = 0;
  };
  struct Session {
    SessionSeed seed;
    std::map<std::pair<int, int>, Assembly> assembly;  // (layer, kind-int)
    bool finalized = false;
  };

  std::size_t chunk_bytes(const Session& s, StateKind kind) const;
  int token_width(int d_hidden, StateKind kind) const;
  std::filesystem::path chunk_path(const ChunkKey& key) const;
  std::filesystem::path manifest_path(const std::string& id) const;
  void write_manifest(const Session& s, bool finalized) const;
  std::size_t drain_locked(std::size_t max_chunks, std::unique_lock<std::mutex>& lk);
  void flush_chunk(Session& s, int layer, StateKind kind, Assembly& asmb,
                   const std::uint8_t* data, std::size_t len);

  DevicePool pool_;
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Record> fifo_;
  std::size_t fifo_bytes_ = 0;
  std::uint64_t backpressure_ = 0;
  std::map<std::string, Session> sessions_;
  std::thread daemon_;
  bool daemon_run_ = false;
};

// n x 2d interleaved rows (K then V per token) <-> LayerKV.
Matrix interleave_kv(const LayerKV& kv);
LayerKV split_kv(const Matrix& rows);

}  // namespace hcache
