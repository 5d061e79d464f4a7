#include "hcache/storage.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "hcache/fp16.hpp"

namespace hcache {

namespace fs = std::filesystem;

const char* to_string(StateKind k) {
  return k == StateKind::Hidden ? "HIDDEN" : "KV";
}

static StateKind kind_from_string(const std::string& s) {
  if (s == "HIDDEN") return StateKind::Hidden;
  if (s == "KV") return StateKind::Kv;
  throw std::runtime_error("bad state kind: " + s);
}

void DevicePool::validate() const {
  if (roots.empty()) throw std::invalid_argument("DevicePool: needs >= 1 device");
  if (bw_bytes_per_s < 0 || read_latency_s < 0)
    throw std::invalid_argument("DevicePool: negative throttle");
}

int device_for_chunk(const ChunkKey& key, int device_count) {
  return (key.layer + key.chunk_idx) % device_count;
}

const LayerChunks* SessionManifest::find(int layer, StateKind kind) const {
  for (const auto& lc : layers)
    if (lc.layer == layer && lc.kind == kind) return &lc;
  return nullptr;
}

// ---- element serialization -------------------------------------------------

namespace {

void serialize_floats(const float* src, std::size_t n, int elem_bytes,
                      std::vector<std::uint8_t>& out) {
  std::size_t off = out.size();
  out.resize(off + n * std::size_t(elem_bytes));
  if (elem_bytes == 4) {
    std::memcpy(out.data() + off, src, n * 4);
  } else {
    auto* p = reinterpret_cast<std::uint16_t*>(out.data() + off);
    for (std::size_t i = 0; i < n; ++i) p[i] = float_to_half(src[i]);
  }
}

void deserialize_floats(const std::uint8_t* src, std::size_t n, int elem_bytes,
                        float* out) {
  if (elem_bytes == 4) {
    std::memcpy(out, src, n * 4);
  } else {
    auto* p = reinterpret_cast<const std::uint16_t*>(src);
    for (std::size_t i = 0; i < n; ++i) out[i] = half_to_float(p[i]);
  }
}

}  // namespace

Matrix interleave_kv(const LayerKV& kv) {
  if (!kv.k.same_shape(kv.v)) throw std::invalid_argument("interleave_kv: K/V shape mismatch");
  Matrix rows(kv.k.rows, kv.k.cols * 2);
  for (std::size_t i = 0; i < kv.k.rows; ++i) {
    std::memcpy(rows.row(i), kv.k.row(i), kv.k.cols * sizeof(float));
    std::memcpy(rows.row(i) + kv.k.cols, kv.v.row(i), kv.k.cols * sizeof(float));
  }
  return rows;
}

LayerKV split_kv(const Matrix& rows) {
  if (rows.cols % 2 != 0) throw std::invalid_argument("split_kv: odd width");
  std::size_t d = rows.cols / 2;
  LayerKV kv{Matrix(rows.rows, d), Matrix(rows.rows, d)};
  for (std::size_t i = 0; i < rows.rows; ++i) {
    std::memcpy(kv.k.row(i), rows.row(i), d * sizeof(float));
    std::memcpy(kv.v.row(i), rows.row(i) + d, d * sizeof(float));
  }
  return kv;
}

// ---- manager ---------------------------------------------------------------

StorageManager::StorageManager(DevicePool pool, std::size_t buffer_capacity_bytes)
    : pool_(std::move(pool)), capacity_(buffer_capacity_bytes) {
  pool_.validate();
  for (const auto& r : pool_.roots) fs::create_directories(r);
}

StorageManager::~StorageManager() { stop_daemon(); }

int StorageManager::token_width(int d_hidden, StateKind kind) const {
  return kind == StateKind::Hidden ? d_hidden : 2 * d_hidden;
}

std::size_t StorageManager::chunk_bytes(const Session& s, StateKind kind) const {
  return std::size_t(kChunkTokens) * std::size_t(token_width(s.seed.d_hidden, kind)) *
         std::size_t(s.seed.elem_bytes);
}

fs::path StorageManager::chunk_path(const ChunkKey& key) const {
  int dev = device_for_chunk(key, pool_.count());
  std::ostringstream name;
  name << key.layer << "_" << to_string(key.kind) << "_" << key.chunk_idx << ".chk";
  return pool_.roots[std::size_t(dev)] / key.session_id / name.str();
}

fs::path StorageManager::manifest_path(const std::string& id) const {
  return pool_.roots[0] / (id + ".manifest");
}

void StorageManager::create_session(const SessionSeed& seed) {
  std::lock_guard<std::mutex> lk(mu_);
  if (sessions_.count(seed.session_id) || fs::exists(manifest_path(seed.session_id)))
    throw std::runtime_error("duplicate session id: " + seed.session_id);
  Session s;
  s.seed = seed;
  for (const auto& r : pool_.roots) fs::create_directories(r / seed.session_id);
  write_manifest(s, false);  // skeleton durable before any chunk write
  sessions_.emplace(seed.session_id, std::move(s));
}

bool StorageManager::snapshot(const std::string& session_id, int layer,
                              StateKind kind, const Matrix& rows) {
  std::lock_guard<std::mutex> lk(mu_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw std::runtime_error("unknown session: " + session_id);
  Session& s = it->second;
  if (s.finalized) throw std::runtime_error("snapshot after finalize: " + session_id);
  if (int(rows.cols) != token_width(s.seed.d_hidden, kind))
    throw std::invalid_argument("snapshot: bad row width");
  std::size_t bytes = rows.v.size() * std::size_t(s.seed.elem_bytes);
  if (fifo_bytes_ + bytes > capacity_) {
    ++backpressure_;
    return false;
  }
  Record rec{session_id, layer, kind, {}};
  serialize_floats(rows.v.data(), rows.v.size(), s.seed.elem_bytes, rec.bytes);
  fifo_bytes_ += rec.bytes.size();
  fifo_.push_back(std::move(rec));
  cv_.notify_all();
  return true;
}

void StorageManager::flush_chunk(Session& s, int layer, StateKind kind,
                                 Assembly& asmb, const std::uint8_t* data,
                                 std::size_t len) {
  ChunkKey key{s.seed.session_id, layer, kind, asmb.next_chunk_idx};
  fs::path p = chunk_path(key);
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("chunk write failed: " + p.string());
  f.write(reinterpret_cast<const char*>(data), std::streamsize(len));
  if (!f) throw std::runtime_error("chunk write failed: " + p.string());
}

std::size_t StorageManager::drain_locked(std::size_t max_chunks,
                                         std::unique_lock<std::mutex>&) {
  std::size_t flushed = 0;
  while (!fifo_.empty() && flushed < max_chunks) {
    Record rec = std::move(fifo_.front());
    fifo_.pop_front();
    fifo_bytes_ -= rec.bytes.size();
    Session& s = sessions_.at(rec.session_id);
    Assembly& asmb = s.assembly[{rec.layer, int(rec.kind)}];
    std::size_t cb = chunk_bytes(s, rec.kind);
    std::size_t token_bytes =
        std::size_t(token_width(s.seed.d_hidden, rec.kind)) *
        std::size_t(s.seed.elem_bytes);
    std::size_t off = 0;
    while (off < rec.bytes.size()) {
      std::size_t take = std::min(cb - asmb.partial.size(), rec.bytes.size() - off);
      asmb.partial.insert(asmb.partial.end(), rec.bytes.begin() + std::ptrdiff_t(off),
                          rec.bytes.begin() + std::ptrdiff_t(off + take));
      off += take;
      asmb.n_tokens += int(take / token_bytes);
      if (asmb.partial.size() == cb) {
        flush_chunk(s, rec.layer, rec.kind, asmb, asmb.partial.data(), cb);
        asmb.partial.clear();
        ++asmb.next_chunk_idx;
        ++flushed;
      }
    }
  }
  return flushed;
}

std::size_t StorageManager::drain(std::size_t max_chunks) {
  std::unique_lock<std::mutex> lk(mu_);
  return drain_locked(max_chunks, lk);
}

void StorageManager::drain_all() { drain(); }

void StorageManager::finalize(const std::string& session_id) {
  std::unique_lock<std::mutex> lk(mu_);
  drain_locked(std::size_t(-1), lk);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw std::runtime_error("unknown session: " + session_id);
  Session& s = it->second;
  if (s.finalized) return;  // idempotent
  // flush partial trailing chunks as-is (length implies token count)
  for (auto& [key, asmb] : s.assembly) {
    if (!asmb.partial.empty()) {
      flush_chunk(s, key.first, StateKind(key.second), asmb, asmb.partial.data(),
                  asmb.partial.size());
      // keep partial in memory so reopen_for_append can extend it
    }
  }
  s.finalized = true;
  write_manifest(s, true);
}

void StorageManager::write_manifest(const Session& s, bool finalized) const {
  std::ostringstream os;
  os << "session_id=" << s.seed.session_id << "\n";
  os << "config_hash=" << s.seed.config_hash << "\n";
  os << "n_layers=" << s.seed.n_layers << "\n";
  os << "d_hidden=" << s.seed.d_hidden << "\n";
  os << "elem_bytes=" << s.seed.elem_bytes << "\n";
  os << "device_count=" << pool_.count() << "\n";
  os << "chunk_tokens=" << kChunkTokens << "\n";
  os << "plan=" << s.seed.plan.serialize() << "\n";
  os << "tokens=";
  for (std::size_t i = 0; i < s.seed.tokens.size(); ++i)
    os << (i ? " " : "") << s.seed.tokens[i];
  os << "\n";
  int n_tokens = 0;
  for (const auto& [key, asmb] : s.assembly) {
    os << "chunks=" << key.first << " " << to_string(StateKind(key.second)) << " "
       << (asmb.next_chunk_idx + (asmb.partial.empty() ? 0 : 1)) << " "
       << asmb.n_tokens << "\n";
    n_tokens = std::max(n_tokens, asmb.n_tokens);
  }
  os << "n_tokens=" << n_tokens << "\n";
  os << "finalized=" << (finalized ? 1 : 0) << "\n";
  std::ofstream f(manifest_path(s.seed.session_id), std::ios::trunc);
  if (!f) throw std::runtime_error("manifest write failed");
  f << os.str();
}

SessionManifest StorageManager::open(const std::string& session_id) const {
  std::ifstream f(manifest_path(session_id));
  if (!f) throw std::runtime_error("no manifest for session: " + session_id);
  SessionManifest m;
  std::string line;
  while (std::getline(f, line)) {
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    if (k == "session_id") m.session_id = v;
    else if (k == "config_hash") m.config_hash = std::stoull(v);
    else if (k == "n_layers") m.n_layers = std::stoi(v);
    else if (k == "d_hidden") m.d_hidden = std::stoi(v);
    else if (k == "elem_bytes") m.elem_bytes = std::stoi(v);
    else if (k == "device_count") m.device_count = std::stoi(v);
    else if (k == "chunk_tokens") m.chunk_tokens = std::stoi(v);
    else if (k == "n_tokens") m.n_tokens = std::stoi(v);
    else if (k == "plan") m.plan = RestorationPlan::parse(v);
    else if (k == "finalized") m.finalized = v == "1";
    else if (k == "tokens") {
      std::istringstream ts(v);
      int t;
      while (ts >> t) m.tokens.push_back(t);
    } else if (k == "chunks") {
      std::istringstream cs(v);
      LayerChunks lc;
      std::string kind;
      cs >> lc.layer >> kind >> lc.n_chunks >> lc.n_tokens;
      lc.kind = kind_from_string(kind);
      m.layers.push_back(lc);
    }
  }
  if (!m.finalized)
    throw std::runtime_error("session incomplete (not finalized): " + session_id);
  return m;
}

void StorageManager::reopen_for_append(const std::string& session_id,
                                       const std::vector<int>& new_tokens) {
  SessionManifest m = open(session_id);
  std::lock_guard<std::mutex> lk(mu_);
  auto it = sessions_.find(session_id);
  if (it != sessions_.end() && !it->second.finalized)
    throw std::runtime_error("session already open: " + session_id);
  Session s;
  s.seed.session_id = m.session_id;
  s.seed.config_hash = m.config_hash;
  s.seed.n_layers = m.n_layers;
  s.seed.d_hidden = m.d_hidden;
  s.seed.elem_bytes = m.elem_bytes;
  s.seed.plan = m.plan;
  s.seed.tokens = m.tokens;
  s.seed.tokens.insert(s.seed.tokens.end(), new_tokens.begin(), new_tokens.end());
  // pull trailing partial chunks back into assembly buffers
  for (const auto& lc : m.layers) {
    Assembly asmb;
    int full = lc.n_tokens / kChunkTokens;
    int rem = lc.n_tokens % kChunkTokens;
    asmb.next_chunk_idx = full;
    asmb.n_tokens = lc.n_tokens;
    if (rem > 0) {
      ChunkKey key{session_id, lc.layer, lc.kind, full};
      std::ifstream cf(chunk_path(key), std::ios::binary);
      if (!cf) throw std::runtime_error("missing partial chunk on reopen");
      std::size_t bytes = std::size_t(rem) *
                          std::size_t(token_width(m.d_hidden, lc.kind)) *
                          std::size_t(m.elem_bytes);
      asmb.partial.resize(bytes);
      cf.read(reinterpret_cast<char*>(asmb.partial.data()), std::streamsize(bytes));
      if (!cf) throw std::runtime_error("short partial chunk on reopen");
    }
    s.assembly[{lc.layer, int(lc.kind)}] = std::move(asmb);
  }
  write_manifest(s, false);
  sessions_[session_id] = std::move(s);
}

std::optional<Matrix> StorageManager::read_layer(const SessionManifest& m, int layer,
                                                 StateKind kind) const {
  const LayerChunks* lc = m.find(layer, kind);
  if (!lc || lc->n_tokens == 0) return std::nullopt;
  int width = kind == StateKind::Hidden ? m.d_hidden : 2 * m.d_hidden;
  Matrix out(std::size_t(lc->n_tokens), std::size_t(width));
  std::size_t token_bytes = std::size_t(width) * std::size_t(m.elem_bytes);
  std::vector<std::uint8_t> buf;
  int token = 0;
  for (int ci = 0; ci < lc->n_chunks; ++ci) {
    int chunk_len = std::min(kChunkTokens, lc->n_tokens - token);
    ChunkKey key{m.session_id, layer, kind, ci};
    std::ifstream f(chunk_path(key), std::ios::binary);
    if (!f) throw std::runtime_error("missing chunk: " + chunk_path(key).string());
    buf.resize(std::size_t(chunk_len) * token_bytes);
    f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    if (!f) throw std::runtime_error("short chunk: " + chunk_path(key).string());
    deserialize_floats(buf.data(), std::size_t(chunk_len) * std::size_t(width),
                       m.elem_bytes, out.row(std::size_t(token)));
    token += chunk_len;
  }
  return out;
}

double StorageManager::simulated_read_seconds_tokens(int n_tokens, int width,
                                                     int elem_bytes) const {
  if (n_tokens <= 0) return 0.0;
  int n_chunks = (n_tokens + kChunkTokens - 1) / kChunkTokens;
  std::vector<double> per_device(std::size_t(pool_.count()), 0.0);
  int token = 0;
  for (int ci = 0; ci < n_chunks; ++ci) {
    int chunk_len = std::min(kChunkTokens, n_tokens - token);
    token += chunk_len;
    double bytes = double(chunk_len) * double(width) * double(elem_bytes);
    double t = pool_.read_latency_s;
    if (pool_.bw_bytes_per_s > 0) t += bytes / pool_.bw_bytes_per_s;
    per_device[std::size_t(ci % pool_.count())] += t;
  }
  double worst = 0;
  for (double t : per_device) worst = std::max(worst, t);
  return worst;
}

double StorageManager::simulated_read_seconds(const SessionManifest& m, int layer,
                                              StateKind kind) const {
  const LayerChunks* lc = m.find(layer, kind);
  if (!lc) return 0.0;
  int width = kind == StateKind::Hidden ? m.d_hidden : 2 * m.d_hidden;
  return simulated_read_seconds_tokens(lc->n_tokens, width, m.elem_bytes);
}

void StorageManager::start_daemon() {
  std::lock_guard<std::mutex> lk(mu_);
  if (daemon_run_) return;
  daemon_run_ = true;
  daemon_ = std::thread([this] {
    std::unique_lock<std::mutex> lk(mu_);
    while (daemon_run_) {
      cv_.wait_for(lk, std::chrono::milliseconds(5),
                   [this] { return !fifo_.empty() || !daemon_run_; });
      drain_locked(std::size_t(-1), lk);
    }
  });
}

void StorageManager::stop_daemon() {
  {
    std::lock_guard<std::mutex> lk(mu_);
    if (!daemon_run_) return;
    daemon_run_ = false;
  }
  cv_.notify_all();
  if (daemon_.joinable()) daemon_.join();
}

std::size_t StorageManager::buffer_bytes() const {
  std::lock_guard<std::mutex> lk(mu_);
  return fifo_bytes_;
}

std::uint64_t StorageManager::backpressure_events() const {
  std::lock_guard<std::mutex> lk(mu_);
  return backpressure_;
}

}  // namespace hcache
