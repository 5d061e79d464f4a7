#include "hcache/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace hcache {

namespace {

constexpr float kNormEps = 1e-5f;
constexpr double kRopeBase = 10000.0;

// splitmix64; gives identical weight streams on every platform.
struct Rng {
  std::uint64_t s;
  explicit Rng(std::uint64_t seed) : s(seed) {}
  std::uint64_t next() {
    std::uint64_t z = (s += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }
  // uniform in [-bound, bound)
  float symmetric(float bound) {
    double u = double(next() >> 11) * 0x1p-53;  // [0, 1)
    return float((2.0 * u - 1.0) * bound);
  }
};

void fill(Matrix& m, std::size_t rows, std::size_t cols, Rng& rng, float bound) {
  m = Matrix(rows, cols);
  for (auto& x : m.v) x = rng.symmetric(bound);
}

float gelu(float x) {
  return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752f));
}

// Layer norm with unit scale and zero bias.
Matrix layer_norm(const Matrix& x) {
  Matrix out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const float* r = x.row(i);
    double mean = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) mean += r[c];
    mean /= double(x.cols);
    double var = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) {
      double d = r[c] - mean;
      var += d * d;
    }
    var /= double(x.cols);
    float inv = 1.0f / std::sqrt(float(var) + kNormEps);
    float* o = out.row(i);
    for (std::size_t c = 0; c < x.cols; ++c) o[c] = (r[c] - float(mean)) * inv;
  }
  return out;
}

Matrix pre_norm(const ModelConfig& cfg, const Matrix& x) {
  return cfg.norm_enabled ? layer_norm(x) : x;
}

int argmax_token(const WeightSet& ws, const float* hidden) {
  int best = 0;
  float best_score = -1e30f;
  for (int t = 0; t < ws.config.vocab_size; ++t) {
    const float* e = ws.embedding.row(std::size_t(t));
    float acc = 0.0f;
    for (int c = 0; c < ws.config.d_hidden; ++c) acc += e[c] * hidden[c];
    if (acc > best_score) {
      best_score = acc;
      best = t;
    }
  }
  return best;
}

Matrix embed(const WeightSet& ws, const TokenSeq& seq) {
  Matrix h(seq.tokens.size(), std::size_t(ws.config.d_hidden));
  for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
    int t = seq.tokens[i];
    if (t < 0 || t >= ws.config.vocab_size)
      throw std::invalid_argument("token out of vocab range");
    std::memcpy(h.row(i), ws.embedding.row(std::size_t(t)),
                std::size_t(ws.config.d_hidden) * sizeof(float));
  }
  return h;
}

std::vector<int> iota_positions(int start, int n) {
  std::vector<int> p(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) p[std::size_t(i)] = start + i;
  return p;
}

// One transformer block: pre-norm attention + FFN with residuals.
// Appends the new tokens' KV to kv_layer via the shared projection path.
Matrix block_forward(const WeightSet& ws, int layer, const Matrix& h,
                     LayerKV& kv_layer, int start_pos, FlopCounter* flops) {
  LayerKV fresh = project_hidden_to_kv(ws, layer, h, start_pos, flops);
  append_rows(kv_layer.k, fresh.k);
  append_rows(kv_layer.v, fresh.v);

  Matrix x = h;
  Matrix attn = attention_forward(ws, layer, h, kv_layer, start_pos, flops);
  for (std::size_t i = 0; i < x.v.size(); ++i) x.v[i] += attn.v[i];

  Matrix f = ffn_forward(ws, layer, x, flops);
  for (std::size_t i = 0; i < x.v.size(); ++i) x.v[i] += f.v[i];
  return x;
}

void write_u32(std::ofstream& f, std::uint32_t v) { f.write(reinterpret_cast<char*>(&v), 4); }
void write_u64(std::ofstream& f, std::uint64_t v) { f.write(reinterpret_cast<char*>(&v), 8); }
void write_mat(std::ofstream& f, const Matrix& m) {
  f.write(reinterpret_cast<const char*>(m.v.data()),
          std::streamsize(m.v.size() * sizeof(float)));
}
std::uint32_t read_u32(std::ifstream& f) {
  std::uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
std::uint64_t read_u64(std::ifstream& f) {
  std::uint64_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
void read_mat(std::ifstream& f, Matrix& m, std::size_t rows, std::size_t cols) {
  m = Matrix(rows, cols);
  f.read(reinterpret_cast<char*>(m.v.data()), std::streamsize(m.v.size() * sizeof(float)));
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1 || d_hidden < 1 || n_heads < 1 || d_ffn < 1 || vocab_size < 1 ||
      max_seq < 1)
    throw std::invalid_argument("ModelConfig: all counts must be >= 1");
  if (d_hidden % n_heads != 0)
    throw std::invalid_argument("ModelConfig: d_hidden not divisible by n_heads");
  if (rope_enabled && d_head() % 2 != 0)
    throw std::invalid_argument("ModelConfig: rope needs even d_head");
  if (elem_bytes != 2 && elem_bytes != 4)
    throw std::invalid_argument("ModelConfig: elem_bytes must be 2 or 4");
}

std::uint64_t ModelConfig::hash() const {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  auto mix = [&h](std::uint64_t x) {
    h ^= x;
    h *= 1099511628211ull;
  };
  mix(std::uint64_t(n_layers));
  mix(std::uint64_t(d_hidden));
  mix(std::uint64_t(n_heads));
  mix(std::uint64_t(d_ffn));
  mix(std::uint64_t(vocab_size));
  mix(std::uint64_t(max_seq));
  mix(std::uint64_t(elem_bytes));
  mix(std::uint64_t(norm_enabled ? 1 : 2));
  mix(std::uint64_t(rope_enabled ? 1 : 2));
  return h;
}

void KVCache::append(int layer, const LayerKV& kv) {
  append_rows(layers[std::size_t(layer)].k, kv.k);
  append_rows(layers[std::size_t(layer)].v, kv.v);
}

WeightSet init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  WeightSet ws;
  ws.config = config;
  ws.seed = seed;
  Rng rng(seed);
  float bound = 1.0f / std::sqrt(float(config.d_hidden));
  std::size_t d = std::size_t(config.d_hidden);
  fill(ws.embedding, std::size_t(config.vocab_size), d, rng, bound);
  ws.layers.resize(std::size_t(config.n_layers));
  for (auto& lw : ws.layers) {
    fill(lw.wq, d, d, rng, bound);
    fill(lw.wk, d, d, rng, bound);
    fill(lw.wv, d, d, rng, bound);
    fill(lw.wo, d, d, rng, bound);
    fill(lw.fc1, std::size_t(config.d_ffn), d, rng, bound);
    fill(lw.fc2, d, std::size_t(config.d_ffn), rng, bound);
  }
  return ws;
}

void apply_rope(Matrix& x, const std::vector<int>& positions, int n_heads) {
  if (x.rows != positions.size()) throw std::invalid_argument("apply_rope: positions/rows mismatch");
  if (x.rows == 0) return;
  int d_head = int(x.cols) / n_heads;
  if (d_head % 2 != 0) throw std::invalid_argument("apply_rope: odd d_head");
  for (std::size_t i = 0; i < x.rows; ++i) {
    float* r = x.row(i);
    double pos = double(positions[i]);
    for (int h = 0; h < n_heads; ++h) {
      float* hr = r + h * d_head;
      for (int t = 0; t < d_head / 2; ++t) {
        double freq = std::pow(kRopeBase, -2.0 * double(t) / double(d_head));
        float c = float(std::cos(pos * freq));
        float s = float(std::sin(pos * freq));
        float a = hr[2 * t];
        float b = hr[2 * t + 1];
        hr[2 * t] = a * c - b * s;
        hr[2 * t + 1] = a * s + b * c;
      }
    }
  }
}

LayerKV project_hidden_to_kv(const WeightSet& ws, int layer, const Matrix& h,
                             int start_pos, FlopCounter* flops) {
  const ModelConfig& cfg = ws.config;
  if (int(h.cols) != cfg.d_hidden) throw std::invalid_argument("project: bad width");
  const LayerWeights& lw = ws.layers.at(std::size_t(layer));
  Matrix a = pre_norm(cfg, h);
  LayerKV kv;
  kv.k = matmul_wt(a, lw.wk);
  kv.v = matmul_wt(a, lw.wv);
  if (cfg.rope_enabled)
    apply_rope(kv.k, iota_positions(start_pos, int(h.rows)), cfg.n_heads);
  if (flops) {
    std::uint64_t n = h.rows, d = std::uint64_t(cfg.d_hidden);
    flops->projection_kv += 4 * n * d * d;
  }
  return kv;
}

Matrix attention_forward(const WeightSet& ws, int layer, const Matrix& h,
                         const LayerKV& kv, int start_pos, FlopCounter* flops) {
  const ModelConfig& cfg = ws.config;
  const LayerWeights& lw = ws.layers.at(std::size_t(layer));
  int n = int(h.rows);
  int d = cfg.d_hidden;
  int dh = cfg.d_head();
  if (int(kv.k.rows) < start_pos + n)
    throw std::invalid_argument("attention: kv does not cover query positions");

  Matrix a = pre_norm(cfg, h);
  Matrix q = matmul_wt(a, lw.wq);
  if (cfg.rope_enabled) apply_rope(q, iota_positions(start_pos, n), cfg.n_heads);

  Matrix mix{std::size_t(n), std::size_t(d)};
  float inv_sqrt = 1.0f / std::sqrt(float(dh));
  std::vector<float> scores;
  for (int i = 0; i < n; ++i) {
    int p = start_pos + i;  // causal: attend to positions [0, p]
    scores.resize(std::size_t(p) + 1);
    for (int head = 0; head < cfg.n_heads; ++head) {
      const float* qh = q.row(std::size_t(i)) + head * dh;
      float max_s = -1e30f;
      for (int j = 0; j <= p; ++j) {
        const float* kh = kv.k.row(std::size_t(j)) + head * dh;
        float s = 0.0f;
        for (int c = 0; c < dh; ++c) s += qh[c] * kh[c];
        scores[std::size_t(j)] = s * inv_sqrt;
        max_s = std::max(max_s, scores[std::size_t(j)]);
      }
      float denom = 0.0f;
      for (int j = 0; j <= p; ++j) {
        scores[std::size_t(j)] = std::exp(scores[std::size_t(j)] - max_s);
        denom += scores[std::size_t(j)];
      }
      float* out = mix.row(std::size_t(i)) + head * dh;
      for (int j = 0; j <= p; ++j) {
        float w = scores[std::size_t(j)] / denom;
        const float* vh = kv.v.row(std::size_t(j)) + head * dh;
        for (int c = 0; c < dh; ++c) out[c] += w * vh[c];
      }
    }
  }
  Matrix out = matmul_wt(mix, lw.wo);
  if (flops) {
    std::uint64_t nn = std::uint64_t(n), dd = std::uint64_t(d);
    std::uint64_t cache = std::uint64_t(start_pos + n);
    flops->attention += 4 * nn * dd * dd;   // Wq + Wo
    flops->attention += nn * cache * dd;    // score + weighted-average pair
  }
  return out;
}

Matrix ffn_forward(const WeightSet& ws, int layer, const Matrix& x, FlopCounter* flops) {
  const ModelConfig& cfg = ws.config;
  const LayerWeights& lw = ws.layers.at(std::size_t(layer));
  Matrix f = pre_norm(cfg, x);
  Matrix h1 = matmul_wt(f, lw.fc1);
  for (auto& v : h1.v) v = gelu(v);
  Matrix out = matmul_wt(h1, lw.fc2);
  if (flops) {
    std::uint64_t n = x.rows, d = std::uint64_t(cfg.d_hidden),
                  df = std::uint64_t(cfg.d_ffn);
    flops->ffn += 4 * n * d * df;
  }
  return out;
}

PrefillResult forward_tokens(const WeightSet& ws, KVCache& kv, const TokenSeq& tokens,
                             FlopCounter* flops) {
  if (tokens.tokens.empty()) throw std::invalid_argument("forward: empty sequence");
  if (kv.layers.empty()) kv.layers.resize(std::size_t(ws.config.n_layers));
  int start = kv.length();
  if (start + int(tokens.tokens.size()) > ws.config.max_seq)
    throw std::invalid_argument("forward: sequence exceeds max_seq");
  PrefillResult res;
  res.layer_inputs.reserve(std::size_t(ws.config.n_layers));
  Matrix x = embed(ws, tokens);
  for (int L = 0; L < ws.config.n_layers; ++L) {
    res.layer_inputs.push_back(x);
    x = block_forward(ws, L, x, kv.layers[std::size_t(L)], start, flops);
  }
  res.final_hidden = x;
  res.next_token = argmax_token(ws, x.row(x.rows - 1));
  return res;
}

PrefillResult prefill(const WeightSet& ws, const TokenSeq& tokens, FlopCounter* flops) {
  KVCache kv;
  kv.layers.resize(std::size_t(ws.config.n_layers));
  PrefillResult res = forward_tokens(ws, kv, tokens, flops);
  res.kv = std::move(kv);
  return res;
}

DecodeResult decode_step(const WeightSet& ws, KVCache& kv, int token, FlopCounter* flops) {
  if (kv.length() == 0) throw std::invalid_argument("decode_step: empty KV cache");
  if (kv.length() >= ws.config.max_seq)
    throw std::invalid_argument("decode_step: KV cache at max_seq");
  int pos = kv.length();
  TokenSeq one{{token}};
  Matrix x = embed(ws, one);
  DecodeResult res;
  res.layer_inputs.reserve(std::size_t(ws.config.n_layers));
  for (int L = 0; L < ws.config.n_layers; ++L) {
    res.layer_inputs.push_back(x);
    x = block_forward(ws, L, x, kv.layers[std::size_t(L)], pos, flops);
  }
  res.next_token = argmax_token(ws, x.row(0));
  return res;
}

void prefill_layers(const WeightSet& ws, const TokenSeq& tokens, int layer_begin,
                    int layer_end, KVCache& kv, FlopCounter* flops) {
  if (kv.layers.size() != std::size_t(ws.config.n_layers))
    kv.layers.resize(std::size_t(ws.config.n_layers));
  Matrix x = embed(ws, tokens);
  for (int L = layer_begin; L < layer_end; ++L)
    x = block_forward(ws, L, x, kv.layers[std::size_t(L)], 0, flops);
}

void save_weights(const WeightSet& ws, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_weights: cannot open " + path);
  f.write("HSW1", 4);
  const ModelConfig& c = ws.config;
  for (int v : {c.n_layers, c.d_hidden, c.n_heads, c.d_ffn, c.vocab_size, c.max_seq,
                c.elem_bytes, c.norm_enabled ? 1 : 0, c.rope_enabled ? 1 : 0})
    write_u32(f, std::uint32_t(v));
  write_u64(f, ws.seed);
  write_mat(f, ws.embedding);
  for (const auto& lw : ws.layers) {
    write_mat(f, lw.wq);
    write_mat(f, lw.wk);
    write_mat(f, lw.wv);
    write_mat(f, lw.wo);
    write_mat(f, lw.fc1);
    write_mat(f, lw.fc2);
  }
  if (!f) throw std::runtime_error("save_weights: write failed");
}

WeightSet load_weights(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_weights: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (std::memcmp(magic, "HSW1", 4) != 0)
    throw std::runtime_error("load_weights: bad magic");
  WeightSet ws;
  ModelConfig& c = ws.config;
  c.n_layers = int(read_u32(f));
  c.d_hidden = int(read_u32(f));
  c.n_heads = int(read_u32(f));
  c.d_ffn = int(read_u32(f));
  c.vocab_size = int(read_u32(f));
  c.max_seq = int(read_u32(f));
  c.elem_bytes = int(read_u32(f));
  c.norm_enabled = read_u32(f) != 0;
  c.rope_enabled = read_u32(f) != 0;
  c.validate();
  ws.seed = read_u64(f);
  std::size_t d = std::size_t(c.d_hidden);
  read_mat(f, ws.embedding, std::size_t(c.vocab_size), d);
  ws.layers.resize(std::size_t(c.n_layers));
  for (auto& lw : ws.layers) {
    read_mat(f, lw.wq, d, d);
    read_mat(f, lw.wk, d, d);
    read_mat(f, lw.wv, d, d);
    read_mat(f, lw.wo, d, d);
    read_mat(f, lw.fc1, std::size_t(c.d_ffn), d);
    read_mat(f, lw.fc2, d, std::size_t(c.d_ffn));
  }
  if (!f) throw std::runtime_error("load_weights: truncated file");
  return ws;
}

}  // namespace hcache
