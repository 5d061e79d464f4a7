#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hcache/matrix.hpp"

namespace hcache {

struct ModelConfig {
  int n_layers = 4;
  int d_hidden = 256;
  int n_heads = 8;
  int d_ffn = 1024;
  int vocab_size = 1024;
  int max_seq = 4096;
  int elem_bytes = 4;        // persisted element width: 2 (fp16) or 4 (fp32)
  bool norm_enabled = true;  // pre-norm layer norms (unit scale, zero bias)
  bool rope_enabled = true;

  int d_head() const { return d_hidden / n_heads; }
  void validate() const;  // throws std::invalid_argument
  std::uint64_t hash() const;
};

struct LayerWeights {
  Matrix wq, wk, wv, wo;  // d_hidden x d_hidden
  Matrix fc1;             // d_ffn x d_hidden
  Matrix fc2;             // d_hidden x d_ffn
};

struct WeightSet {
  ModelConfig config;
  std::uint64_t seed = 0;
  Matrix embedding;  // vocab_size x d_hidden, also used (transposed) as the LM head
  std::vector<LayerWeights> layers;
};

struct LayerKV {
  Matrix k;  // tokens x d_hidden
  Matrix v;  // tokens x d_hidden
};

struct KVCache {
  std::vector<LayerKV> layers;

  int length() const { return layers.empty() ? 0 : int(layers[0].k.rows); }
  void append(int layer, const LayerKV& kv);
};

struct TokenSeq {
  std::vector<int> tokens;
};

// Analytic FLOP tally, incremented with the closed-form cost of each
// operation as it executes. The attention score + weighted-average pair is
// counted as n_new * cache_len * d_hidden (one op per element of each of the
// two causally-halved matmuls); dense GEMMs count 2*m*n*k.
struct FlopCounter {
  std::uint64_t projection_kv = 0;  // hidden -> (K,V)
  std::uint64_t attention = 0;      // Q/O projections + score/weighted-sum
  std::uint64_t ffn = 0;

  std::uint64_t total() const { return projection_kv + attention + ffn; }
  void reset() { *this = FlopCounter{}; }
};

struct PrefillResult {
  KVCache kv;
  std::vector<Matrix> layer_inputs;  // H_L for L in [0, n_layers): input of each layer
  Matrix final_hidden;               // output of the last layer (n x d_hidden)
  int next_token = -1;               // greedy argmax from the last position
};

struct DecodeResult {
  int next_token = -1;
  std::vector<Matrix> layer_inputs;  // the new token's H_L per layer (1 x d_hidden)
};

// Deterministic weight init: every element uniform in
// [-1/sqrt(d_hidden), +1/sqrt(d_hidden)], reproducible from (config, seed).
WeightSet init_model(const ModelConfig& config, std::uint64_t seed);

void save_weights(const WeightSet& ws, const std::string& path);
WeightSet load_weights(const std::string& path);

// In-place rotary embedding over rows of x (n x d_hidden), one rotation per
// head-dimension pair; positions[i] is the absolute position of row i.
void apply_rope(Matrix& x, const std::vector<int>& positions, int n_heads);

// (K, V) of layer `layer` from its input hidden states; K is rotated at the
// original absolute positions start_pos..start_pos+n-1. This is the same
// routine prefill uses to fill the KV cache, so restoration is bit-identical.
LayerKV project_hidden_to_kv(const WeightSet& ws, int layer, const Matrix& h,
                             int start_pos, FlopCounter* flops = nullptr);

// Attention block output (pre-residual): W_o * softmax(Q K^T / sqrt(d_head)) * V
// per head, causal. kv must already contain the rows for h's positions.
Matrix attention_forward(const WeightSet& ws, int layer, const Matrix& h,
                         const LayerKV& kv, int start_pos,
                         FlopCounter* flops = nullptr);

// FC2(gelu(FC1(x))), pre-residual.
Matrix ffn_forward(const WeightSet& ws, int layer, const Matrix& x,
                   FlopCounter* flops = nullptr);

// Forward pass over the prompt; returns per-layer inputs and the KV cache.
PrefillResult prefill(const WeightSet& ws, const TokenSeq& tokens,
                      FlopCounter* flops = nullptr);

// Forward pass of `tokens` continuing at position kv.length() (kv may be
// empty); appends their entries to kv. Same per-result fields as prefill but
// layer_inputs cover only the new tokens.
PrefillResult forward_tokens(const WeightSet& ws, KVCache& kv, const TokenSeq& tokens,
                             FlopCounter* flops = nullptr);

// One greedy decode step for `token` at position kv.length(); appends to kv.
DecodeResult decode_step(const WeightSet& ws, KVCache& kv, int token,
                         FlopCounter* flops = nullptr);

// Runs layers [layer_begin, layer_end) over the prompt, filling only those
// layers of `kv`. Used by the recompute-prefix restoration path.
void prefill_layers(const WeightSet& ws, const TokenSeq& tokens, int layer_begin,
                    int layer_end, KVCache& kv, FlopCounter* flops = nullptr);

}  // namespace hcache
