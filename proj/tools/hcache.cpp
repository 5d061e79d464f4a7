// Command-line front end: trace generation, offline profiling, partition
// planning, serving-loop runs and the token-wise ablation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "hcache/config_file.hpp"
#include "hcache/cost_model.hpp"
#include "hcache/harness.hpp"
#include "hcache/model.hpp"
#include "hcache/planner.hpp"
#include "hcache/restore.hpp"
#include "hcache/storage.hpp"
#include "hcache/trace.hpp"

namespace fs = std::filesystem;
using namespace hcache;

namespace {

struct ModelArgs {
  int layers = 4;
  int d_hidden = 256;
  int heads = 8;
  int d_ffn = 0;  // 0 = 4 * d_hidden
  int vocab = 1024;
  int elem_bytes = 4;
  std::uint64_t seed = 1;

  void attach(CLI::App* app) {
    app->add_option("--layers", layers, "transformer layers");
    app->add_option("--d-hidden", d_hidden, "hidden width");
    app->add_option("--heads", heads, "attention heads");
    app->add_option("--d-ffn", d_ffn, "FFN width (default 4*d_hidden)");
    app->add_option("--vocab", vocab, "vocabulary size");
    app->add_option("--elem-bytes", elem_bytes, "persisted element width (2 or 4)");
    app->add_option("--model-seed", seed, "weight init seed");
  }
  WeightSet build() const {
    ModelConfig cfg;
    cfg.n_layers = layers;
    cfg.d_hidden = d_hidden;
    cfg.n_heads = heads;
    cfg.d_ffn = d_ffn > 0 ? d_ffn : 4 * d_hidden;
    cfg.vocab_size = vocab;
    cfg.elem_bytes = elem_bytes;
    return init_model(cfg, seed);
  }
};

struct PoolArgs {
  std::string store_dir = "hcache_store";
  int devices = 4;
  double device_bw = 6.9e9;
  double device_latency = 5e-5;

  void attach(CLI::App* app) {
    app->add_option("--store", store_dir, "storage root directory");
    app->add_option("--devices", devices, "device (directory) count");
    app->add_option("--device-bw", device_bw, "simulated device read bw, bytes/s");
    app->add_option("--device-latency", device_latency, "simulated per-chunk latency, s");
  }
  DevicePool build(bool fresh) const {
    DevicePool pool;
    pool.bw_bytes_per_s = device_bw;
    pool.read_latency_s = device_latency;
    for (int i = 0; i < devices; ++i) {
      fs::path root = fs::path(store_dir) / ("dev" + std::to_string(i));
      if (fresh) fs::remove_all(root);
      fs::create_directories(root);
      pool.roots.push_back(root);
    }
    return pool;
  }
};

struct ThrottleArgs {
  std::string mode = "sim";
  double flops = 312e12;
  double efficiency = 0.5;
  int prefetch_depth = 1;
  int minibatch = 1024;

  void attach(CLI::App* app) {
    app->add_option("--mode", mode, "clock mode: sim or wall")
        ->check(CLI::IsMember({"sim", "wall"}));
    app->add_option("--flops", flops, "peak GEMM rate, FLOP/s");
    app->add_option("--efficiency", efficiency, "achieved fraction of peak");
    app->add_option("--prefetch-depth", prefetch_depth, "restoration prefetch depth");
    app->add_option("--minibatch", minibatch, "profiling mini-batch, tokens");
  }
  ThrottleConfig build(const PoolArgs& pool) const {
    ThrottleConfig t;
    t.mode = mode == "wall" ? ThrottleConfig::Mode::WallClock
                            : ThrottleConfig::Mode::Simulated;
    t.profile.flops = flops;
    t.profile.efficiency = efficiency;
    t.profile.bw = pool.device_bw * pool.devices;
    t.prefetch_depth = prefetch_depth;
    t.minibatch_tokens = minibatch;
    return t;
  }
};

TraceParams trace_params(int sessions, int rounds, std::uint64_t) {
  TraceParams p;
  p.n_sessions = sessions;
  p.rounds = rounds;
  p.ctx_min = 256;  // keep CLI runs inside the toy model's max_seq
  p.ctx_max = 1024;
  return p;
}

int cmd_gen_trace(const std::string& kind, int sessions, int rounds,
                  std::uint64_t seed, const std::string& out) {
  TraceKind k = kind == "long-context" ? TraceKind::LongContext
                                       : TraceKind::Conversation;
  Trace tr = gen_trace(k, trace_params(sessions, rounds, seed), seed);
  std::ostringstream os;
  os << "# kind=" << kind << " seed=" << seed << "\n";
  os << "session,round,arrival_s,history,prompt,budget\n";
  for (const auto& r : tr.requests)
    os << r.session_id << ',' << r.round << ',' << r.arrival_s << ','
       << r.history_tokens << ',' << r.prompt.size() << ',' << r.output_budget
       << "\n";
  if (out.empty()) {
    std::cout << os.str();
  } else {
    std::ofstream f(out);
    f << os.str();
    std::cout << "wrote " << tr.requests.size() << " requests to " << out << "\n";
  }
  return 0;
}

int cmd_profile(const ModelArgs& ma, const PoolArgs& pa, const ThrottleArgs& ta,
                const std::string& out) {
  WeightSet ws = ma.build();
  StorageManager store(pa.build(true));
  ProfiledTimings t = profile_hardware(ws, store, ta.build(pa));
  std::printf("io_h=%.9g io_kv=%.9g c_h=%.9g c_token=%.9g n_layers=%d\n", t.io_h,
              t.io_kv, t.c_h, t.c_token, t.n_layers);
  if (!out.empty()) {
    std::map<std::string, std::string> kv{
        {"io_h", std::to_string(t.io_h)},
        {"io_kv", std::to_string(t.io_kv)},
        {"c_h", std::to_string(t.c_h)},
        {"c_token", std::to_string(t.c_token)},
        {"n_layers", std::to_string(t.n_layers)}};
    write_kv_file(out, kv);
  }
  return 0;
}

int cmd_plan(ProfiledTimings t, const std::string& timings_file) {
  if (!timings_file.empty()) {
    auto kv = read_kv_file(timings_file);
    t.io_h = std::stod(kv.at("io_h"));
    t.io_kv = std::stod(kv.at("io_kv"));
    t.c_h = std::stod(kv.at("c_h"));
    t.c_token = std::stod(kv.at("c_token"));
    t.n_layers = std::stoi(kv.at("n_layers"));
  }
  RestorationPlan p = plan(t);
  std::printf("%s\n", p.serialize().c_str());
  std::printf("makespan=%.9g io_lane_only=%.9g\n", makespan(p, t),
              t.n_layers * t.io_kv);
  return 0;
}

int cmd_run(const ModelArgs& ma, const PoolArgs& pa, const ThrottleArgs& ta,
            const std::string& kind, int sessions, int rounds, std::uint64_t seed,
            const std::string& strategy, const std::string& saving,
            const std::string& csv_out) {
  WeightSet ws = ma.build();
  TraceKind k = kind == "long-context" ? TraceKind::LongContext
                                       : TraceKind::Conversation;
  Trace tr = gen_trace(k, trace_params(sessions, rounds, seed), seed);

  RunOptions opt;
  opt.strategy = strategy_from_string(strategy);
  opt.throttle = ta.build(pa);
  if (saving == "direct") opt.sim.saving = SavingMode::Direct;
  if (saving == "off") opt.sim.saving = SavingMode::Off;

  if (opt.strategy == Strategy::HCache) {
    StorageManager scratch(pa.build(true));
    ProfiledTimings t = profile_hardware(ws, scratch, opt.throttle);
    opt.hcache_plan = plan(t);
    std::printf("plan: %s\n", opt.hcache_plan.serialize().c_str());
  }

  Metrics m = run(tr, ws, pa.build(true), opt);
  std::cout << report({m});
  if (!csv_out.empty()) {
    std::ofstream f(csv_out);
    f << m.to_csv();
    std::cout << "wrote per-request metrics to " << csv_out << "\n";
  }
  return 0;
}

int cmd_report(const std::vector<std::string>& files, bool csv) {
  std::vector<Metrics> sets;
  for (const auto& path : files) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::ostringstream os;
    os << f.rdbuf();
    sets.push_back(Metrics::from_csv(os.str()));
  }
  std::cout << report(sets, csv);
  return 0;
}

int cmd_ablate(const ModelArgs& ma, const PoolArgs& pa, const ThrottleArgs& ta,
               int n_tokens) {
  WeightSet ws = ma.build();
  StorageManager store(pa.build(true));
  ThrottleConfig throttle = ta.build(pa);

  // one stored session with every layer's hidden states and KV
  std::vector<int> tokens(static_cast<std::size_t>(n_tokens));
  for (int i = 0; i < n_tokens; ++i) tokens[std::size_t(i)] = i % ws.config.vocab_size;
  KVCache kv;
  PrefillResult pr = forward_tokens(ws, kv, TokenSeq{tokens});
  RestorationPlan all_h =
      RestorationPlan::make(ws.config.n_layers, ws.config.n_layers, Complement::None);
  SessionSeed seed{"ablate", ws.config.hash(),  ws.config.n_layers,
                   ws.config.d_hidden, ws.config.elem_bytes, all_h, tokens};
  store.create_session(seed);
  for (int L = 0; L < ws.config.n_layers; ++L) {
    while (!store.snapshot("ablate", L, StateKind::Hidden, pr.layer_inputs[std::size_t(L)]))
      store.drain();
    while (!store.snapshot("ablate", L, StateKind::Kv,
                           interleave_kv(kv.layers[std::size_t(L)])))
      store.drain();
  }
  store.finalize("ablate");

  RestoreResult layerwise = restore(store, "ablate", ws, all_h, throttle);
  std::printf("layer-wise all-hidden:        %.9g s\n", layerwise.timeline.total_s);
  for (int split : {n_tokens, (n_tokens * 3) / 4, n_tokens / 2, n_tokens / 4, 0}) {
    RestoreResult r = restore_token_wise(store, "ablate", ws, split, throttle);
    std::printf("token-wise hidden=%-6d       %.9g s\n", split, r.timeline.total_s);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hidden-state cache toolkit"};
  app.require_subcommand(1);

  ModelArgs ma;
  PoolArgs pa;
  ThrottleArgs ta;

  std::string kind = "conversation";
  int sessions = 4, rounds = 3;
  std::uint64_t seed = 7;
  std::string out, strategy = "hcache", saving = "two-stage", csv_out;
  std::vector<std::string> report_files;
  bool report_csv = false;
  int ablate_tokens = 512;
  ProfiledTimings plan_t;
  std::string timings_file;

  auto* gen = app.add_subcommand("gen-trace", "generate and print a request trace");
  gen->add_option("--kind", kind)->check(CLI::IsMember({"conversation", "long-context"}));
  gen->add_option("--sessions", sessions);
  gen->add_option("--rounds", rounds);
  gen->add_option("--seed", seed);
  gen->add_option("--out", out);

  auto* prof = app.add_subcommand("profile", "measure per-layer stage timings");
  ma.attach(prof);
  pa.attach(prof);
  ta.attach(prof);
  prof->add_option("--out", out, "write timings as key=value");

  auto* pl = app.add_subcommand("plan", "compute the bubble-free layer partition");
  pl->add_option("--io-h", plan_t.io_h);
  pl->add_option("--io-kv", plan_t.io_kv);
  pl->add_option("--c-h", plan_t.c_h);
  pl->add_option("--c-token", plan_t.c_token);
  pl->add_option("--n-layers", plan_t.n_layers);
  pl->add_option("--timings", timings_file, "key=value file from `profile`");

  auto* rn = app.add_subcommand("run", "serve a trace and report metrics");
  ma.attach(rn);
  pa.attach(rn);
  ta.attach(rn);
  rn->add_option("--kind", kind)->check(CLI::IsMember({"conversation", "long-context"}));
  rn->add_option("--sessions", sessions);
  rn->add_option("--rounds", rounds);
  rn->add_option("--seed", seed);
  rn->add_option("--strategy", strategy)
      ->check(CLI::IsMember({"hcache", "kv_offload", "recompute", "ideal"}));
  rn->add_option("--saving", saving)
      ->check(CLI::IsMember({"two-stage", "direct", "off"}));
  rn->add_option("--csv-out", csv_out, "per-request metrics CSV");

  auto* rep = app.add_subcommand("report", "merge run CSVs into one table");
  rep->add_option("files", report_files)->required();
  rep->add_flag("--csv", report_csv);

  auto* ab = app.add_subcommand("ablate", "layer-wise vs token-wise restoration");
  ma.attach(ab);
  pa.attach(ab);
  ta.attach(ab);
  ab->add_option("--tokens", ablate_tokens);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_trace(kind, sessions, rounds, seed, out);
    if (prof->parsed()) return cmd_profile(ma, pa, ta, out);
    if (pl->parsed()) return cmd_plan(plan_t, timings_file);
    if (rn->parsed())
      return cmd_run(ma, pa, ta, kind, sessions, rounds, seed, strategy, saving,
                     csv_out);
    if (rep->parsed()) return cmd_report(report_files, report_csv);
    if (ab->parsed()) return cmd_ablate(ma, pa, ta, ablate_tokens);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
