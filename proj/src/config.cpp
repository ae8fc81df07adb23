#include "rollsim/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace rollsim {

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

// Reads one JSON object, remembering which keys were consumed so the rest
// can be reported as unknown.
class Obj {
 public:
  Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label(), "expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  const json* raw(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void num(const char* key, double& out) {
    if (const json* v = raw(key)) {
      if (!v->is_number()) throw ConfigError(field(key), "expected a number");
      out = v->get<double>();
    }
  }

  template <typename I>
  void integer(const char* key, I& out) {
    if (const json* v = raw(key)) {
      if (!v->is_number_integer()) throw ConfigError(field(key), "expected an integer");
      if constexpr (std::is_unsigned_v<I>) {
        if (v->is_number_unsigned()) {
          out = static_cast<I>(v->get<std::uint64_t>());
          return;
        }
        if (v->get<std::int64_t>() < 0) throw ConfigError(field(key), "must be >= 0");
      }
      out = static_cast<I>(v->get<std::int64_t>());
    }
  }

  void boolean(const char* key, bool& out) {
    if (const json* v = raw(key)) {
      if (!v->is_boolean()) throw ConfigError(field(key), "expected true or false");
      out = v->get<bool>();
    }
  }

  bool str(const char* key, std::string& out) {
    if (const json* v = raw(key)) {
      if (!v->is_string()) throw ConfigError(field(key), "expected a string");
      out = v->get<std::string>();
      return true;
    }
    return false;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
    }
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string label() const { return path_.empty() ? "<root>" : path_; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename F>
void section(Obj& parent, const char* key, F&& body) {
  if (const json* v = parent.raw(key)) {
    Obj o(*v, parent.field(key));
    body(o);
    o.finish();
  }
}

LengthDistribution parse_length(Obj& o, LengthDistribution d, const std::filesystem::path& base) {
  std::string kind;
  if (o.str("kind", kind)) {
    if (kind == "lognormal") {
      d.kind = LengthKind::Lognormal;
    } else if (kind == "constant") {
      d.kind = LengthKind::Constant;
      d.sigma = 0.0;
    } else if (kind == "table") {
      d.kind = LengthKind::EmpiricalTable;
    } else {
      throw ConfigError(o.field("kind"), "expected lognormal, constant or table");
    }
  }
  o.integer("max_len_tokens", d.max_len);
  o.num("median_tokens", d.median);
  o.num("sigma", d.sigma);
  double tail_ratio = 0.0;
  o.num("p99_over_p50", tail_ratio);
  if (o.has("p99_over_p50")) {
    if (o.has("sigma")) throw ConfigError(o.field("p99_over_p50"), "give sigma or p99_over_p50, not both");
    try {
      d.sigma = LengthDistribution::lognormal_from_tail_ratio(d.median, tail_ratio, d.max_len).sigma;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(o.field("p99_over_p50"), e.what());
    }
  }
  if (const json* t = o.raw("table")) {
    if (!t->is_array()) throw ConfigError(o.field("table"), "expected [[length, mass], ...]");
    d.table.clear();
    for (std::size_t i = 0; i < t->size(); ++i) {
      const json& row = (*t)[i];
      const std::string f = o.field("table") + "[" + std::to_string(i) + "]";
      if (!row.is_array() || row.size() != 2 || !row[0].is_number_integer() || !row[1].is_number()) {
        throw ConfigError(f, "expected [length, mass]");
      }
      d.table.emplace_back(row[0].get<std::int64_t>(), row[1].get<double>());
    }
  }
  std::string table_path;
  if (o.str("table_path", table_path)) {
    if (o.has("table")) throw ConfigError(o.field("table_path"), "give table or table_path, not both");
    std::filesystem::path p(table_path);
    if (p.is_relative() && !base.empty()) p = base / p;
    try {
      d.table = LengthDistribution::from_table_file(p, d.max_len).table;
    } catch (const std::exception& e) {
      throw ConfigError(o.field("table_path"), e.what());
    }
  }
  return d;
}

ojson dump_length(const LengthDistribution& d) {
  ojson j;
  switch (d.kind) {
    case LengthKind::Lognormal:
      j["kind"] = "lognormal";
      j["median_tokens"] = d.median;
      j["sigma"] = d.sigma;
      break;
    case LengthKind::Constant:
      j["kind"] = "constant";
      j["median_tokens"] = d.median;
      break;
    case LengthKind::EmpiricalTable: {
      j["kind"] = "table";
      ojson rows = ojson::array();
      for (const auto& [len, mass] : d.table) rows.push_back(ojson::array({len, mass}));
      j["table"] = rows;
      break;
    }
  }
  j["max_len_tokens"] = d.max_len;
  return j;
}

const char* env_kind_name(EnvLatencyKind k) {
  switch (k) {
    case EnvLatencyKind::Lognormal:
      return "lognormal";
    case EnvLatencyKind::Constant:
      return "constant";
    default:
      return "none";
  }
}

const char* sampling_name(SamplingStrategy s) {
  return s == SamplingStrategy::Fifo ? "fifo" : "staleness-priority";
}

const char* eviction_name(EvictionStrategy e) {
  switch (e) {
    case EvictionStrategy::DropOldest:
      return "drop-oldest";
    case EvictionStrategy::DropStalest:
      return "drop-stalest";
    default:
      return "none";
  }
}

ScenarioConfig parse_root(const json& root, const std::filesystem::path& base) {
  ScenarioConfig c;
  Obj o(root, "");
  o.integer("seed", c.seed);
  o.num("horizon_s", c.horizon);

  section(o, "policy", [&](Obj& p) {
    std::string kind;
    if (p.str("kind", kind)) {
      auto k = parse_policy_kind(kind);
      if (!k) throw ConfigError(p.field("kind"), "unknown policy \"" + kind + "\"");
      c.policy.kind = *k;
    }
    p.integer("staleness_bound", c.policy.staleness_bound);
    p.num("reprefill_per_token_s", c.policy.reprefill_per_token);
    p.boolean("repack_enabled", c.policy.repack_enabled);
  });

  section(o, "replicas", [&](Obj& r) {
    auto& x = c.replicas;
    r.integer("count", x.count);
    r.integer("per_machine", x.per_machine);
    r.integer("kv_capacity_tokens", x.kv_capacity);
    r.num("t_step_s", x.t_step);
    r.integer("roofline_batch", x.roofline_batch);
    r.num("overload_slope", x.overload_slope);
    r.num("prefill_per_token_s", x.prefill_per_token);
    r.integer("prompts_per_batch", x.prompts_per_batch);
    r.num("reinit_latency_s", x.reinit_latency);
    r.num("replacement_delay_s", x.replacement_delay);
    r.integer("max_replacements", x.max_replacements);
  });

  section(o, "trainer", [&](Obj& t) {
    auto& x = c.trainer;
    t.integer("global_batch", x.global_batch);
    t.integer("minibatches_per_iter", x.minibatches_per_iter);
    t.num("t_minibatch_s", x.t_minibatch);
    t.integer("checkpoint_every", x.checkpoint_every);
    t.num("recovery_latency_s", x.recovery_latency);
    t.num("actor_model_bytes", c.actor_link.model_bytes);
    t.num("actor_t_byte_s", c.actor_link.t_byte);
    t.num("actor_t_start_s", c.actor_link.t_start);
  });

  section(o, "workload", [&](Obj& w) {
    auto& x = c.workload;
    section(w, "response", [&](Obj& d) { x.response = parse_length(d, x.response, base); });
    section(w, "prompt", [&](Obj& d) { x.prompt = parse_length(d, x.prompt, base); });
    section(w, "env", [&](Obj& e) {
      std::string kind;
      if (e.str("kind", kind)) {
        if (kind == "none") {
          x.env.kind = EnvLatencyKind::None;
        } else if (kind == "lognormal") {
          x.env.kind = EnvLatencyKind::Lognormal;
        } else if (kind == "constant") {
          x.env.kind = EnvLatencyKind::Constant;
        } else {
          throw ConfigError(e.field("kind"), "expected none, lognormal or constant");
        }
      }
      e.num("median_s", x.env.median);
      e.num("sigma", x.env.sigma);
      e.integer("calls_per_trajectory", x.env.calls_per_trajectory);
      e.integer("tokens_between_calls", x.env.tokens_between_calls);
    });
    w.integer("prompt_pool_size", x.prompt_pool_size);
    w.boolean("cycle", x.cycle);
    w.integer("group_size", x.group_size);
  });

  section(o, "relay", [&](Obj& r) {
    auto& x = c.relay;
    r.num("model_bytes", x.model_bytes);
    r.num("t_byte_s", x.t_byte);
    r.num("t_start_s", x.t_start);
    r.integer("chunks", x.chunks);
    r.integer("k_cap", x.k_cap);
    r.num("reshard_latency_s", x.reshard_latency);
    r.boolean("heartbeats", x.heartbeats);
    r.num("hb_interval_s", x.hb_interval);
    r.num("hb_timeout_s", x.hb_timeout);
    r.num("rebuild_latency_s", x.rebuild_latency);
    r.integer("retention", x.retention);
    r.num("shard_bytes", x.shard_bytes);
    r.num("local_t_byte_s", x.local_t_byte);
    r.num("local_t_start_s", x.local_t_start);
  });

  section(o, "repack", [&](Obj& r) {
    r.num("c_max", c.repack.c_max);
    r.num("period_s", c.repack.period);
    r.num("transfer_overhead_s", c.repack.transfer_overhead);
  });

  section(o, "buffer", [&](Obj& b) {
    std::string s;
    if (b.str("sampling", s)) {
      if (s == "fifo") {
        c.buffer.sampling = SamplingStrategy::Fifo;
      } else if (s == "staleness-priority") {
        c.buffer.sampling = SamplingStrategy::StalenessPriority;
      } else {
        throw ConfigError(b.field("sampling"), "expected fifo or staleness-priority");
      }
    }
    if (b.str("eviction", s)) {
      if (s == "none") {
        c.buffer.eviction = EvictionStrategy::None;
      } else if (s == "drop-oldest") {
        c.buffer.eviction = EvictionStrategy::DropOldest;
      } else if (s == "drop-stalest") {
        c.buffer.eviction = EvictionStrategy::DropStalest;
      } else {
        throw ConfigError(b.field("eviction"), "expected none, drop-oldest or drop-stalest");
      }
    }
    if (const json* cap = b.raw("capacity_records")) {
      if (cap->is_null()) {
        c.buffer.capacity.reset();
      } else if (cap->is_number_unsigned() || (cap->is_number_integer() && cap->get<std::int64_t>() >= 0)) {
        c.buffer.capacity = cap->get<std::size_t>();
      } else {
        throw ConfigError(b.field("capacity_records"), "expected a non-negative integer or null");
      }
    }
  });

  if (const json* faults = o.raw("faults")) {
    if (!faults->is_array()) throw ConfigError("faults", "expected an array");
    for (std::size_t i = 0; i < faults->size(); ++i) {
      Obj f((*faults)[i], "faults[" + std::to_string(i) + "]");
      FaultSpec spec;
      f.num("time_s", spec.time);
      std::string s;
      if (!f.str("target", s)) throw ConfigError(f.field("target"), "required");
      auto target = parse_fault_target(s);
      if (!target) throw ConfigError(f.field("target"), "expected replica, machine, relay or trainer");
      spec.target = *target;
      if (!f.str("kind", s)) throw ConfigError(f.field("kind"), "required");
      auto kind = parse_fault_kind(s);
      if (!kind) throw ConfigError(f.field("kind"), "expected reinit, evict, crash or restore");
      spec.kind = *kind;
      f.integer("id", spec.id);
      f.finish();
      c.faults.push_back(spec);
    }
  }

  section(o, "metrics", [&](Obj& m) {
    m.num("sample_period_s", c.metrics.sample_period);
    m.num("steady_start_s", c.metrics.steady_start);
  });
  o.finish();

  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    const auto colon = msg.find(": ");
    if (colon == std::string::npos) throw ConfigError("<root>", msg);
    throw ConfigError(msg.substr(0, colon), msg.substr(colon + 2));
  }
  return c;
}

}  // namespace

ScenarioConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("<root>", std::string("malformed JSON: ") + e.what());
  }
  return parse_root(root, base_dir);
}

ScenarioConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

std::string serialize_config(const ScenarioConfig& c, int indent) {
  ojson j;
  j["seed"] = c.seed;
  j["horizon_s"] = c.horizon;
  j["policy"] = {{"kind", to_string(c.policy.kind)},
                 {"staleness_bound", c.policy.staleness_bound},
                 {"reprefill_per_token_s", c.policy.reprefill_per_token},
                 {"repack_enabled", c.policy.repack_enabled}};
  const auto& r = c.replicas;
  j["replicas"] = {{"count", r.count},
                   {"per_machine", r.per_machine},
                   {"kv_capacity_tokens", r.kv_capacity},
                   {"t_step_s", r.t_step},
                   {"roofline_batch", r.roofline_batch},
                   {"overload_slope", r.overload_slope},
                   {"prefill_per_token_s", r.prefill_per_token},
                   {"prompts_per_batch", r.prompts_per_batch},
                   {"reinit_latency_s", r.reinit_latency},
                   {"replacement_delay_s", r.replacement_delay},
                   {"max_replacements", r.max_replacements}};
  const auto& t = c.trainer;
  j["trainer"] = {{"global_batch", t.global_batch},
                  {"minibatches_per_iter", t.minibatches_per_iter},
                  {"t_minibatch_s", t.t_minibatch},
                  {"checkpoint_every", t.checkpoint_every},
                  {"recovery_latency_s", t.recovery_latency},
                  {"actor_model_bytes", c.actor_link.model_bytes},
                  {"actor_t_byte_s", c.actor_link.t_byte},
                  {"actor_t_start_s", c.actor_link.t_start}};
  const auto& w = c.workload;
  ojson wl;
  wl["response"] = dump_length(w.response);
  wl["prompt"] = dump_length(w.prompt);
  wl["env"] = {{"kind", env_kind_name(w.env.kind)},
               {"median_s", w.env.median},
               {"sigma", w.env.sigma},
               {"calls_per_trajectory", w.env.calls_per_trajectory},
               {"tokens_between_calls", w.env.tokens_between_calls}};
  wl["prompt_pool_size"] = w.prompt_pool_size;
  wl["cycle"] = w.cycle;
  wl["group_size"] = w.group_size;
  j["workload"] = wl;
  const auto& rl = c.relay;
  j["relay"] = {{"model_bytes", rl.model_bytes},
                {"t_byte_s", rl.t_byte},
                {"t_start_s", rl.t_start},
                {"chunks", rl.chunks},
                {"k_cap", rl.k_cap},
                {"reshard_latency_s", rl.reshard_latency},
                {"heartbeats", rl.heartbeats},
                {"hb_interval_s", rl.hb_interval},
                {"hb_timeout_s", rl.hb_timeout},
                {"rebuild_latency_s", rl.rebuild_latency},
                {"retention", rl.retention},
                {"shard_bytes", rl.shard_bytes},
                {"local_t_byte_s", rl.local_t_byte},
                {"local_t_start_s", rl.local_t_start}};
  j["repack"] = {{"c_max", c.repack.c_max},
                 {"period_s", c.repack.period},
                 {"transfer_overhead_s", c.repack.transfer_overhead}};
  ojson buf;
  buf["sampling"] = sampling_name(c.buffer.sampling);
  buf["eviction"] = eviction_name(c.buffer.eviction);
  buf["capacity_records"] = c.buffer.capacity ? ojson(*c.buffer.capacity) : ojson(nullptr);
  j["buffer"] = buf;
  ojson faults = ojson::array();
  for (const auto& f : c.faults) {
    faults.push_back({{"time_s", f.time},
                      {"target", to_string(f.target)},
                      {"id", f.id},
                      {"kind", to_string(f.kind)}});
  }
  j["faults"] = faults;
  j["metrics"] = {{"sample_period_s", c.metrics.sample_period},
                  {"steady_start_s", c.metrics.steady_start}};
  return j.dump(indent);
}

bool same_config(const ScenarioConfig& a, const ScenarioConfig& b) {
  return serialize_config(a, -1) == serialize_config(b, -1);
}

}  // namespace rollsim
