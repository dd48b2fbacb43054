#pragma once

#include "paattack/attack.hpp"
#include "paattack/core.hpp"
#include "paattack/harness.hpp"
#include "paattack/micro_encoder.hpp"
#include "paattack/probe.hpp"
#include "paattack/prototype_bank.hpp"
#include "paattack/random.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

// Command configuration. The document form is JSON with five sections:
//
//   encoder:   preset ("default" | "toy"), remote ("host:port" or ""),
//              remote_command (argv of a stdio server, or [])
//   prototype: guidance_dir, m (0 = all images), w (PCA dim), k, mode
//   attack:    epsilon, alpha, s1, s2, lambda, temperature, layer, eta
//              (null = epsilon), guidance_mode, stages, use_guidance,
//              use_attention, record_deviation
//   eval:      task, probe_dir, features, proportions, grid, clean_only
//   io:        input_dir, output_dir, bank, seed, jobs
//
// Unknown keys anywhere are rejected. Missing keys keep their defaults.
//
// Seeds: everything flows from io.seed; component seeds are
// derive_seed(io.seed, name) with name "encoder", "prototype", "attack",
// "probe" or "mask" (a 64-bit FNV-1a of the name xor-ed into the seed and
// passed through splitmix64). Per-image attack seeds are further split by
// image id.
namespace paattack {

struct EncoderSection {
  std::string preset = "default";
  std::string remote;
  std::vector<std::string> remote_command;
};

struct PrototypeSection {
  std::string guidance_dir;
  int m = 0;
  int w = 16;
  int k = 4;
  GuidanceMode mode = GuidanceMode::FarthestPrototype;
};

struct EvalSection {
  TaskKind task = TaskKind::Classification;
  std::string probe_dir;
  ProbeFeatures features = ProbeFeatures::MeanPooled;
  std::vector<double> proportions{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  std::string grid;
  bool clean_only = false;
};

struct IoSection {
  std::string input_dir;
  std::string output_dir;
  std::string bank;
  std::uint64_t seed = 0;
  int jobs = 1;
};

struct RunConfig {
  EncoderSection encoder;
  PrototypeSection prototype;
  AttackConfig attack;
  EvalSection eval;
  IoSection io;

  std::uint64_t seed_for(std::string_view component) const { return derive_seed(io.seed, component); }

  EncoderConfig encoder_config() const {
    require(encoder.preset == "default" || encoder.preset == "toy", ErrorCode::InvalidConfig,
            "unknown encoder preset: " + encoder.preset);
    EncoderConfig c = encoder.preset == "toy" ? EncoderConfig::toy() : EncoderConfig{};
    c.seed = seed_for("encoder");
    return c;
  }

  void validate() const {
    encoder_config().validate();
    require(encoder.remote.empty() || encoder.remote_command.empty(), ErrorCode::InvalidConfig,
            "choose either encoder.remote or encoder.remote_command");
    require(prototype.m >= 0, ErrorCode::InvalidConfig, "prototype.m must be >= 0");
    require(prototype.w >= 1, ErrorCode::InvalidConfig, "prototype.w must be >= 1");
    require(prototype.k >= 1, ErrorCode::InvalidConfig, "prototype.k must be >= 1");
    attack.validate();
    for (double p : eval.proportions)
      require(p >= 0.0 && p <= 1.0, ErrorCode::InvalidConfig, "eval.proportions must lie in [0,1]");
    require(io.jobs >= 1, ErrorCode::InvalidConfig, "io.jobs must be >= 1");
  }
};

namespace detail {

using Json = nlohmann::json;

// Reads known keys from a section object and rejects the rest.
class SectionReader {
 public:
  SectionReader(const Json& j, std::string name) : j_(j), name_(std::move(name)) {
    require(j_.is_object(), ErrorCode::InvalidConfig, "config section '" + name_ + "' must be an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorCode::InvalidConfig, "config key " + name_ + "." + key + " has the wrong type");
    }
  }

  template <typename V, typename Parse>
  void get_parsed(const char* key, V& out, Parse parse) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    std::string v;
    get(key, v);
    out = parse(v);
  }

  void mark(const char* key) { seen_.insert(key); }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      require(seen_.contains(key), ErrorCode::InvalidConfig, "unknown config key: " + name_ + "." + key);
  }

 private:
  const Json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["encoder"] = {{"preset", c.encoder.preset}, {"remote", c.encoder.remote},
                  {"remote_command", c.encoder.remote_command}};
  j["prototype"] = {{"guidance_dir", c.prototype.guidance_dir},
                    {"m", c.prototype.m},
                    {"w", c.prototype.w},
                    {"k", c.prototype.k},
                    {"mode", to_string(c.prototype.mode)}};
  const AttackConfig& a = c.attack;
  j["attack"] = {{"epsilon", a.epsilon},
                 {"alpha", a.alpha},
                 {"s1", a.s1},
                 {"s2", a.s2},
                 {"lambda", a.lambda},
                 {"temperature", a.temperature},
                 {"layer", a.layer.to_string()},
                 {"eta", a.eta ? nlohmann::json(*a.eta) : nlohmann::json(nullptr)},
                 {"guidance_mode", to_string(a.guidance_mode)},
                 {"stages", a.stages},
                 {"use_guidance", a.use_guidance},
                 {"use_attention", a.use_attention},
                 {"record_deviation", a.record_deviation}};
  j["eval"] = {{"task", to_string(c.eval.task)},
               {"probe_dir", c.eval.probe_dir},
               {"features", to_string(c.eval.features)},
               {"proportions", c.eval.proportions},
               {"grid", c.eval.grid},
               {"clean_only", c.eval.clean_only}};
  j["io"] = {{"input_dir", c.io.input_dir},
             {"output_dir", c.io.output_dir},
             {"bank", c.io.bank},
             {"seed", c.io.seed},
             {"jobs", c.io.jobs}};
  return j;
}

// Overlays a document onto `base` (defaults or an earlier layer).
inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig c = {}) {
  using detail::SectionReader;
  require(j.is_object(), ErrorCode::InvalidConfig, "config document must be a JSON object");
  static const std::set<std::string> sections{"encoder", "prototype", "attack", "eval", "io"};
  for (const auto& [key, value] : j.items())
    require(sections.contains(key), ErrorCode::InvalidConfig, "unknown config section: " + key);

  if (j.contains("encoder")) {
    SectionReader r(j["encoder"], "encoder");
    r.get("preset", c.encoder.preset);
    r.get("remote", c.encoder.remote);
    r.get("remote_command", c.encoder.remote_command);
    r.finish();
  }
  if (j.contains("prototype")) {
    SectionReader r(j["prototype"], "prototype");
    r.get("guidance_dir", c.prototype.guidance_dir);
    r.get("m", c.prototype.m);
    r.get("w", c.prototype.w);
    r.get("k", c.prototype.k);
    r.get_parsed("mode", c.prototype.mode, parse_guidance_mode);
    r.finish();
  }
  if (j.contains("attack")) {
    SectionReader r(j["attack"], "attack");
    AttackConfig& a = c.attack;
    r.get("epsilon", a.epsilon);
    r.get("alpha", a.alpha);
    r.get("s1", a.s1);
    r.get("s2", a.s2);
    r.get("lambda", a.lambda);
    r.get("temperature", a.temperature);
    r.get_parsed("layer", a.layer, LayerSelector::parse);
    if (j["attack"].contains("eta") && j["attack"]["eta"].is_null()) {
      r.mark("eta");
      a.eta.reset();
    } else if (j["attack"].contains("eta")) {
      r.get("eta", a.eta.emplace());
    }
    r.get_parsed("guidance_mode", a.guidance_mode, parse_guidance_mode);
    r.get("stages", a.stages);
    r.get("use_guidance", a.use_guidance);
    r.get("use_attention", a.use_attention);
    r.get("record_deviation", a.record_deviation);
    r.finish();
  }
  if (j.contains("eval")) {
    SectionReader r(j["eval"], "eval");
    r.get_parsed("task", c.eval.task, parse_task_kind);
    r.get("probe_dir", c.eval.probe_dir);
    r.get_parsed("features", c.eval.features, parse_probe_features);
    r.get("proportions", c.eval.proportions);
    r.get("grid", c.eval.grid);
    r.get("clean_only", c.eval.clean_only);
    r.finish();
  }
  if (j.contains("io")) {
    SectionReader r(j["io"], "io");
    r.get("input_dir", c.io.input_dir);
    r.get("output_dir", c.io.output_dir);
    r.get("bank", c.io.bank);
    r.get("seed", c.io.seed);
    r.get("jobs", c.io.jobs);
    r.finish();
  }
  return c;
}

}  // namespace paattack
