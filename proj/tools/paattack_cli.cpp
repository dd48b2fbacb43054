// paattack: fixture generation, prototype banks, attacks, evaluation and
// diagnostics over the micro-encoder or a remote encoder service.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
// Errors are reported on stderr as lines starting with "ERROR:".

#include "paattack/attack.hpp"
#include "paattack/bridge_server.hpp"
#include "paattack/harness.hpp"
#include "paattack/micro_encoder.hpp"
#include "paattack/remote_encoder.hpp"
#include "paattack/run_config.hpp"
#include "paattack/run_io.hpp"
#include "png_image.hpp"

#include <CLI11.hpp>

#include <functional>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace paattack;

// ---------------------------------------------------------------- options

using Override = std::function<void(RunConfig&)>;

struct CommandOptions {
  std::string config_path;
  bool print_config = false;
  std::vector<Override> overrides;
};

template <typename V, typename Set>
void option(CLI::App* app, CommandOptions& opts, const std::string& name, const std::string& desc, Set set) {
  auto store = std::make_shared<V>();
  CLI::Option* o = app->add_option(name, *store, desc);
  opts.overrides.push_back([o, store, set](RunConfig& c) {
    if (o->count() > 0) set(c, *store);
  });
}

// "2/255" or a plain decimal.
double parse_fraction(const std::string& s) {
  const auto slash = s.find('/');
  try {
    if (slash == std::string::npos) return std::stod(s);
    const double den = std::stod(s.substr(slash + 1));
    require(den != 0.0, ErrorCode::InvalidConfig, "zero denominator in " + s);
    return std::stod(s.substr(0, slash)) / den;
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::InvalidConfig, "not a number: " + s);
  }
}

bool parse_on_off(const std::string& name, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw Error(ErrorCode::InvalidConfig, name + " expects on/off, got " + v);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, sep))
    if (!part.empty()) out.push_back(part);
  return out;
}

// Flags mirroring RunConfig; all commands accept all of them.
void add_config_flags(CLI::App* app, CommandOptions& o) {
  app->add_option("--config", o.config_path, "JSON configuration document; flags override it");
  app->add_flag("--print-config", o.print_config, "print the effective configuration and exit");

  option<std::uint64_t>(app, o, "--seed", "top-level seed", [](RunConfig& c, auto v) { c.io.seed = v; });
  option<int>(app, o, "--jobs", "worker threads over images", [](RunConfig& c, auto v) { c.io.jobs = v; });
  option<std::string>(app, o, "--input", "input image directory", [](RunConfig& c, auto v) { c.io.input_dir = v; });
  option<std::string>(app, o, "--out", "output directory", [](RunConfig& c, auto v) { c.io.output_dir = v; });
  option<std::string>(app, o, "--bank", "prototype bank file", [](RunConfig& c, auto v) { c.io.bank = v; });

  option<std::string>(app, o, "--encoder-preset", "micro-encoder preset: default or toy",
                      [](RunConfig& c, auto v) { c.encoder.preset = v; });
  option<std::string>(app, o, "--remote", "remote encoder host:port", [](RunConfig& c, auto v) { c.encoder.remote = v; });
  option<std::string>(app, o, "--remote-command", "stdio encoder server command line (space separated)",
                      [](RunConfig& c, auto v) { c.encoder.remote_command = split(v, ' '); });

  option<std::string>(app, o, "--guidance-dir", "guidance image directory",
                      [](RunConfig& c, auto v) { c.prototype.guidance_dir = v; });
  option<int>(app, o, "--memory-size", "guidance images used (0 = all)", [](RunConfig& c, auto v) { c.prototype.m = v; });
  option<int>(app, o, "--pca-dim", "PCA dimension", [](RunConfig& c, auto v) { c.prototype.w = v; });
  option<int>(app, o, "--clusters", "number of prototypes K", [](RunConfig& c, auto v) { c.prototype.k = v; });
  option<std::string>(app, o, "--bank-mode", "guidance mode stored in the bank",
                      [](RunConfig& c, auto v) { c.prototype.mode = parse_guidance_mode(v); });

  option<std::string>(app, o, "--epsilon", "L-inf budget, e.g. 2/255",
                      [](RunConfig& c, auto v) { c.attack.epsilon = parse_fraction(v); });
  option<std::string>(app, o, "--alpha", "step size, e.g. 1/255",
                      [](RunConfig& c, auto v) { c.attack.alpha = parse_fraction(v); });
  option<int>(app, o, "--s1", "stage-1 steps", [](RunConfig& c, auto v) { c.attack.s1 = v; });
  option<int>(app, o, "--s2", "steps per later stage", [](RunConfig& c, auto v) { c.attack.s2 = v; });
  option<double>(app, o, "--lambda", "guidance weight", [](RunConfig& c, auto v) { c.attack.lambda = v; });
  option<std::string>(app, o, "--temperature", "attention temperature, e.g. 1/20",
                      [](RunConfig& c, auto v) { c.attack.temperature = parse_fraction(v); });
  option<std::string>(app, o, "--layer", "attention layer: middle, last or an index",
                      [](RunConfig& c, auto v) { c.attack.layer = LayerSelector::parse(v); });
  option<std::string>(app, o, "--eta", "random-start half-range (default epsilon)",
                      [](RunConfig& c, auto v) { c.attack.eta = parse_fraction(v); });
  option<std::string>(app, o, "--guidance-mode", "anchor selection mode",
                      [](RunConfig& c, auto v) { c.attack.guidance_mode = parse_guidance_mode(v); });
  option<int>(app, o, "--stages", "number of attention stages", [](RunConfig& c, auto v) { c.attack.stages = v; });
  option<std::string>(app, o, "--guidance", "guidance term on/off",
                      [](RunConfig& c, auto v) { c.attack.use_guidance = parse_on_off("--guidance", v); });
  option<std::string>(app, o, "--attention", "attention weights on/off",
                      [](RunConfig& c, auto v) { c.attack.use_attention = parse_on_off("--attention", v); });
  option<std::string>(app, o, "--record-deviation", "record deviation matrices on/off",
                      [](RunConfig& c, auto v) { c.attack.record_deviation = parse_on_off("--record-deviation", v); });

  option<std::string>(app, o, "--task", "classification or retrieval",
                      [](RunConfig& c, auto v) { c.eval.task = parse_task_kind(v); });
  option<std::string>(app, o, "--probe-dir", "labelled images for the linear probe",
                      [](RunConfig& c, auto v) { c.eval.probe_dir = v; });
  option<std::string>(app, o, "--features", "probe features: mean or tokens",
                      [](RunConfig& c, auto v) { c.eval.features = parse_probe_features(v); });
  option<std::string>(app, o, "--proportions", "mask proportions, comma separated",
                      [](RunConfig& c, auto v) {
                        c.eval.proportions.clear();
                        for (const auto& p : split(v, ',')) c.eval.proportions.push_back(parse_fraction(p));
                      });
  option<std::string>(app, o, "--grid", "ablation grid, e.g. \"guidance=on,off;stages=1,2\"",
                      [](RunConfig& c, auto v) { c.eval.grid = v; });
  option<std::string>(app, o, "--clean-only", "score clean images as adversarial (on/off)",
                      [](RunConfig& c, auto v) { c.eval.clean_only = parse_on_off("--clean-only", v); });
}

RunConfig resolve_config(const CommandOptions& o) {
  RunConfig c;
  if (!o.config_path.empty()) {
    const Json doc = Json::parse(read_file(o.config_path), nullptr, false);
    require(!doc.is_discarded(), ErrorCode::InvalidConfig, "config file is not valid JSON: " + o.config_path);
    c = run_config_from_json(doc);
  }
  for (const auto& apply : o.overrides) apply(c);
  c.validate();
  return c;
}

void warn(const std::string& msg) { std::cerr << "WARNING: " << msg << "\n"; }

// ---------------------------------------------------------------- inputs

std::unique_ptr<Encoder<double>> make_encoder(const RunConfig& c) {
  if (!c.encoder.remote.empty()) {
    const auto colon = c.encoder.remote.rfind(':');
    require(colon != std::string::npos, ErrorCode::InvalidConfig, "--remote expects host:port");
    const std::string host = c.encoder.remote.substr(0, colon);
    int port = 0;
    try {
      port = std::stoi(c.encoder.remote.substr(colon + 1));
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::InvalidConfig, "bad port in --remote " + c.encoder.remote);
    }
    return std::make_unique<wire::RemoteEncoder<double>>([host, port] { return wire::tcp_connect(host, port); });
  }
  if (!c.encoder.remote_command.empty()) {
    const auto argv = c.encoder.remote_command;
    return std::make_unique<wire::RemoteEncoder<double>>([argv] { return std::make_unique<wire::Subprocess>(argv); });
  }
  return std::make_unique<MicroEncoder<double>>(c.encoder_config());
}

ImageTensor<double> read_image(const fs::path& p) {
  if (p.extension() == ".png") return load_png<double>(p.string());
  return load_image<double>(p.string());
}

struct LoadedSet {
  std::vector<LabeledImage> items;
};

// All images of a directory with their labels (-1 when unlabelled).
LoadedSet load_dir(const std::string& dir, bool need_labels) {
  LoadedSet out;
  const auto labels = read_labels(dir);
  for (const auto& p : list_images(dir)) {
    const std::string id = image_id(p);
    const auto it = labels.find(id);
    require(!need_labels || it != labels.end(), ErrorCode::Io, "no label for " + id + " in " + dir + "/labels.csv");
    out.items.push_back({id, it == labels.end() ? -1 : it->second, read_image(p)});
  }
  return out;
}

Json bank_summary(const PrototypeBank& bank) {
  return {{"K", bank.num_prototypes()},
          {"N", bank.num_tokens()},
          {"d", bank.dim()},
          {"mode", to_string(bank.mode)},
          {"seed", bank.seed},
          {"pca_dim", bank.pca_dim},
          {"data_hash", bank.data_hash},
          {"cluster_sizes", bank.cluster_sizes}};
}

Json encoder_summary(const EncoderInfo& info) {
  Json j = wire::info_to_json(info, 0);
  j.erase("kind");
  j.erase("id");
  return j;
}

// ---------------------------------------------------------------- commands

struct FixtureOptions {
  int guide = 64;
  int eval = 24;
  int probe = 120;
  int classes = 4;
};

int cmd_make_fixture(const RunConfig& c, const FixtureOptions& f) {
  require(!c.io.output_dir.empty(), ErrorCode::InvalidConfig, "make-fixture needs --out");
  const EncoderConfig ec = c.encoder_config();
  const std::uint64_t seed = c.seed_for("fixture");
  for (const auto& [name, count] : {std::pair{"guide", f.guide}, {"eval", f.eval}, {"probe", f.probe}}) {
    require(count >= 0, ErrorCode::InvalidConfig, std::string("negative image count for ") + name);
    const fs::path dir = fs::path(c.io.output_dir) / name;
    fs::create_directories(dir);
    std::vector<std::pair<std::string, int>> labels;
    for (const auto& item : synthetic_dataset(count, f.classes, seed, name, ec.channels, ec.image_height, ec.image_width)) {
      save_image((dir / (item.id + ".tensor")).string(), item.image);
      labels.emplace_back(item.id, item.label);
    }
    write_labels(dir.string(), labels);
  }
  return 0;
}

int cmd_build_prototypes(const RunConfig& c) {
  require(!c.prototype.guidance_dir.empty(), ErrorCode::InvalidConfig, "build-prototypes needs --guidance-dir");
  require(!c.io.bank.empty(), ErrorCode::InvalidConfig, "build-prototypes needs --bank (output file)");
  auto paths = list_images(c.prototype.guidance_dir);
  require(!paths.empty(), ErrorCode::Precondition, "empty guidance set: " + c.prototype.guidance_dir);
  if (c.prototype.m > 0 && static_cast<size_t>(c.prototype.m) < paths.size()) paths.resize(c.prototype.m);

  std::set<std::string> eval_ids;
  if (!c.io.input_dir.empty())
    for (const auto& p : list_images(c.io.input_dir)) eval_ids.insert(image_id(p));

  const auto encoder = make_encoder(c);
  std::vector<ImageTensor<double>> images;
  std::vector<std::string> ids;
  for (const auto& p : paths) {
    ids.push_back(image_id(p));
    images.push_back(read_image(p));
  }
  const GuidanceMemory memory = build_memory(*encoder, images, ids, eval_ids);
  const PrototypeBank bank =
      build_prototype_bank(memory, {c.prototype.w, c.prototype.k, c.seed_for("prototype"), c.prototype.mode}, warn);

  const fs::path out(c.io.bank);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_file(out.string(), encode_bank(bank));
  Json manifest = bank_summary(bank);
  manifest["m"] = memory.size();
  manifest["w_requested"] = c.prototype.w;
  manifest["seed_top"] = c.io.seed;
  manifest["source_ids"] = ids;
  write_file(out.string() + ".manifest.json", json_text(manifest));
  return 0;
}

struct ImageResult {
  std::string id;
  int label = -1;
  bool ok = false;
  std::string error;
  std::optional<AttackTrace<double>> trace;
};

int cmd_attack(const RunConfig& c) {
  require(!c.io.input_dir.empty(), ErrorCode::InvalidConfig, "attack needs --input");
  require(!c.io.output_dir.empty(), ErrorCode::InvalidConfig, "attack needs --out");
  require(!c.io.bank.empty(), ErrorCode::InvalidConfig, "attack needs --bank");
  const PrototypeBank bank = decode_bank(read_file(c.io.bank));
  const auto encoder = make_encoder(c);
  const EncoderInfo info = encoder->info();
  require(bank.num_tokens() == info.num_tokens && bank.dim() == info.dim, ErrorCode::IncompatibleBank,
          "bank grid [" + std::to_string(bank.num_tokens()) + "," + std::to_string(bank.dim()) +
              "] does not match encoder [" + std::to_string(info.num_tokens) + "," + std::to_string(info.dim) + "]");

  const auto paths = list_images(c.io.input_dir);
  const auto labels = read_labels(c.io.input_dir);
  AttackConfig base = c.attack;
  base.seed = c.seed_for("attack");

  std::vector<ImageResult> results(paths.size());
  parallel_for(paths.size(), c.io.jobs, [&](size_t i) {
    ImageResult& r = results[i];
    r.id = image_id(paths[i]);
    if (const auto it = labels.find(r.id); it != labels.end()) r.label = it->second;
    try {
      AttackConfig cfg = base;
      cfg.seed = image_attack_seed(base.seed, r.id);
      const ImageTensor<double> clean = read_image(paths[i]);
      r.trace = pa_attack(*encoder, clean, bank, cfg);
      validate_adversarial(r.trace->adv_image, clean, cfg.epsilon);
      r.ok = true;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
  });

  // Single collector: all files are written here, in input order.
  const fs::path run(c.io.output_dir);
  fs::create_directories(run / "traces");
  std::string summary = seed_header(c.io.seed) + "id,label,status,anchor_index,steps,final_objective,linf,error\n";
  int failed = 0;
  for (const auto& r : results) {
    if (!r.ok) {
      ++failed;
      warn("image " + r.id + " failed: " + r.error);
      summary += r.id + "," + std::to_string(r.label) + ",failed,,,,," + csv_quote(r.error) + "\n";
      continue;
    }
    write_trace_dir(run / "traces" / r.id, r.id, *r.trace, c.io.seed);
    summary += r.id + "," + std::to_string(r.label) + ",ok," + std::to_string(r.trace->anchor_index) + "," +
               std::to_string(r.trace->per_step.size()) + "," + format_number(r.trace->final_loss.objective) + "," +
               format_number(linf_distance(r.trace->adv_image, r.trace->clean_image)) + ",\n";
  }
  write_file((run / "summary.csv").string(), summary);

  Json meta;
  meta["command"] = "attack";
  meta["seed"] = c.io.seed;
  meta["attack"] = config_to_json(base);
  meta["encoder"] = encoder_summary(info);
  meta["bank"] = bank_summary(bank);
  meta["images"] = results.size();
  meta["failed"] = failed;
  write_file((run / "run.json").string(), json_text(meta));
  return 0;
}

// Successful rows of a run, with their traces.
struct RunData {
  Json meta;
  std::vector<TraceRecord> traces;
  std::vector<int> labels;
};

RunData read_run(const std::string& dir) {
  require(!dir.empty(), ErrorCode::InvalidConfig, "this command needs --input <run directory>");
  const fs::path run(dir);
  require(fs::exists(run / "summary.csv") && fs::exists(run / "run.json"), ErrorCode::Io,
          "not a complete run directory: " + dir);
  RunData data;
  data.meta = read_json((run / "run.json").string());
  const CsvTable summary = read_csv((run / "summary.csv").string());
  const size_t cid = summary.column("id"), clabel = summary.column("label"), cstatus = summary.column("status");
  for (const auto& row : summary.rows) {
    require(row.size() == summary.header.size(), ErrorCode::Io, "ragged row in summary.csv");
    if (row[cstatus] != "ok") continue;
    data.traces.push_back(read_trace_dir(run / "traces" / row[cid]));
    data.labels.push_back(static_cast<int>(parse_number(row[clabel])));
  }
  return data;
}

SurrogateTask make_task(const RunConfig& c, const Encoder<double>& encoder, const std::vector<ImageTensor<double>>& clean) {
  if (c.eval.task == TaskKind::Retrieval) return retrieval_task(encoder, clean, c.eval.features);
  require(!c.eval.probe_dir.empty(), ErrorCode::InvalidConfig, "classification needs --probe-dir");
  const LoadedSet probe = load_dir(c.eval.probe_dir, true);
  return train_probe(encoder, probe.items, c.seed_for("probe"), c.eval.features);
}

int cmd_evaluate(const RunConfig& c) {
  const RunData run = read_run(c.io.input_dir);
  require(!run.traces.empty(), ErrorCode::Precondition, "run has no successful traces to evaluate");
  if (c.eval.task == TaskKind::Classification)
    for (size_t i = 0; i < run.labels.size(); ++i)
      require(run.labels[i] >= 0, ErrorCode::Io, "classification needs a label for " + run.traces[i].id);
  const auto encoder = make_encoder(c);
  std::vector<ImageTensor<double>> clean, adv;
  for (const auto& t : run.traces) {
    clean.push_back(t.clean);
    adv.push_back(c.eval.clean_only ? t.clean : t.adv);
  }
  const SurrogateTask task = make_task(c, *encoder, clean);
  const SrrReport rep = srr(score_images(*encoder, task, clean, run.labels), score_images(*encoder, task, adv, run.labels));

  const fs::path out = c.io.output_dir.empty() ? fs::path(c.io.input_dir) : fs::path(c.io.output_dir);
  fs::create_directories(out);
  Json report;
  report["task"] = to_string(c.eval.task);
  report["features"] = to_string(c.eval.features);
  report["clean_only"] = c.eval.clean_only;
  report["images"] = run.traces.size();
  report["score_clean"] = rep.score_clean;
  report["score_adv"] = rep.score_adv;
  report["srr"] = rep.srr;
  report["seed"] = c.io.seed;
  write_file((out / "report.json").string(), json_text(report));

  if (!c.eval.grid.empty()) {
    require(!c.io.bank.empty(), ErrorCode::InvalidConfig, "a grid evaluation needs --bank");
    const PrototypeBank bank = decode_bank(read_file(c.io.bank));
    AttackConfig base = config_from_json(run.meta.at("attack"));
    base.record_deviation = false;
    std::vector<LabeledImage> eval_set;
    for (size_t i = 0; i < run.traces.size(); ++i) eval_set.push_back({run.traces[i].id, run.labels[i], clean[i]});
    const auto rows = ablation_suite(*encoder, bank, eval_set, task, expand_grid(base, c.eval.grid), c.io.jobs);
    write_file((out / "ablation.csv").string(), ablation_csv(rows, c.io.seed));
  }
  return 0;
}

std::string matrix_csv(const DenseTensor& t, std::uint64_t seed) {
  require(t.shape.size() == 2, ErrorCode::Io, "deviation record must be a matrix");
  std::string out = seed_header(seed) + "step";
  for (std::uint64_t j = 0; j < t.shape[1]; ++j) out += ",token_" + std::to_string(j);
  out += "\n";
  for (std::uint64_t s = 0; s < t.shape[0]; ++s) {
    out += std::to_string(s);
    for (std::uint64_t j = 0; j < t.shape[1]; ++j) out += "," + format_number(t.values[s * t.shape[1] + j]);
    out += "\n";
  }
  return out;
}

int cmd_diagnose(const RunConfig& c) {
  const RunData run = read_run(c.io.input_dir);
  const fs::path out = c.io.output_dir.empty() ? fs::path(c.io.input_dir) / "diagnostics" : fs::path(c.io.output_dir);
  fs::create_directories(out);

  // Attention shift between the stage-1 and stage-2 weights.
  std::string shift = seed_header(c.io.seed) + "id,spearman,l1,top_k_overlap,k\n";
  for (const auto& t : run.traces) {
    if (t.weights_per_stage.size() < 2) {
      warn("trace " + t.id + " has a single stage; no attention shift");
      continue;
    }
    const auto& a = t.weights_per_stage[0];
    const int k = std::max<int>(1, static_cast<int>(a.size()) / 4);
    const AttentionShift s = attention_shift(a, t.weights_per_stage[1], k);
    shift += t.id + "," + format_number(s.spearman) + "," + format_number(s.l1) + "," +
             format_number(s.top_k_overlap) + "," + std::to_string(s.k) + "\n";
  }
  write_file((out / "attention_shift.csv").string(), shift);

  // Deviation matrices, [steps, N] each.
  bool any_deviation = false;
  for (const auto& t : run.traces) {
    if (!t.token_deviation || !t.attention_deviation) {
      warn("trace " + t.id + " has no deviation records; heatmap export skipped");
      continue;
    }
    any_deviation = true;
    fs::create_directories(out / "token_deviation");
    fs::create_directories(out / "attention_deviation");
    write_file((out / "token_deviation" / (t.id + ".csv")).string(), matrix_csv(*t.token_deviation, c.io.seed));
    write_file((out / "attention_deviation" / (t.id + ".csv")).string(), matrix_csv(*t.attention_deviation, c.io.seed));
  }
  if (!any_deviation && !run.traces.empty()) warn("no deviation matrices exported");

  // Token-masking curves on the clean images.
  if (run.traces.empty()) {
    warn("run has no successful traces; mask curve skipped");
    return 0;
  }
  if (c.eval.task == TaskKind::Classification && c.eval.probe_dir.empty()) {
    warn("no --probe-dir for the classification task; mask curve skipped");
    return 0;
  }
  const auto encoder = make_encoder(c);
  std::vector<ImageTensor<double>> clean;
  for (const auto& t : run.traces) clean.push_back(t.clean);
  const SurrogateTask task = make_task(c, *encoder, clean);
  const AttackConfig attack = config_from_json(run.meta.at("attack"));
  std::string curve = seed_header(c.io.seed) + "strategy,proportion,score,ratio\n";
  for (const auto& [name, strategy] : {std::pair{"random", MaskStrategy::Random},
                                       std::pair{"attention_keep_high", MaskStrategy::AttentionKeepHigh}}) {
    for (const auto& p : token_mask_experiment(*encoder, task, clean, run.labels, c.eval.proportions, strategy,
                                               c.seed_for("mask"), attack.layer))
      curve += std::string(name) + "," + format_number(p.proportion) + "," + format_number(p.score) + "," +
               format_number(p.ratio) + "\n";
  }
  write_file((out / "mask_curve.csv").string(), curve);
  return 0;
}

int cmd_serve_loopback(const RunConfig& c, int port, bool use_stdio) {
  const MicroEncoder<double> encoder(c.encoder_config());
  if (use_stdio) {
    auto io = wire::stdio_stream();
    wire::serve_stream(encoder, *io);
    return 0;
  }
  wire::TcpBridgeServer<double> server(encoder, port);
  std::cout << "listening on 127.0.0.1:" << server.port() << std::endl;
  server.wait();
  return 0;
}

int exit_code_for(ErrorCode code) { return code == ErrorCode::InvalidConfig ? 1 : 2; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prototype-anchored attention-weighted attacks on vision encoders"};
  app.require_subcommand(1);

  struct Command {
    CLI::App* app;
    CommandOptions opts;
  };
  std::vector<std::unique_ptr<Command>> commands;
  auto add = [&](const std::string& name, const std::string& desc) {
    auto cmd = std::make_unique<Command>();
    cmd->app = app.add_subcommand(name, desc);
    add_config_flags(cmd->app, cmd->opts);
    commands.push_back(std::move(cmd));
    return commands.back().get();
  };

  FixtureOptions fixture;
  Command* make_fixture = add("make-fixture", "write the synthetic guide/eval/probe image sets");
  make_fixture->app->add_option("--guide-count", fixture.guide, "guidance images");
  make_fixture->app->add_option("--eval-count", fixture.eval, "evaluation images");
  make_fixture->app->add_option("--probe-count", fixture.probe, "probe training images");
  make_fixture->app->add_option("--classes", fixture.classes, "shape classes (1..6)");
  Command* build = add("build-prototypes", "encode guidance images and cluster them into a prototype bank");
  Command* attack = add("attack", "attack every image of --input and write a run directory to --out");
  Command* evaluate = add("evaluate", "score the run directory --input and write report.json");
  Command* diagnose = add("diagnose", "export attention-shift, deviation and mask-curve data for --input");
  int port = 0;
  bool use_stdio = false;
  Command* serve = add("serve-loopback", "serve the micro-encoder over the wire protocol");
  serve->app->add_option("--port", port, "TCP port (0 picks a free one)");
  serve->app->add_flag("--stdio", use_stdio, "serve on stdin/stdout instead of TCP");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  for (const auto& cmd : commands) {
    if (!cmd->app->parsed()) continue;
    try {
      const RunConfig config = resolve_config(cmd->opts);
      if (cmd->opts.print_config) {
        std::cout << json_text(to_json(config));
        return 0;
      }
      if (cmd.get() == make_fixture) return cmd_make_fixture(config, fixture);
      if (cmd.get() == build) return cmd_build_prototypes(config);
      if (cmd.get() == attack) return cmd_attack(config);
      if (cmd.get() == evaluate) return cmd_evaluate(config);
      if (cmd.get() == diagnose) return cmd_diagnose(config);
      if (cmd.get() == serve) return cmd_serve_loopback(config, port, use_stdio);
    } catch (const Error& e) {
      std::cerr << "ERROR: " << e.what() << "\n";
      return exit_code_for(e.code());
    } catch (const std::exception& e) {
      std::cerr << "ERROR: internal: " << e.what() << "\n";
      return 2;
    }
  }
  return 1;
}
