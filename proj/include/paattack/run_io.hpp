#pragma once

#include "paattack/attack.hpp"
#include "paattack/binary_io.hpp"
#include "paattack/core.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

// Run-directory layout written by `attack` and read by `evaluate`/`diagnose`:
//
//   <run>/run.json                 command-level record (seed, config, counts)
//   <run>/summary.csv              one row per input image
//   <run>/traces/<id>/clean.tensor PATN [C,H,W]
//   <run>/traces/<id>/adv.tensor   PATN [C,H,W]
//   <run>/traces/<id>/losses.csv   step,stage,vision_term,guide_term,objective,linf
//   <run>/traces/<id>/weights.csv  stage,token,weight
//   <run>/traces/<id>/token_deviation.tensor      PATN [steps,N] (optional)
//   <run>/traces/<id>/attention_deviation.tensor  PATN [steps,N] (optional)
//   <run>/traces/<id>/trace.json   id, anchor, final loss, attack config (with
//                                  the per-image seed)
//
// Every CSV starts with a "# seed=<top-level seed>" line.
namespace paattack {

namespace fs = std::filesystem;
using Json = nlohmann::json;

// Shortest decimal form that round-trips the double exactly.
inline std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_number(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  require(res.ec == std::errc() && res.ptr == s.data() + s.size(), ErrorCode::Io, "bad number in CSV: '" + s + "'");
  return v;
}

inline std::string seed_header(std::uint64_t seed) { return "# seed=" + std::to_string(seed) + "\n"; }

// Minimal CSV reader for the files written here: skips '#' lines, returns
// the header and rows. Quoted fields may contain commas.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  size_t column(const std::string& name) const {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw Error(ErrorCode::Io, "CSV has no column " + name);
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') quoted = !quoted;
    else if (c == ',' && !quoted) {
      out.push_back(cur);
      cur.clear();
    } else cur += c;
  }
  out.push_back(cur);
  return out;
}

inline CsvTable read_csv(const std::string& path) {
  std::istringstream in(read_file(path));
  CsvTable t;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (t.header.empty()) t.header = split_csv_line(line);
    else t.rows.push_back(split_csv_line(line));
  }
  require(!t.header.empty(), ErrorCode::Io, "CSV without header: " + path);
  return t;
}

inline std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) out += c == '"' ? '\'' : c;
  return out + "\"";
}

// Image files in a directory (*.tensor, *.png), sorted by file name.
inline std::vector<fs::path> list_images(const std::string& dir) {
  require(fs::is_directory(dir), ErrorCode::Io, "not a directory: " + dir);
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".tensor" || ext == ".png")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::string image_id(const fs::path& p) { return p.stem().string(); }

// labels.csv (columns id,label) next to the images; empty map if absent.
inline std::map<std::string, int> read_labels(const std::string& dir) {
  std::map<std::string, int> labels;
  const fs::path path = fs::path(dir) / "labels.csv";
  if (!fs::exists(path)) return labels;
  const CsvTable t = read_csv(path.string());
  const size_t id = t.column("id"), label = t.column("label");
  for (const auto& row : t.rows) {
    require(row.size() == t.header.size(), ErrorCode::Io, "ragged row in " + path.string());
    labels[row[id]] = static_cast<int>(parse_number(row[label]));
  }
  return labels;
}

inline void write_labels(const std::string& dir, const std::vector<std::pair<std::string, int>>& labels) {
  std::string out = "id,label\n";
  for (const auto& [id, label] : labels) out += id + "," + std::to_string(label) + "\n";
  write_file((fs::path(dir) / "labels.csv").string(), out);
}

inline Json config_to_json(const AttackConfig& c) {
  Json j;
  j["epsilon"] = c.epsilon;
  j["alpha"] = c.alpha;
  j["s1"] = c.s1;
  j["s2"] = c.s2;
  j["lambda"] = c.lambda;
  j["temperature"] = c.temperature;
  j["layer"] = c.layer.to_string();
  j["eta"] = c.effective_eta();
  j["seed"] = c.seed;
  j["guidance_mode"] = to_string(c.guidance_mode);
  j["stages"] = c.stages;
  j["use_guidance"] = c.use_guidance;
  j["use_attention"] = c.use_attention;
  j["record_deviation"] = c.record_deviation;
  return j;
}

inline AttackConfig config_from_json(const Json& j) {
  try {
    AttackConfig c;
    c.epsilon = j.at("epsilon").get<double>();
    c.alpha = j.at("alpha").get<double>();
    c.s1 = j.at("s1").get<int>();
    c.s2 = j.at("s2").get<int>();
    c.lambda = j.at("lambda").get<double>();
    c.temperature = j.at("temperature").get<double>();
    c.layer = LayerSelector::parse(j.at("layer").get<std::string>());
    c.eta = j.at("eta").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.guidance_mode = parse_guidance_mode(j.at("guidance_mode").get<std::string>());
    c.stages = j.at("stages").get<int>();
    c.use_guidance = j.at("use_guidance").get<bool>();
    c.use_attention = j.at("use_attention").get<bool>();
    c.record_deviation = j.at("record_deviation").get<bool>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Io, std::string("bad attack config record: ") + e.what());
  }
}

inline std::string json_text(const Json& j) { return j.dump(2) + "\n"; }

inline Json read_json(const std::string& path) {
  Json j = Json::parse(read_file(path), nullptr, false);
  require(!j.is_discarded(), ErrorCode::Io, "invalid JSON in " + path);
  return j;
}

template <typename T>
std::string losses_csv(const AttackTrace<T>& trace, std::uint64_t seed) {
  std::string out = seed_header(seed) + "step,stage,vision_term,guide_term,objective,linf\n";
  for (const auto& r : trace.per_step)
    out += std::to_string(r.step) + "," + std::to_string(r.stage) + "," +
           format_number(static_cast<double>(r.loss.vision_term)) + "," +
           format_number(static_cast<double>(r.loss.guide_term)) + "," +
           format_number(static_cast<double>(r.loss.objective)) + "," + format_number(static_cast<double>(r.linf)) +
           "\n";
  return out;
}

template <typename T>
std::string weights_csv(const AttackTrace<T>& trace, std::uint64_t seed) {
  std::string out = seed_header(seed) + "stage,token,weight\n";
  for (size_t s = 0; s < trace.weights_per_stage.size(); ++s) {
    const auto& w = trace.weights_per_stage[s].w;
    for (Eigen::Index j = 0; j < w.size(); ++j)
      out += std::to_string(s + 1) + "," + std::to_string(j) + "," + format_number(static_cast<double>(w(j))) + "\n";
  }
  return out;
}

template <typename T>
void write_trace_dir(const fs::path& dir, const std::string& id, const AttackTrace<T>& trace, std::uint64_t seed) {
  fs::create_directories(dir);
  save_image((dir / "clean.tensor").string(), trace.clean_image);
  save_image((dir / "adv.tensor").string(), trace.adv_image);
  write_file((dir / "losses.csv").string(), losses_csv(trace, seed));
  write_file((dir / "weights.csv").string(), weights_csv(trace, seed));
  const std::uint32_t width = sizeof(T) == 4 ? 4 : 8;
  if (trace.token_deviation)
    write_file((dir / "token_deviation.tensor").string(), encode_tensor(to_dense(*trace.token_deviation), width));
  if (trace.attention_deviation)
    write_file((dir / "attention_deviation.tensor").string(),
               encode_tensor(to_dense(*trace.attention_deviation), width));
  Json j;
  j["id"] = id;
  j["anchor_index"] = trace.anchor_index;
  j["steps"] = trace.per_step.size();
  j["stages_recorded"] = trace.weights_per_stage.size();
  j["final_vision_term"] = static_cast<double>(trace.final_loss.vision_term);
  j["final_guide_term"] = static_cast<double>(trace.final_loss.guide_term);
  j["final_objective"] = static_cast<double>(trace.final_loss.objective);
  j["attack"] = config_to_json(trace.config);
  write_file((dir / "trace.json").string(), json_text(j));
}

// What evaluate/diagnose need back from a trace directory.
struct TraceRecord {
  std::string id;
  ImageTensor<double> clean;
  ImageTensor<double> adv;
  AttackConfig config;
  int anchor_index = -1;
  double final_objective = 0.0;
  CsvTable losses;
  std::vector<std::vector<double>> weights_per_stage;
  std::optional<DenseTensor> token_deviation;
  std::optional<DenseTensor> attention_deviation;
};

inline TraceRecord read_trace_dir(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorCode::Io, "missing trace directory " + dir.string());
  TraceRecord r;
  const Json meta = read_json((dir / "trace.json").string());
  try {
    r.id = meta.at("id").get<std::string>();
    r.anchor_index = meta.at("anchor_index").get<int>();
    r.final_objective = meta.at("final_objective").get<double>();
    r.config = config_from_json(meta.at("attack"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Io, "bad trace.json in " + dir.string() + ": " + e.what());
  }
  r.clean = load_image<double>((dir / "clean.tensor").string());
  r.adv = load_image<double>((dir / "adv.tensor").string());
  r.losses = read_csv((dir / "losses.csv").string());
  const CsvTable w = read_csv((dir / "weights.csv").string());
  const size_t cs = w.column("stage"), cw = w.column("weight");
  for (const auto& row : w.rows) {
    const auto stage = static_cast<size_t>(parse_number(row[cs]));
    require(stage >= 1, ErrorCode::Io, "stage numbers start at 1");
    if (r.weights_per_stage.size() < stage) r.weights_per_stage.resize(stage);
    r.weights_per_stage[stage - 1].push_back(parse_number(row[cw]));
  }
  if (fs::exists(dir / "token_deviation.tensor"))
    r.token_deviation = decode_tensor(read_file((dir / "token_deviation.tensor").string()));
  if (fs::exists(dir / "attention_deviation.tensor"))
    r.attention_deviation = decode_tensor(read_file((dir / "attention_deviation.tensor").string()));
  return r;
}

}  // namespace paattack
