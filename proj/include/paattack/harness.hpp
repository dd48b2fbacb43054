#pragma once

#include "paattack/attack.hpp"
#include "paattack/core.hpp"
#include "paattack/encoder.hpp"
#include "paattack/metrics.hpp"
#include "paattack/parallel.hpp"
#include "paattack/probe.hpp"
#include "paattack/prototype_bank.hpp"
#include "paattack/synthetic.hpp"

#include <cstdint>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

namespace paattack {

enum class TaskKind { Classification, Retrieval };

inline std::string to_string(TaskKind k) { return k == TaskKind::Classification ? "classification" : "retrieval"; }

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "classification" || s == "classification-probe") return TaskKind::Classification;
  if (s == "retrieval") return TaskKind::Retrieval;
  throw Error(ErrorCode::InvalidConfig, "unknown task kind: " + s);
}

// Desk-scale downstream task scored on probe_features of the patch tokens.
// Classification: accuracy of a linear probe trained on clean features.
// Retrieval: fraction of queries whose nearest clean gallery entry (cosine)
// is their own clean image.
struct SurrogateTask {
  TaskKind kind = TaskKind::Classification;
  ProbeFeatures features = ProbeFeatures::MeanPooled;
  LinearProbe probe;
  std::vector<Vector<double>> gallery;
};

// Task probes are homogeneous (no centering, no bias): zeroing tokens then
// shrinks a mean-pooled feature without moving it off the training
// distribution by a constant shift, and argmax ignores the scale.
inline ProbeOptions task_probe_options() {
  ProbeOptions opt;
  opt.center = false;
  opt.fit_bias = false;
  return opt;
}

template <typename T>
SurrogateTask train_probe(const Encoder<T>& encoder, const std::vector<LabeledImage>& labeled, std::uint64_t seed,
                          ProbeFeatures features = ProbeFeatures::MeanPooled,
                          const ProbeOptions& opt = task_probe_options()) {
  std::vector<Vector<double>> feats;
  std::vector<int> labels;
  for (const auto& item : labeled) {
    feats.push_back(probe_features(encoder.encode(item.image.template cast<T>()).features.patch_tokens, features));
    labels.push_back(item.label);
  }
  SurrogateTask task;
  task.kind = TaskKind::Classification;
  task.features = features;
  task.probe = fit_linear_probe(feats, labels, seed, opt);
  return task;
}

template <typename T>
SurrogateTask retrieval_task(const Encoder<T>& encoder, const std::vector<ImageTensor<T>>& clean_gallery,
                             ProbeFeatures features = ProbeFeatures::MeanPooled) {
  SurrogateTask task;
  task.kind = TaskKind::Retrieval;
  task.features = features;
  for (const auto& img : clean_gallery)
    task.gallery.push_back(probe_features(encoder.encode(img).features.patch_tokens, features));
  return task;
}

// Whether image i is scored correct: probe label match, or own-index retrieval.
inline bool task_correct(const SurrogateTask& task, const Vector<double>& feats, int label, size_t index) {
  if (task.kind == TaskKind::Classification) return task.probe.predict(feats) == label;
  require(index < task.gallery.size(), ErrorCode::OutOfRange, "retrieval query index outside gallery");
  size_t best = 0;
  double best_sim = -2.0;
  const double qn = feats.norm();
  for (size_t g = 0; g < task.gallery.size(); ++g) {
    const double denom = qn * task.gallery[g].norm();
    const double s = denom > 0.0 ? feats.dot(task.gallery[g]) / denom : 0.0;
    if (s > best_sim) {
      best_sim = s;
      best = g;
    }
  }
  return best == index;
}

template <typename T>
double score_images(const Encoder<T>& encoder, const SurrogateTask& task, const std::vector<ImageTensor<T>>& images,
                    const std::vector<int>& labels) {
  require(images.size() == labels.size() && !images.empty(), ErrorCode::Precondition, "one label per image");
  size_t correct = 0;
  for (size_t i = 0; i < images.size(); ++i)
    if (task_correct(task, probe_features(encoder.encode(images[i]).features.patch_tokens, task.features), labels[i], i)) ++correct;
  return static_cast<double>(correct) / static_cast<double>(images.size());
}

// Rejects any adversarial image outside [0,1] or the epsilon ball.
template <typename T>
void validate_adversarial(const ImageTensor<T>& adv, const ImageTensor<T>& clean, double epsilon) {
  require(adv.same_shape(clean), ErrorCode::ShapeMismatch, "adversarial image shape differs from clean");
  require(adv.valid(), ErrorCode::Precondition, "adversarial image leaves the pixel range");
  require(linf_distance(adv, clean) <= static_cast<T>(epsilon), ErrorCode::Precondition,
          "adversarial image leaves the epsilon ball");
}

enum class MaskStrategy { Random, AttentionKeepHigh };

struct MaskPoint {
  double proportion = 0.0;
  double score = 0.0;
  double ratio = 1.0;  // score / unmasked score
};

// Zeroes round(rho * N) patch tokens per image before probe scoring. Random
// masking draws an independent permutation per image; attention-keep-high
// masks the lowest clean attention tokens (selected layer, head mean) first.
template <typename T>
std::vector<MaskPoint> token_mask_experiment(const Encoder<T>& encoder, const SurrogateTask& task,
                                             const std::vector<ImageTensor<T>>& images, const std::vector<int>& labels,
                                             const std::vector<double>& proportions, MaskStrategy strategy,
                                             std::uint64_t seed, const LayerSelector& layer = LayerSelector::middle()) {
  for (double p : proportions) require(p >= 0.0 && p <= 1.0, ErrorCode::Precondition, "proportions must lie in [0,1]");
  require(images.size() == labels.size() && !images.empty(), ErrorCode::Precondition, "one label per image");
  std::vector<Encoded<T>> encoded;
  for (const auto& img : images) encoded.push_back(encoder.encode(img));
  const int n = encoded.front().features.num_tokens();

  std::vector<std::vector<size_t>> mask_order(images.size());
  for (size_t i = 0; i < images.size(); ++i) {
    auto& order = mask_order[i];
    order.resize(n);
    std::iota(order.begin(), order.end(), 0);
    if (strategy == MaskStrategy::Random) {
      Rng rng(derive_seed(seed, "mask:" + std::to_string(i)));
      rng.shuffle(order.begin(), order.end());
    } else {
      const auto a = to_std_vector(layer_attention(encoded[i].attention, layer));
      std::stable_sort(order.begin(), order.end(), [&](size_t x, size_t y) { return a[x] < a[y]; });
    }
  }

  auto score_at = [&](double rho) {
    const auto count = static_cast<size_t>(std::lround(rho * n));
    size_t correct = 0;
    for (size_t i = 0; i < images.size(); ++i) {
      std::vector<bool> masked(n, false);
      for (size_t k = 0; k < count; ++k) masked[mask_order[i][k]] = true;
      if (task_correct(task, probe_features(encoded[i].features.patch_tokens, task.features, &masked), labels[i], i)) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(images.size());
  };

  const double base = score_at(0.0);
  std::vector<MaskPoint> curve;
  for (double rho : proportions) {
    const double s = score_at(rho);
    curve.push_back({rho, s, base > 0.0 ? s / base : 0.0});
  }
  return curve;
}

// One ablation cell: a full attack configuration plus its axis labels.
struct AblationCell {
  AttackConfig config;
  std::vector<std::pair<std::string, std::string>> axes;

  std::string label() const {
    std::string s;
    for (const auto& [k, v] : axes) s += (s.empty() ? "" : ";") + k + "=" + v;
    return s.empty() ? "base" : s;
  }
};

inline void apply_axis(AttackConfig& c, const std::string& axis, const std::string& value) {
  auto on_off = [&](const std::string& v) {
    if (v == "on" || v == "1" || v == "true") return true;
    if (v == "off" || v == "0" || v == "false") return false;
    throw Error(ErrorCode::InvalidConfig, "expected on/off for " + axis + ": " + v);
  };
  try {
    if (axis == "guidance") c.use_guidance = on_off(value);
    else if (axis == "attention") c.use_attention = on_off(value);
    else if (axis == "stages") c.stages = std::stoi(value);
    else if (axis == "lambda") c.lambda = std::stod(value);
    else if (axis == "temperature") c.temperature = std::stod(value);
    else if (axis == "inv_temperature") c.temperature = 1.0 / std::stod(value);
    else if (axis == "layer") c.layer = LayerSelector::parse(value);
    else if (axis == "mode" || axis == "guidance_mode") c.guidance_mode = parse_guidance_mode(value);
    else if (axis == "s1") c.s1 = std::stoi(value);
    else if (axis == "s2") c.s2 = std::stoi(value);
    else if (axis == "epsilon") c.epsilon = std::stod(value);
    else if (axis == "alpha") c.alpha = std::stod(value);
    else if (axis == "eta") c.eta = std::stod(value);
    else throw Error(ErrorCode::InvalidConfig, "unknown grid axis: " + axis);
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::InvalidConfig, "bad value for grid axis " + axis + ": " + value);
  }
}

// Grid syntax: "axis=v1,v2;axis2=v3" -> cartesian product, last axis fastest.
// An empty grid yields the single base cell.
inline std::vector<AblationCell> expand_grid(const AttackConfig& base, const std::string& grid) {
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  std::stringstream ss(grid);
  std::string part;
  while (std::getline(ss, part, ';')) {
    if (part.empty()) continue;
    const auto eq = part.find('=');
    require(eq != std::string::npos && eq > 0, ErrorCode::InvalidConfig, "grid axis needs name=values: " + part);
    std::vector<std::string> values;
    std::stringstream vs(part.substr(eq + 1));
    std::string v;
    while (std::getline(vs, v, ',')) values.push_back(v);
    require(!values.empty(), ErrorCode::InvalidConfig, "grid axis without values: " + part);
    axes.emplace_back(part.substr(0, eq), std::move(values));
  }
  std::vector<AblationCell> cells{AblationCell{base, {}}};
  for (const auto& [name, values] : axes) {
    std::vector<AblationCell> next;
    for (const auto& cell : cells)
      for (const auto& v : values) {
        AblationCell c = cell;
        apply_axis(c.config, name, v);
        c.axes.emplace_back(name, v);
        next.push_back(std::move(c));
      }
    cells = std::move(next);
  }
  for (const auto& c : cells) c.config.validate();
  return cells;
}

struct AblationRow {
  AblationCell cell;
  SrrReport report;
};

// Per-image attack seed: derived from the cell seed and the image id, so
// results do not depend on scheduling.
inline std::uint64_t image_attack_seed(std::uint64_t seed, const std::string& id) {
  return derive_seed(seed, "attack:" + id);
}

template <typename T>
std::vector<AblationRow> ablation_suite(const Encoder<T>& encoder, const PrototypeBank& bank,
                                        const std::vector<LabeledImage>& eval_set, const SurrogateTask& task,
                                        const std::vector<AblationCell>& cells, int jobs = 1) {
  std::vector<ImageTensor<T>> clean;
  std::vector<int> labels;
  for (const auto& item : eval_set) {
    clean.push_back(item.image.template cast<T>());
    labels.push_back(item.label);
  }
  const double score_clean = score_images(encoder, task, clean, labels);
  std::vector<AblationRow> rows;
  for (const auto& cell : cells) {
    std::vector<ImageTensor<T>> adv(clean.size());
    parallel_for(clean.size(), jobs, [&](size_t i) {
      AttackConfig cfg = cell.config;
      cfg.seed = image_attack_seed(cell.config.seed, eval_set[i].id);
      cfg.record_deviation = false;
      adv[i] = pa_attack(encoder, clean[i], bank, cfg).adv_image;
      validate_adversarial(adv[i], clean[i], cfg.epsilon);
    });
    rows.push_back({cell, srr(score_clean, score_images(encoder, task, adv, labels))});
  }
  return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows, std::uint64_t seed) {
  std::ostringstream out;
  out.precision(17);
  out << "# seed=" << seed << "\n";
  out << "cell,guidance,attention,stages,lambda,temperature,layer,mode,s1,s2,epsilon,score_clean,score_adv,srr\n";
  for (const auto& r : rows) {
    const auto& c = r.cell.config;
    out << '"' << r.cell.label() << "\"," << (c.use_guidance ? "on" : "off") << ','
        << (c.use_attention ? "on" : "off") << ',' << c.stages << ',' << c.lambda << ',' << c.temperature << ','
        << c.layer.to_string() << ',' << to_string(c.guidance_mode) << ',' << c.s1 << ',' << c.s2 << ','
        << c.epsilon << ',' << r.report.score_clean << ',' << r.report.score_adv << ',' << r.report.srr << "\n";
  }
  return out.str();
}

}  // namespace paattack
