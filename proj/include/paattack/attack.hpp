#pragma once

#include "paattack/core.hpp"
#include "paattack/encoder.hpp"
#include "paattack/objective.hpp"
#include "paattack/prototype_bank.hpp"
#include "paattack/random.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace paattack {

struct AttackConfig {
  double epsilon = 2.0 / 255.0;
  double alpha = 1.0 / 255.0;
  int s1 = 50;
  int s2 = 100;
  double lambda = 1.0;
  double temperature = 1.0 / 20.0;
  LayerSelector layer = LayerSelector::middle();
  std::optional<double> eta;  // random-start half-range; defaults to epsilon
  std::uint64_t seed = 0;
  GuidanceMode guidance_mode = GuidanceMode::FarthestPrototype;
  int stages = 2;
  bool use_guidance = true;   // false drops the guidance term (lambda -> 0)
  bool use_attention = true;  // false uses uniform token weights
  bool record_deviation = true;

  double effective_eta() const { return eta.value_or(epsilon); }
  double effective_lambda() const { return use_guidance ? lambda : 0.0; }
  int total_steps() const { return stages == 1 ? s1 + s2 : s1 + (stages - 1) * s2; }

  void validate() const {
    require(alpha > 0.0 && alpha <= epsilon && epsilon <= 1.0, ErrorCode::InvalidConfig,
            "need 0 < alpha <= epsilon <= 1");
    const double e = effective_eta();
    require(e >= 0.0 && e <= epsilon, ErrorCode::InvalidConfig, "eta must lie in [0, epsilon]");
    // S1 + S2 == 0 is accepted as the identity run.
    require(s1 >= 0 && s2 >= 0, ErrorCode::InvalidConfig, "need S1, S2 >= 0");
    require(temperature > 0.0, ErrorCode::InvalidConfig, "temperature must be positive");
    require(lambda >= 0.0, ErrorCode::InvalidConfig, "lambda must be nonnegative");
    require(stages >= 1, ErrorCode::InvalidConfig, "stages must be >= 1");
  }
};

template <typename T>
struct StepRecord {
  int step = 0;
  int stage = 0;  // 1-based
  LossBreakdown<T> loss;  // evaluated at the iterate before the update
  T linf = T(0);          // distance to clean after the update
};

template <typename T>
struct AttackTrace {
  ImageTensor<T> clean_image;
  ImageTensor<T> adv_image;
  std::vector<StepRecord<T>> per_step;
  std::vector<TokenWeights<T>> weights_per_stage;
  LossBreakdown<T> final_loss;  // at adv_image, under the last stage's weights
  int anchor_index = -1;
  AttackConfig config;
  std::optional<Matrix<T>> token_deviation;      // [steps, N]: 1 - cos(v_j, v'_j)
  std::optional<Matrix<T>> attention_deviation;  // [steps, N]: a(x')_j - a(x)_j at the weight layer
};

// Called with (global step index, image after the update) once per step.
template <typename T>
using StepObserver = std::function<void(int, const ImageTensor<T>&)>;

inline double sign_of(double g) { return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0); }

// Clip into the epsilon-ball around `clean` and into [0,1]. The result
// satisfies |x'-x| <= eps as evaluated in the working precision.
template <typename T>
void project_linf(ImageTensor<T>& adv, const ImageTensor<T>& clean, T eps) {
  for (size_t i = 0; i < adv.pixels.size(); ++i) {
    const T x = clean.pixels[i];
    T v = std::clamp(adv.pixels[i], x - eps, x + eps);
    v = std::clamp(v, T(0), T(1));
    while (std::abs(v - x) > eps) v = std::nextafter(v, x);
    adv.pixels[i] = v;
  }
}

template <typename T>
struct StageContext {
  const Encoder<T>& encoder;
  const ImageTensor<T>& clean;
  const TokenFeatures<T>& v_clean;
  const Matrix<T>& anchor;
  const TokenWeights<T>& weights;
  const AttackConfig& config;
  int stage = 1;
  int first_step = 0;
  // optional diagnostics
  const Vector<T>* clean_attention = nullptr;
  std::vector<Vector<T>>* token_deviation_rows = nullptr;
  std::vector<Vector<T>>* attention_deviation_rows = nullptr;
  const StepObserver<T>* observer = nullptr;
};

// Runs `steps` sign-gradient ascent steps from `start`.
template <typename T>
ImageTensor<T> pgd_stage(const StageContext<T>& ctx, const ImageTensor<T>& start, int steps,
                         std::vector<StepRecord<T>>& records) {
  const T eps = static_cast<T>(ctx.config.epsilon);
  const T alpha = static_cast<T>(ctx.config.alpha);
  require(start.same_shape(ctx.clean), ErrorCode::ShapeMismatch, "start image shape differs from clean image");
  require(linf_distance(start, ctx.clean) <= eps, ErrorCode::Precondition, "start image outside the epsilon ball");
  const double lambda = ctx.config.effective_lambda();
  ImageTensor<T> x = start;
  for (int i = 0; i < steps; ++i) {
    const Encoded<T> enc = ctx.encoder.encode(x);
    StepRecord<T> rec;
    rec.step = ctx.first_step + i;
    rec.stage = ctx.stage;
    rec.loss = objective(ctx.v_clean, enc.features, ctx.anchor, ctx.weights, lambda);
    if (ctx.token_deviation_rows) {
      Vector<T> dev(enc.features.num_tokens());
      for (int j = 0; j < dev.size(); ++j)
        dev(j) = T(1) - cosine(ctx.v_clean.patch_tokens.row(j), enc.features.patch_tokens.row(j));
      ctx.token_deviation_rows->push_back(std::move(dev));
    }
    if (ctx.attention_deviation_rows && ctx.clean_attention)
      ctx.attention_deviation_rows->push_back(layer_attention(enc.attention, ctx.config.layer) - *ctx.clean_attention);

    const auto cot = objective_cotangent(ctx.v_clean, enc.features, ctx.anchor, ctx.weights, lambda);
    const std::vector<T> grad = ctx.encoder.vjp(x, cot.patch, cot.class_token);
    for (size_t p = 0; p < x.pixels.size(); ++p)
      x.pixels[p] += alpha * static_cast<T>(sign_of(static_cast<double>(grad[p])));
    project_linf(x, ctx.clean, eps);
    rec.linf = linf_distance(x, ctx.clean);
    if (!(rec.linf <= eps)) throw Error(ErrorCode::Precondition, "internal: epsilon budget violated");
    records.push_back(std::move(rec));
    if (ctx.observer && *ctx.observer) (*ctx.observer)(ctx.first_step + i, x);
  }
  return x;
}

// Random start, anchor selection on clean features, then stage 1 with clean
// attention weights followed by (stages - 1) refreshed stages of S2 steps.
// With stages == 1 all S1 + S2 steps run on the clean weights.
template <typename T>
AttackTrace<T> pa_attack(const Encoder<T>& encoder, const ImageTensor<T>& clean, const PrototypeBank& bank,
                         const AttackConfig& config, const StepObserver<T>& observer = {}) {
  config.validate();
  require(clean.valid(), ErrorCode::Precondition, "clean image must be finite and within [0,1]");
  const EncoderInfo info = encoder.info();
  check_image_shape(info, clean.channels, clean.height, clean.width);
  require(bank.num_tokens() == info.num_tokens && bank.dim() == info.dim, ErrorCode::IncompatibleBank,
          "bank grid [" + std::to_string(bank.num_tokens()) + "," + std::to_string(bank.dim()) +
              "] does not match encoder [" + std::to_string(info.num_tokens) + "," + std::to_string(info.dim) + "]");

  AttackTrace<T> trace;
  trace.config = config;
  trace.clean_image = clean;
  const T eps = static_cast<T>(config.epsilon);

  ImageTensor<T> x = clean;
  const double eta = config.effective_eta();
  if (eta > 0.0) {
    Rng rng(derive_seed(config.seed, "random-start"));
    for (auto& p : x.pixels) p += static_cast<T>(rng.uniform(-eta, eta));
  }
  project_linf(x, clean, eps);

  const Encoded<T> clean_enc = encoder.encode(clean);
  const AnchorChoice choice = select_anchor(bank, clean_enc.features.patch_tokens.template cast<double>(),
                                            config.guidance_mode);
  trace.anchor_index = choice.index;
  const Matrix<T> anchor = choice.anchor.template cast<T>();

  auto weights_for = [&](const AttentionProfile<T>& profile) {
    return config.use_attention ? attention_weights(profile, config.layer, config.temperature)
                                : TokenWeights<T>::uniform(info.num_tokens);
  };

  const Vector<T> clean_attention = layer_attention(clean_enc.attention, config.layer);
  std::vector<Vector<T>> token_dev, attn_dev;

  auto run_stage = [&](int stage, int steps, const TokenWeights<T>& weights) {
    StageContext<T> ctx{encoder, clean, clean_enc.features, anchor, weights, config, stage,
                        static_cast<int>(trace.per_step.size())};
    if (config.record_deviation) {
      ctx.clean_attention = &clean_attention;
      ctx.token_deviation_rows = &token_dev;
      ctx.attention_deviation_rows = &attn_dev;
    }
    ctx.observer = &observer;
    x = pgd_stage(ctx, x, steps, trace.per_step);
  };

  trace.weights_per_stage.push_back(weights_for(clean_enc.attention));
  if (config.stages == 1) {
    run_stage(1, config.s1 + config.s2, trace.weights_per_stage.back());
  } else {
    run_stage(1, config.s1, trace.weights_per_stage.back());
    for (int stage = 2; stage <= config.stages; ++stage) {
      trace.weights_per_stage.push_back(weights_for(encoder.encode(x).attention));
      run_stage(stage, config.s2, trace.weights_per_stage.back());
    }
  }

  trace.final_loss = objective(clean_enc.features, encoder.encode(x).features, anchor, trace.weights_per_stage.back(),
                               config.effective_lambda());
  trace.adv_image = std::move(x);
  if (config.record_deviation) {
    auto stack = [&](const std::vector<Vector<T>>& rows) {
      Matrix<T> m(static_cast<Eigen::Index>(rows.size()), info.num_tokens);
      for (size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
      return m;
    };
    trace.token_deviation = stack(token_dev);
    trace.attention_deviation = stack(attn_dev);
  }
  return trace;
}

}  // namespace paattack
