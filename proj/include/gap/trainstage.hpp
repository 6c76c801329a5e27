#pragma once

// Two-stage training (pretrain on cluttered scenes, finetune on centered
// single objects), AdamW with cosine annealing, named-tensor checkpoints and
// a finite-difference gradient checker.

#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gap/alignerdit.hpp"
#include "gap/rectflow.hpp"
#include "gap/synthworld.hpp"

namespace gap {

// lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2
double cosine_lr(long step, long total, double lr_max, double lr_min);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<Mat<T>> m;
  std::vector<Mat<T>> v;
  int64_t step = 0;
};

// Decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
// params and grads are parallel lists; state is lazily sized on first use.
template <typename T>
void optimizer_step(const std::vector<Mat<T>*>& params, const std::vector<const Mat<T>*>& grads,
                    AdamState<T>& state, double lr, double weight_decay, const AdamWConfig& opt = {}) {
  if (params.size() != grads.size()) throw Error(ErrorKind::ShapeMismatch, "param/grad list sizes differ");
  if (lr < 0) throw Error(ErrorKind::InvalidArgument, "negative learning rate");
  if (state.m.empty()) {
    for (const Mat<T>* p : params) {
      state.m.push_back(Mat<T>::Zero(p->rows(), p->cols()));
      state.v.push_back(Mat<T>::Zero(p->rows(), p->cols()));
    }
  }
  if (state.m.size() != params.size()) throw Error(ErrorKind::ShapeMismatch, "optimizer state size differs");
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i]->rows() != grads[i]->rows() || params[i]->cols() != grads[i]->cols() ||
        state.m[i].rows() != params[i]->rows() || state.m[i].cols() != params[i]->cols())
      throw Error(ErrorKind::ShapeMismatch, "param/grad shape differs");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  const T b1 = T(opt.beta1), b2 = T(opt.beta2);
  for (size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = *grads[i];
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g.cwiseAbs2();
    auto& p = *params[i];
    const auto m_hat = m.array() / T(bc1);
    const auto v_hat = v.array() / T(bc2);
    p.array() -= T(lr) * (m_hat / (v_hat.sqrt() + T(opt.eps)) + T(weight_decay) * p.array());
  }
}

template <typename T>
struct ModelGrads;

// Frozen prompt encoder (with trainable soft tokens) plus the aligner DiT.
template <typename T>
struct Model {
  DitConfig cfg;
  uint64_t global_seed = kDefaultGlobalSeed;
  FrozenPromptEncoder<T> prompt;
  AlignerDit<T> dit;

  // Frozen encoder from global_seed; soft tokens and DiT from init_seed.
  static Model init(const DitConfig& cfg, uint64_t global_seed, uint64_t init_seed) {
    FrozenPromptEncoder<T> enc(cfg.space, global_seed);
    Rng soft_rng(derive_seed(init_seed, 0x534F4654ULL));
    enc.soft_tokens = random_normal<T>(cfg.space.s, cfg.space.d_cond, 1.0, soft_rng);
    return Model{cfg, global_seed, std::move(enc), AlignerDit<T>(cfg, derive_seed(init_seed, 1))};
  }

  // Every trainable tensor, soft tokens first.
  std::vector<std::pair<std::string, Mat<T>*>> trainable() {
    std::vector<std::pair<std::string, Mat<T>*>> out{{"prompt.soft_tokens", &prompt.soft_tokens}};
    for (auto& e : DitParams<T>::named(dit.params())) out.push_back(e);
    return out;
  }

  Mat<T> condition(const PromptTokens& p) const { return prompt.forward(p); }

  // Euler-integrates the learned velocity field from fresh noise.
  Embedding<T> generate(const Mat<T>& cond, int steps, Rng& rng) const {
    auto v = [&](const Embedding<T>& x, T t) { return dit.forward(x, t, cond); };
    return sample<T>(v, cfg.space, steps, rng);
  }

  template <typename U>
  Model<U> cast() const {
    return Model<U>{cfg, global_seed, prompt.template cast<U>(),
                    AlignerDit<U>(cfg, dit.params().template cast<U>())};
  }
};

template <typename T>
struct ModelGrads {
  Mat<T> soft_tokens;
  DitParams<T> dit;

  static ModelGrads zeros_like(const Model<T>& m) {
    return {Mat<T>::Zero(m.prompt.soft_tokens.rows(), m.prompt.soft_tokens.cols()), m.dit.params().zeros_like()};
  }

  std::vector<std::pair<std::string, Mat<T>*>> named() {
    std::vector<std::pair<std::string, Mat<T>*>> out{{"prompt.soft_tokens", &soft_tokens}};
    for (auto& e : DitParams<T>::named(dit)) out.push_back(e);
    return out;
  }
};

// Loss of one (prompt, flow sample) pair; with grads, also accumulates
// scale * dLoss/dtheta into them.
template <typename T>
ComponentLosses sample_loss(const Model<T>& m, const PromptTokens& p, const FlowSample<T>& fs, const LossWeights& w,
                            ModelGrads<T>* grads = nullptr, T scale = T(1)) {
  if (!grads) {
    const Mat<T> cond = m.prompt.forward(p);
    return flow_loss_components(m.dit.forward(fs.xt, fs.t, cond), fs, w);
  }
  PromptEncoderCache<T> pc;
  const Mat<T> cond = m.prompt.forward(p, &pc);
  DitCache<T> dc;
  const Embedding<T> pred = m.dit.forward(fs.xt, fs.t, cond, &dc);
  const ComponentLosses l = flow_loss_components(pred, fs, w);
  const Mat<T> dcond = m.dit.backward(dc, flow_loss_grad(pred, fs, w, scale), grads->dit);
  grads->soft_tokens += m.prompt.backward(pc, dcond);
  return l;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  DitConfig dit;
  uint64_t global_seed = kDefaultGlobalSeed;
  int64_t step = 0;
  nlohmann::json train_config = nlohmann::json::object();
  std::vector<std::pair<std::string, Mat<float>>> params;
  // Optional AdamW state, parallel to params.
  std::vector<Mat<float>> adam_m;
  std::vector<Mat<float>> adam_v;
  int64_t adam_step = 0;
};

namespace ckptfile {
inline constexpr uint32_t kVersion = 1;
}

// GAPC container: magic, u32 version, length-prefixed JSON manifest
// {metadata, entries[{name, shape, offset}], optimizer}, then the parameter
// blob and the optimizer blob as contiguous little-endian f32.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename T>
Checkpoint to_checkpoint(Model<T>& m, const AdamState<T>* opt = nullptr, int64_t step = 0,
                         nlohmann::json train_config = nlohmann::json::object()) {
  Checkpoint ck{m.cfg, m.global_seed, step, std::move(train_config), {}, {}, {}, 0};
  for (auto& [name, t] : m.trainable()) ck.params.emplace_back(name, t->template cast<float>());
  if (opt && !opt->m.empty()) {
    for (const auto& x : opt->m) ck.adam_m.push_back(x.template cast<float>());
    for (const auto& x : opt->v) ck.adam_v.push_back(x.template cast<float>());
    ck.adam_step = opt->step;
  }
  return ck;
}

// Rebuilds the model; every trainable tensor must be present exactly once.
template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& ck) {
  Model<T> m = Model<T>::init(ck.dit, ck.global_seed, 0);
  auto slots = m.trainable();
  if (slots.size() != ck.params.size())
    throw Error(ErrorKind::FormatError, "checkpoint tensor count differs from model");
  for (auto& [name, dst] : slots) {
    int found = 0;
    for (const auto& [cname, src] : ck.params) {
      if (cname != name) continue;
      if (src.rows() != dst->rows() || src.cols() != dst->cols())
        throw Error(ErrorKind::FormatError, "checkpoint shape mismatch for " + name);
      *dst = src.template cast<T>();
      ++found;
    }
    if (found != 1) throw Error(ErrorKind::FormatError, "checkpoint entry missing or duplicated: " + name);
  }
  return m;
}

template <typename T>
AdamState<T> optimizer_from_checkpoint(const Checkpoint& ck) {
  AdamState<T> s;
  for (const auto& x : ck.adam_m) s.m.push_back(x.template cast<T>());
  for (const auto& x : ck.adam_v) s.v.push_back(x.template cast<T>());
  s.step = ck.adam_step;
  return s;
}

// ---------------------------------------------------------------------------
// Training

enum class Stage { Pretrain, Finetune };
const char* to_string(Stage s);
Stage parse_stage(const std::string& s);

struct TrainConfig {
  Stage stage = Stage::Pretrain;
  int steps = 2000;
  int batch_size = 8;
  double lr_max = 2.8e-4;
  double lr_min = 1e-5;
  double weight_decay = 0.01;
  LossWeights weights;
  uint64_t seed = 0;
  std::filesystem::path dataset;
  std::filesystem::path checkpoint;       // output
  std::filesystem::path init_checkpoint;  // mandatory for finetune
  std::filesystem::path trace;            // CSV, optional
  int log_every = 100;

  // Schedule endpoints for a stage: pretrain 2.8e-4 -> 1e-5, finetune 5.6e-4 -> 0.
  static TrainConfig for_stage(Stage s);
  void check() const;
  nlohmann::json to_json() const;
};

struct TraceRow {
  int step = 0;  // 1-based
  double lr = 0;
  ComponentLosses loss;
  std::vector<int> batch;  // dataset record indices drawn for this step
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TraceRow> trace;
};

using StepCallback = std::function<void(const TraceRow&)>;

// In-memory training. Pretrain starts from a fresh model (DitConfig from
// dit_cfg, space from the dataset); finetune continues from `init` with a
// fresh optimizer state. Deterministic for a fixed seed.
TrainResult train(const TrainConfig& cfg, const Dataset& data, const DitConfig& dit_cfg,
                  const Checkpoint* init = nullptr, const StepCallback& on_step = {});

// File-driven wrapper: reads cfg.dataset (and cfg.init_checkpoint), writes
// cfg.checkpoint and cfg.trace. On divergence the last good parameters are
// saved and NonFinite is thrown.
TrainResult train(const TrainConfig& cfg, const DitConfig& dit_cfg = {}, const StepCallback& on_step = {});

void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace);

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckFixture {
  std::vector<PromptTokens> prompts;
  std::vector<FlowSample<double>> samples;
  LossWeights weights;
};

// Small batch drawn from ds with fixed t and noise.
GradCheckFixture make_grad_check_fixture(const Dataset& ds, int n_samples, uint64_t seed);

struct GradCheckEntry {
  std::string name;
  Eigen::Index index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0;
  int nonzero_analytic = 0;
};

// Mean fixture loss and, optionally, its gradient.
double fixture_loss(const Model<double>& m, const GradCheckFixture& fx, ModelGrads<double>* grads = nullptr);

// Compares analytic gradients with central differences for n_params randomly
// chosen scalar parameters. rel = |a - n| / max(|a|, |n|, abs_floor).
GradCheckReport grad_check(Model<double>& m, const GradCheckFixture& fx, int n_params, double step = 1e-5,
                           uint64_t seed = 0, double abs_floor = 1e-8);

}  // namespace gap
