#include "gap/trainstage.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <numbers>

#include "gap/binio.hpp"

namespace gap {

namespace {
constexpr binio::Magic kCkptMagic{'G', 'A', 'P', 'C'};
constexpr uint64_t kTrainStream = 0x545241494EULL;

nlohmann::json shape_of(const Mat<float>& m) { return nlohmann::json::array({m.rows(), m.cols()}); }
}  // namespace

double cosine_lr(long step, long total, double lr_max, double lr_min) {
  if (total < 1 || step < 0 || step > total) throw Error(ErrorKind::RangeError, "cosine_lr step out of range");
  if (step == 0) return lr_max;
  if (step == total) return lr_min;
  const double progress = static_cast<double>(step) / static_cast<double>(total);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const bool has_opt = !ck.adam_m.empty();
  if (has_opt && (ck.adam_m.size() != ck.params.size() || ck.adam_v.size() != ck.params.size()))
    throw Error(ErrorKind::ShapeMismatch, "optimizer state does not match parameter list");

  nlohmann::json entries = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : ck.params) {
    entries.push_back({{"name", name}, {"shape", shape_of(t)}, {"offset", offset}});
    offset += static_cast<uint64_t>(t.size()) * 4;
  }
  const uint64_t param_bytes = offset;
  nlohmann::json opt = nullptr;
  if (has_opt) {
    nlohmann::json oentries = nlohmann::json::array();
    uint64_t ooff = 0;
    for (size_t i = 0; i < ck.params.size(); ++i) {
      const auto n = static_cast<uint64_t>(ck.params[i].second.size()) * 4;
      oentries.push_back({{"name", ck.params[i].first}, {"offset_m", ooff}, {"offset_v", ooff + n}});
      ooff += 2 * n;
    }
    opt = {{"algorithm", "adamw"}, {"step", ck.adam_step}, {"entries", oentries}, {"bytes", ooff}};
  }
  const nlohmann::json manifest = {
      {"metadata",
       {{"dit", ck.dit.to_json()},
        {"global_seed", ck.global_seed},
        {"step", ck.step},
        {"train_config", ck.train_config}}},
      {"entries", entries},
      {"param_bytes", param_bytes},
      {"optimizer", opt},
  };

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  binio::Writer w(os);
  w.magic(kCkptMagic);
  w.u32(ckptfile::kVersion);
  w.json(manifest);
  for (const auto& [name, t] : ck.params) w.f32_block(t);
  if (has_opt) {
    for (size_t i = 0; i < ck.params.size(); ++i) {
      w.f32_block(ck.adam_m[i]);
      w.f32_block(ck.adam_v[i]);
    }
  }
  os.flush();
  w.check();
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  binio::Reader r(is);
  r.expect_magic(kCkptMagic);
  if (r.u32() != ckptfile::kVersion) throw Error(ErrorKind::FormatError, "unsupported checkpoint version");
  const auto manifest = r.json();
  const auto meta = binio::field<nlohmann::json>(manifest, "metadata");

  Checkpoint ck;
  ck.dit = DitConfig::from_json(binio::field<nlohmann::json>(meta, "dit"));
  try {
    ck.dit.check();
  } catch (const Error& e) {
    throw Error(ErrorKind::FormatError, e.what());
  }
  ck.global_seed = binio::field<uint64_t>(meta, "global_seed");
  ck.step = binio::field<int64_t>(meta, "step");
  ck.train_config = binio::field<nlohmann::json>(meta, "train_config");

  const auto entries = binio::field<nlohmann::json>(manifest, "entries");
  uint64_t expected_offset = 0;
  for (const auto& e : entries) {
    const auto name = binio::field<std::string>(e, "name");
    const auto shape = binio::field<std::vector<int64_t>>(e, "shape");
    if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0 || shape[0] * shape[1] > (int64_t{1} << 31))
      throw Error(ErrorKind::FormatError, "bad shape for " + name);
    if (binio::field<uint64_t>(e, "offset") != expected_offset)
      throw Error(ErrorKind::FormatError, "non-contiguous offset for " + name);
    Mat<float> t(shape[0], shape[1]);
    r.f32_block(t);
    expected_offset += static_cast<uint64_t>(t.size()) * 4;
    ck.params.emplace_back(name, std::move(t));
  }
  if (binio::field<uint64_t>(manifest, "param_bytes") != expected_offset)
    throw Error(ErrorKind::FormatError, "parameter blob size mismatch");

  const auto opt = binio::field<nlohmann::json>(manifest, "optimizer");
  if (!opt.is_null()) {
    ck.adam_step = binio::field<int64_t>(opt, "step");
    for (const auto& [name, t] : ck.params) {
      Mat<float> m(t.rows(), t.cols()), v(t.rows(), t.cols());
      r.f32_block(m);
      r.f32_block(v);
      ck.adam_m.push_back(std::move(m));
      ck.adam_v.push_back(std::move(v));
    }
  }
  if (!r.at_eof()) throw Error(ErrorKind::FormatError, "trailing bytes in checkpoint");
  return ck;
}

// ---------------------------------------------------------------------------
// Training

const char* to_string(Stage s) { return s == Stage::Pretrain ? "pretrain" : "finetune"; }

Stage parse_stage(const std::string& s) {
  if (s == "pretrain") return Stage::Pretrain;
  if (s == "finetune") return Stage::Finetune;
  throw Error(ErrorKind::InvalidArgument, "unknown stage '" + s + "'");
}

TrainConfig TrainConfig::for_stage(Stage s) {
  TrainConfig c;
  c.stage = s;
  if (s == Stage::Finetune) {
    c.lr_max = 5.6e-4;
    c.lr_min = 0.0;
  }
  return c;
}

void TrainConfig::check() const {
  if (steps < 1) throw Error(ErrorKind::InvalidArgument, "steps must be >= 1");
  if (batch_size < 1) throw Error(ErrorKind::InvalidArgument, "batch_size must be >= 1");
  if (!(lr_max >= lr_min && lr_min >= 0)) throw Error(ErrorKind::InvalidArgument, "need lr_max >= lr_min >= 0");
  if (weight_decay < 0) throw Error(ErrorKind::InvalidArgument, "weight_decay must be >= 0");
  weights.check();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"stage", to_string(stage)},
          {"steps", steps},
          {"batch_size", batch_size},
          {"lr_max", lr_max},
          {"lr_min", lr_min},
          {"weight_decay", weight_decay},
          {"lambda_p", weights.patch},
          {"lambda_cls", weights.cls},
          {"lambda_reg", weights.reg},
          {"seed", seed},
          {"dataset", dataset.string()}};
}

void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  os << "step,loss,lr,loss_patch,loss_cls,loss_reg\n";
  char buf[256];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step, r.loss.total, r.lr, r.loss.patch,
                  r.loss.cls, r.loss.reg);
    os << buf;
  }
  if (!os) throw Error(ErrorKind::IoError, "write failed for " + path.string());
}

namespace {

struct Divergence {
  int step;
};

TrainResult run_training(const TrainConfig& cfg, const Dataset& data, Model<float>& model, int64_t base_step,
                         const StepCallback& on_step, std::optional<Divergence>& diverged) {
  AdamState<float> opt;
  std::vector<TraceRow> trace;
  trace.reserve(cfg.steps);

  auto slots = model.trainable();
  std::vector<Mat<float>*> params;
  for (auto& s : slots) params.push_back(s.second);

  Rng rng(derive_seed(cfg.seed, kTrainStream));
  std::uniform_int_distribution<size_t> pick(0, data.records.size() - 1);
  const float scale = 1.0f / static_cast<float>(cfg.batch_size);

  for (int step = 0; step < cfg.steps; ++step) {
    ModelGrads<float> grads = ModelGrads<float>::zeros_like(model);
    ComponentLosses acc;
    std::vector<int> batch;
    bool finite = true;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const size_t idx = pick(rng);
      batch.push_back(static_cast<int>(idx));
      const DatasetRecord& rec = data.records[idx];
      const auto t = static_cast<float>(sample_t(rng));
      const FlowSample<float> fs = make_flow_sample(rec.target, t, rng);
      ComponentLosses l;
      try {
        l = sample_loss(model, rec.prompt, fs, cfg.weights, &grads, scale);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::NonFinite) throw;
        finite = false;
        break;
      }
      acc.total += l.total / cfg.batch_size;
      acc.patch += l.patch / cfg.batch_size;
      acc.cls += l.cls / cfg.batch_size;
      acc.reg += l.reg / cfg.batch_size;
    }
    if (!finite || !std::isfinite(acc.total)) {
      diverged = Divergence{step + 1};
      break;
    }
    const double lr = cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min);
    auto gnamed = grads.named();
    std::vector<const Mat<float>*> gptrs;
    for (auto& g : gnamed) gptrs.push_back(g.second);
    optimizer_step(params, gptrs, opt, lr, cfg.weight_decay);

    TraceRow row{step + 1, lr, acc, std::move(batch)};
    trace.push_back(row);
    if (on_step) on_step(row);
  }
  const int64_t done = static_cast<int64_t>(trace.size());
  return {to_checkpoint(model, &opt, base_step + done, cfg.to_json()), std::move(trace)};
}

}  // namespace

namespace {

TrainResult train_impl(const TrainConfig& cfg, const Dataset& data, const DitConfig& dit_cfg,
                       const Checkpoint* init, const StepCallback& on_step, std::optional<Divergence>& diverged) {
  cfg.check();
  if (data.records.empty()) throw Error(ErrorKind::InvalidArgument, "empty dataset");
  if (cfg.stage == Stage::Finetune && !init)
    throw Error(ErrorKind::InvalidArgument, "finetune stage requires an initial checkpoint");
  int64_t base_step = 0;
  Model<float> model = [&] {
    if (init) {
      base_step = init->step;
      return model_from_checkpoint<float>(*init);
    }
    DitConfig c = dit_cfg;
    c.space = data.cfg;
    return Model<float>::init(c, data.teacher_seed, cfg.seed);
  }();
  if (!(model.cfg.space == data.cfg)) throw Error(ErrorKind::ShapeMismatch, "checkpoint space differs from dataset");
  if (model.global_seed != data.teacher_seed)
    throw Error(ErrorKind::InvalidArgument, "checkpoint global seed differs from dataset teacher seed");
  return run_training(cfg, data, model, base_step, on_step, diverged);
}

std::string divergence_message(const Divergence& d) {
  return "loss diverged at step " + std::to_string(d.step) + "; last good step " + std::to_string(d.step - 1);
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const Dataset& data, const DitConfig& dit_cfg, const Checkpoint* init,
                  const StepCallback& on_step) {
  std::optional<Divergence> diverged;
  TrainResult result = train_impl(cfg, data, dit_cfg, init, on_step, diverged);
  if (diverged) throw Error(ErrorKind::NonFinite, divergence_message(*diverged));
  return result;
}

TrainResult train(const TrainConfig& cfg, const DitConfig& dit_cfg, const StepCallback& on_step) {
  cfg.check();
  if (cfg.stage == Stage::Finetune && cfg.init_checkpoint.empty())
    throw Error(ErrorKind::InvalidArgument, "finetune stage requires an initial checkpoint");
  const Dataset data = read_dataset(cfg.dataset);
  std::optional<Checkpoint> init;
  if (!cfg.init_checkpoint.empty()) init = load_checkpoint(cfg.init_checkpoint);

  std::optional<Divergence> diverged;
  TrainResult result = train_impl(cfg, data, dit_cfg, init ? &*init : nullptr, on_step, diverged);
  if (!cfg.trace.empty()) write_trace_csv(cfg.trace, result.trace);
  if (!cfg.checkpoint.empty()) save_checkpoint(cfg.checkpoint, result.checkpoint);
  if (diverged) {
    throw Error(ErrorKind::NonFinite,
                divergence_message(*diverged) + (cfg.checkpoint.empty() ? "" : " saved to " + cfg.checkpoint.string()));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckFixture make_grad_check_fixture(const Dataset& ds, int n_samples, uint64_t seed) {
  if (n_samples < 1) throw Error(ErrorKind::InvalidArgument, "fixture needs at least one sample");
  Rng rng(derive_seed(seed, 0x4743ULL));
  GradCheckFixture fx;
  for (int i = 0; i < n_samples; ++i) {
    const auto& rec = ds.records[static_cast<size_t>(i) % ds.records.size()];
    const double t = 0.1 + 0.8 * sample_t(rng);
    fx.prompts.push_back(rec.prompt);
    fx.samples.push_back(make_flow_sample(rec.target.cast<double>(), t, rng));
  }
  return fx;
}

double fixture_loss(const Model<double>& m, const GradCheckFixture& fx, ModelGrads<double>* grads) {
  const double scale = 1.0 / static_cast<double>(fx.samples.size());
  double total = 0;
  for (size_t i = 0; i < fx.samples.size(); ++i)
    total += sample_loss(m, fx.prompts[i], fx.samples[i], fx.weights, grads, scale).total * scale;
  return total;
}

GradCheckReport grad_check(Model<double>& m, const GradCheckFixture& fx, int n_params, double step, uint64_t seed,
                           double abs_floor) {
  ModelGrads<double> grads = ModelGrads<double>::zeros_like(m);
  fixture_loss(m, fx, &grads);
  auto params = m.trainable();
  auto gnamed = grads.named();

  Rng rng(derive_seed(seed, 0x4743484BULL));
  std::uniform_int_distribution<size_t> pick_tensor(0, params.size() - 1);
  GradCheckReport report;
  for (int k = 0; k < n_params; ++k) {
    size_t ti = pick_tensor(rng);
    while (params[ti].second->size() == 0) ti = pick_tensor(rng);
    Mat<double>& p = *params[ti].second;
    const auto idx = std::uniform_int_distribution<Eigen::Index>(0, p.size() - 1)(rng);
    const double orig = p.data()[idx];
    p.data()[idx] = orig + step;
    const double up = fixture_loss(m, fx);
    p.data()[idx] = orig - step;
    const double down = fixture_loss(m, fx);
    p.data()[idx] = orig;

    GradCheckEntry e;
    e.name = params[ti].first;
    e.index = idx;
    e.analytic = gnamed[ti].second->data()[idx];
    e.numeric = (up - down) / (2 * step);
    const double denom = std::max({std::abs(e.analytic), std::abs(e.numeric), abs_floor});
    e.rel_error = std::abs(e.analytic - e.numeric) / denom;
    report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
    if (e.analytic != 0.0) ++report.nonzero_analytic;
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace gap
