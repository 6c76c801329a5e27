#include "gap/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gap/evalmetrics.hpp"
#include "gap/trainstage.hpp"
#include "gap/viewsel3d.hpp"

namespace gap::cli {

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

uint64_t default_seed() {
  if (const char* env = std::getenv("GAP_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw UsageError("GAP_SEED is not an unsigned integer");
    }
  }
  return 0;
}

// Expands a flat JSON config object into `--key value` tokens.
std::vector<std::string> config_tokens(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("bad config file: ") + e.what());
  }
  if (!j.is_object()) throw UsageError("config file must hold a flat JSON object");
  std::vector<std::string> out;
  for (const auto& [key, value] : j.items()) {
    if (key == "config") throw UsageError("config files cannot nest");
    const std::string flag = "--" + key;
    if (value.is_boolean()) {
      if (value.get<bool>()) out.push_back(flag);
    } else if (value.is_string()) {
      out.insert(out.end(), {flag, value.get<std::string>()});
    } else if (value.is_number()) {
      out.insert(out.end(), {flag, value.dump()});
    } else {
      throw UsageError("config value for '" + key + "' must be a scalar");
    }
  }
  return out;
}

// Config-file tokens go right after the command name, so explicit flags
// (parsed later, last value wins) override them.
std::vector<std::string> with_config(std::vector<std::string> args) {
  for (size_t i = 0; i < args.size(); ++i) {
    std::string path;
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + static_cast<long>(i), args.begin() + static_cast<long>(i) + 2);
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<long>(i));
    } else {
      continue;
    }
    const auto extra = config_tokens(path);
    const size_t at = args.empty() ? 0 : 1;
    args.insert(args.begin() + static_cast<long>(at), extra.begin(), extra.end());
    break;
  }
  return args;
}

void add_space_flags(CLI::App* cmd, SpaceConfig& s) {
  cmd->add_option("--grid-h", s.h, "Grid height")->check(CLI::PositiveNumber);
  cmd->add_option("--grid-w", s.w, "Grid width")->check(CLI::PositiveNumber);
  cmd->add_option("--d-img", s.d_img, "Target feature dimension")->check(CLI::PositiveNumber);
  cmd->add_option("--n-reg", s.n_reg, "Register tokens")->check(CLI::NonNegativeNumber);
  cmd->add_option("--soft-tokens", s.s, "Soft tokens")->check(CLI::PositiveNumber);
  cmd->add_option("--d-cond", s.d_cond, "Conditioning dimension")->check(CLI::PositiveNumber);
}

void write_report_csv(std::ostream& os, const AlignmentReport& r, const std::vector<std::pair<std::string, double>>& extra,
                      int count) {
  os << "metric,component,value,count\n";
  char buf[128];
  auto row = [&](const char* metric, const char* comp, double v, int n) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.10g,%d\n", metric, comp, v, n);
    os << buf;
  };
  for (auto [comp, m] : {std::pair{"patch", r.patch}, std::pair{"cls", r.cls}, std::pair{"reg", r.reg}}) {
    row("cosine", comp, m.cosine, r.count);
    row("mse", comp, m.mse, r.count);
    row("norm_ratio", comp, m.norm_ratio, r.count);
  }
  for (const auto& [metric, v] : extra) row(metric.c_str(), "pooled_patch", v, count);
}

Eigen::MatrixXd pooled_patches(const std::vector<TargetEmbedding>& batch) {
  return retrieval_vectors(batch, RetrievalMode::PooledPatch);
}

std::vector<int> read_ids(const std::string& path, size_t expected) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::IoError, "cannot open " + path);
  std::vector<int> ids;
  long v;
  while (is >> v) ids.push_back(static_cast<int>(v));
  if (!is.eof()) throw Error(ErrorKind::FormatError, "id mapping must hold one integer per line");
  if (ids.size() != expected) throw Error(ErrorKind::MissingGroundTruth, "id mapping size differs from query count");
  return ids;
}

}  // namespace

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  uint64_t seed_default = 0;
  try {
    args = with_config(raw_args);
    seed_default = default_seed();
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  CLI::App app{"Generative alignment of conditioning latents to a structured embedding space", "gap"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);

  // gen-data
  struct {
    int n = 0;
    uint64_t seed = 0;
    std::string flavor = "pretrain";
    std::string out;
    uint64_t teacher_seed = kDefaultGlobalSeed;
    SpaceConfig space;
  } gd;
  gd.seed = seed_default;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic scene dataset");
  gen->add_option("--n", gd.n, "Record count")->required()->check(CLI::PositiveNumber);
  gen->add_option("--seed", gd.seed, "Dataset seed");
  gen->add_option("--flavor", gd.flavor, "pretrain | finetune")->check(CLI::IsMember({"pretrain", "finetune"}));
  gen->add_option("--out", gd.out, "Output .gapd path")->required();
  gen->add_option("--teacher-seed", gd.teacher_seed, "Frozen encoder seed");
  add_space_flags(gen, gd.space);

  // train
  struct {
    std::string dataset, stage = "pretrain", init_ckpt, ckpt_out, trace_out;
    std::optional<int> steps, batch_size;
    std::optional<double> lr_max, lr_min, weight_decay, lambda_p, lambda_cls, lambda_reg;
    uint64_t seed = 0;
    int log_every = 100;
    DitConfig dit;
  } tr;
  tr.seed = seed_default;
  auto* trn = app.add_subcommand("train", "Train one curriculum stage");
  trn->add_option("--dataset", tr.dataset, "Dataset .gapd path")->required();
  trn->add_option("--stage", tr.stage, "pretrain | finetune")->check(CLI::IsMember({"pretrain", "finetune"}));
  trn->add_option("--init-ckpt", tr.init_ckpt, "Initial checkpoint (required for finetune)");
  trn->add_option("--ckpt-out", tr.ckpt_out, "Output checkpoint path")->required();
  trn->add_option("--trace-out", tr.trace_out, "Loss trace CSV (default: <ckpt-out>.csv)");
  trn->add_option("--steps", tr.steps)->check(CLI::PositiveNumber);
  trn->add_option("--batch-size", tr.batch_size)->check(CLI::PositiveNumber);
  trn->add_option("--lr-max", tr.lr_max)->check(CLI::NonNegativeNumber);
  trn->add_option("--lr-min", tr.lr_min)->check(CLI::NonNegativeNumber);
  trn->add_option("--weight-decay", tr.weight_decay)->check(CLI::NonNegativeNumber);
  trn->add_option("--lambda-p", tr.lambda_p)->check(CLI::NonNegativeNumber);
  trn->add_option("--lambda-cls", tr.lambda_cls)->check(CLI::NonNegativeNumber);
  trn->add_option("--lambda-reg", tr.lambda_reg)->check(CLI::NonNegativeNumber);
  trn->add_option("--seed", tr.seed, "Initialization and batching seed");
  trn->add_option("--log-every", tr.log_every)->check(CLI::PositiveNumber);
  trn->add_option("--d-model", tr.dit.d_model)->check(CLI::PositiveNumber);
  trn->add_option("--n-blocks", tr.dit.n_blocks)->check(CLI::PositiveNumber);
  trn->add_option("--n-heads", tr.dit.n_heads)->check(CLI::PositiveNumber);

  // sample
  struct {
    std::string ckpt, dataset, out, gt_out, flavor = "pretrain";
    int limit = 0, scenes = 0, steps = 50, threads = 1;
    uint64_t scene_seed = 0, rng_seed = 0;
    bool deterministic = false;
  } sm;
  sm.rng_seed = seed_default;
  sm.scene_seed = seed_default;
  auto* smp = app.add_subcommand("sample", "Generate embeddings for prompts and export them");
  smp->add_option("--ckpt", sm.ckpt, "Checkpoint path")->required();
  auto* src_ds = smp->add_option("--dataset", sm.dataset, "Take prompts from a dataset");
  auto* src_sc = smp->add_option("--scenes", sm.scenes, "Generate this many scenes")->check(CLI::PositiveNumber);
  src_ds->excludes(src_sc);
  smp->add_option("--scene-seed", sm.scene_seed, "Seed for --scenes");
  smp->add_option("--flavor", sm.flavor, "Scene flavor for --scenes")->check(CLI::IsMember({"pretrain", "finetune"}));
  smp->add_option("--limit", sm.limit, "Use at most this many dataset records")->check(CLI::PositiveNumber);
  smp->add_option("--steps", sm.steps, "Euler steps")->check(CLI::PositiveNumber);
  smp->add_option("--rng-seed", sm.rng_seed, "Sampling noise seed");
  smp->add_option("--out", sm.out, "Output .gape path")->required();
  smp->add_option("--gt-out", sm.gt_out, "Also write matching teacher embeddings");
  smp->add_option("--threads", sm.threads, "Worker threads")->check(CLI::PositiveNumber);
  smp->add_flag("--deterministic", sm.deterministic, "Force single-threaded sampling");

  // eval
  struct {
    std::string gen, gt, out;
    bool fd = false, kd = false;
  } ev;
  auto* evl = app.add_subcommand("eval", "Alignment metrics between generated and ground-truth embeddings");
  evl->add_option("--gen", ev.gen, "Generated .gape")->required();
  evl->add_option("--gt", ev.gt, "Ground-truth .gape")->required();
  evl->add_option("--out", ev.out, "Report CSV (default: stdout)");
  evl->add_flag("--fd", ev.fd, "Add Frechet distance over pooled patches");
  evl->add_flag("--kd", ev.kd, "Add kernel distance over pooled patches");

  // retrieve
  struct {
    std::string queries, database, ids, mode = "both", out;
    std::vector<int> ks{1, 5, 10};
  } rt;
  auto* ret = app.add_subcommand("retrieve", "Top-K recall of queries against a database");
  ret->add_option("--queries", rt.queries, "Query .gape")->required();
  ret->add_option("--database", rt.database, "Database .gape")->required();
  ret->add_option("--ids", rt.ids, "Ground-truth database index per query, one per line (default: identity)");
  ret->add_option("--mode", rt.mode, "cls | pooled_patch | both")
      ->check(CLI::IsMember({"cls", "pooled_patch", "both"}));
  ret->add_option("--k", rt.ks, "Cutoffs")->delimiter(',')->check(CLI::PositiveNumber);
  ret->add_option("--out", rt.out, "Report CSV");

  // select-view
  struct {
    std::string mesh;
    uint64_t seed = 0;
  } sv;
  sv.seed = seed_default;
  auto* sel = app.add_subcommand("select-view", "Pick the least occluded of four yaw candidates");
  sel->add_option("--mesh", sv.mesh, "OBJ mesh")->required();
  sel->add_option("--seed", sv.seed, "Surface sampling seed");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  try {
    if (*gen) {
      gd.space.check();
      const Flavor flavor = parse_flavor(gd.flavor);
      gen_dataset(gd.n, gd.seed, gd.out, gd.space, flavor, gd.teacher_seed);
      out << "wrote " << gd.n << " records to " << gd.out << "\n";
      return kExitOk;
    }

    if (*trn) {
      const Stage stage = parse_stage(tr.stage);
      if (stage == Stage::Finetune && tr.init_ckpt.empty()) {
        err << "error: --stage finetune requires --init-ckpt\n" << trn->help();
        return kExitUsage;
      }
      TrainConfig cfg = TrainConfig::for_stage(stage);
      if (tr.steps) cfg.steps = *tr.steps;
      if (tr.batch_size) cfg.batch_size = *tr.batch_size;
      if (tr.lr_max) cfg.lr_max = *tr.lr_max;
      if (tr.lr_min) cfg.lr_min = *tr.lr_min;
      if (tr.weight_decay) cfg.weight_decay = *tr.weight_decay;
      if (tr.lambda_p) cfg.weights.patch = *tr.lambda_p;
      if (tr.lambda_cls) cfg.weights.cls = *tr.lambda_cls;
      if (tr.lambda_reg) cfg.weights.reg = *tr.lambda_reg;
      cfg.seed = tr.seed;
      cfg.dataset = tr.dataset;
      cfg.init_checkpoint = tr.init_ckpt;
      cfg.checkpoint = tr.ckpt_out;
      cfg.trace = tr.trace_out.empty() ? tr.ckpt_out + ".csv" : tr.trace_out;
      cfg.log_every = tr.log_every;
      try {
        cfg.check();
        tr.dit.check();
      } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
      }
      const auto log = [&](const TraceRow& r) {
        if (r.step % cfg.log_every == 0 || r.step == 1 || r.step == cfg.steps) {
          char buf[160];
          std::snprintf(buf, sizeof buf, "step %d loss %.6f (patch %.4f cls %.4f reg %.4f) lr %.3g\n", r.step,
                        r.loss.total, r.loss.patch, r.loss.cls, r.loss.reg, r.lr);
          out << buf << std::flush;
        }
      };
      const TrainResult res = train(cfg, tr.dit, log);
      out << "wrote checkpoint " << cfg.checkpoint.string() << " (" << res.trace.size() << " steps), trace "
          << cfg.trace.string() << "\n";
      return kExitOk;
    }

    if (*smp) {
      if (sm.dataset.empty() && sm.scenes == 0) {
        err << "error: sample needs --dataset or --scenes\n" << smp->help();
        return kExitUsage;
      }
      const Checkpoint ck = load_checkpoint(sm.ckpt);
      const Model<float> model = model_from_checkpoint<float>(ck);
      const SpaceConfig& space = model.cfg.space;

      std::vector<PromptTokens> prompts;
      std::vector<TargetEmbedding> gts;
      if (!sm.dataset.empty()) {
        const Dataset ds = read_dataset(sm.dataset);
        if (!(ds.cfg == space)) throw Error(ErrorKind::ShapeMismatch, "dataset space differs from checkpoint");
        const size_t n = sm.limit > 0 ? std::min<size_t>(sm.limit, ds.records.size()) : ds.records.size();
        for (size_t i = 0; i < n; ++i) {
          prompts.push_back(ds.records[i].prompt);
          gts.push_back(ds.records[i].target);
        }
      } else {
        const FrozenTargetEncoder teacher(space, ck.global_seed);
        const Flavor flavor = parse_flavor(sm.flavor);
        for (int i = 0; i < sm.scenes; ++i) {
          const Scene sc = gen_scene(record_scene_seed(sm.scene_seed, i), space, flavor);
          prompts.push_back(scene_to_prompt(sc));
          gts.push_back(teacher.encode(sc));
        }
      }

      std::vector<TargetEmbedding> generated(prompts.size());
      const int threads = sm.deterministic ? 1 : std::max(1, sm.threads);
      auto work = [&](size_t begin, size_t stride) {
        for (size_t i = begin; i < prompts.size(); i += stride) {
          Rng rng(derive_seed(sm.rng_seed, i));
          generated[i] = model.generate(model.condition(prompts[i]), sm.steps, rng);
        }
      };
      if (threads == 1) {
        work(0, 1);
      } else {
        std::vector<std::jthread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(work, static_cast<size_t>(t), static_cast<size_t>(threads));
      }
      write_embedding_file(sm.out, generated);
      if (!sm.gt_out.empty()) write_embedding_file(sm.gt_out, gts);
      out << "wrote " << generated.size() << " embeddings to " << sm.out << "\n";
      return kExitOk;
    }

    if (*evl) {
      const auto gen_batch = read_embedding_file(ev.gen);
      const auto gt_batch = read_embedding_file(ev.gt);
      if (gen_batch.size() != gt_batch.size())
        throw Error(ErrorKind::ShapeMismatch, "generated and ground-truth counts differ");
      if (!(space_of(gen_batch.front()) == space_of(gt_batch.front())))
        throw Error(ErrorKind::ShapeMismatch, "generated and ground-truth shapes differ");
      const AlignmentReport rep = alignment_report(gen_batch, gt_batch);
      std::vector<std::pair<std::string, double>> extra;
      if (ev.fd) extra.emplace_back("fd", frechet_distance(pooled_patches(gen_batch), pooled_patches(gt_batch)));
      if (ev.kd) extra.emplace_back("kd", kernel_distance(pooled_patches(gen_batch), pooled_patches(gt_batch)));
      if (ev.out.empty()) {
        write_report_csv(out, rep, extra, rep.count);
      } else {
        std::ofstream os(ev.out, std::ios::trunc);
        if (!os) throw Error(ErrorKind::IoError, "cannot open " + ev.out);
        write_report_csv(os, rep, extra, rep.count);
        out << "wrote report " << ev.out << "\n";
      }
      return kExitOk;
    }

    if (*ret) {
      const auto queries = read_embedding_file(rt.queries);
      const auto database = read_embedding_file(rt.database);
      for (int k : rt.ks) {
        if (k > static_cast<int>(database.size())) {
          err << "error: cutoff k=" << k << " exceeds database size " << database.size() << "\n";
          return kExitUsage;
        }
      }
      std::vector<int> ids(queries.size());
      if (rt.ids.empty()) {
        for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
      } else {
        ids = read_ids(rt.ids, queries.size());
      }
      std::vector<RetrievalMode> modes;
      if (rt.mode == "both") modes = {RetrievalMode::Cls, RetrievalMode::PooledPatch};
      else modes = {parse_retrieval_mode(rt.mode)};
      std::ostringstream csv;
      csv << "mode,k,recall\n";
      for (RetrievalMode m : modes) {
        const RetrievalReport rep = retrieval(queries, database, ids, m, rt.ks);
        out << to_string(m) << ":";
        for (const auto& [k, v] : rep.recall) {
          out << " R@" << k << "=" << v;
          csv << to_string(m) << "," << k << "," << v << "\n";
        }
        out << "\n";
      }
      if (!rt.out.empty()) {
        std::ofstream os(rt.out, std::ios::trunc);
        if (!os) throw Error(ErrorKind::IoError, "cannot open " + rt.out);
        os << csv.str();
      }
      return kExitOk;
    }

    if (*sel) {
      const ViewSelection s = select_view(load_obj(sv.mesh), sv.seed);
      out << "yaw " << s.yaw << "\n";
      for (size_t k = 0; k < kCandidateYaws.size(); ++k)
        out << "  yaw " << kCandidateYaws[k] << ": " << s.counts[k] << " visible\n";
      return kExitOk;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace gap::cli
