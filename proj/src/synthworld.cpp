#include "gap/synthworld.hpp"

#include <algorithm>
#include <fstream>

#include "gap/binio.hpp"

namespace gap {

namespace {

constexpr binio::Magic kDatasetMagic{'G', 'A', 'P', 'D'};

int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

void check_grid_for_prompts(const SpaceConfig& cfg) {
  cfg.check();
  if (cfg.h > vocab::kMaxCoordinate || cfg.w > vocab::kMaxCoordinate)
    throw Error(ErrorKind::InvalidArgument, "grid too large for the prompt vocabulary (max 46 per axis)");
}

}  // namespace

const std::array<std::array<float, 3>, kPaletteSize>& palette() {
  static const std::array<std::array<float, 3>, kPaletteSize> kPalette{{
      {1.0f, 0.0f, 0.0f},  // red
      {0.0f, 1.0f, 0.0f},  // green
      {0.0f, 0.0f, 1.0f},  // blue
      {1.0f, 1.0f, 0.0f},  // yellow
      {0.0f, 1.0f, 1.0f},  // cyan
      {1.0f, 0.0f, 1.0f},  // magenta
      {1.0f, 1.0f, 1.0f},  // white
      {1.0f, 0.5f, 0.0f},  // orange
  }};
  return kPalette;
}

const char* to_string(Flavor f) { return f == Flavor::Pretrain ? "pretrain" : "finetune"; }

Flavor parse_flavor(const std::string& s) {
  if (s == "pretrain") return Flavor::Pretrain;
  if (s == "finetune") return Flavor::Finetune;
  throw Error(ErrorKind::InvalidArgument, "unknown flavor '" + s + "'");
}

Scene gen_scene(uint64_t seed, const SpaceConfig& cfg, Flavor flavor) {
  check_grid_for_prompts(cfg);
  Rng rng(splitmix64(seed));
  Scene sc;
  sc.seed = seed;
  const int count = flavor == Flavor::Finetune ? 1 : uniform_int(rng, 1, kMaxObjects);
  for (int k = 0; k < count; ++k) {
    SceneObject o;
    o.shape = uniform_int(rng, 0, 2);
    o.color = uniform_int(rng, 0, kPaletteSize - 1);
    o.size = uniform_int(rng, 1, 3);
    if (flavor == Flavor::Finetune) {
      o.row = std::max(0, (cfg.h - o.size) / 2);
      o.col = std::max(0, (cfg.w - o.size) / 2);
    } else {
      o.row = uniform_int(rng, 0, cfg.h - 1);
      o.col = uniform_int(rng, 0, cfg.w - 1);
    }
    sc.objects.push_back(o);
  }
  return sc;
}

void check_scene(const Scene& sc, const SpaceConfig& cfg) {
  if (sc.objects.empty() || static_cast<int>(sc.objects.size()) > kMaxObjects)
    throw Error(ErrorKind::InvalidArgument, "scene must hold 1..4 objects");
  for (const auto& o : sc.objects) {
    if (o.shape < 0 || o.shape > 2 || o.color < 0 || o.color >= kPaletteSize || o.size < 1 || o.size > 3 ||
        o.row < 0 || o.row >= cfg.h || o.col < 0 || o.col >= cfg.w)
      throw Error(ErrorKind::InvalidArgument, "scene object attribute out of range");
  }
}

PromptTokens scene_to_prompt(const Scene& sc) {
  if (sc.objects.empty()) throw Error(ErrorKind::InvalidArgument, "scene without objects");
  PromptTokens p;
  p.ids.push_back(vocab::kBos);
  for (const auto& o : sc.objects) {
    if (o.row >= vocab::kMaxCoordinate || o.col >= vocab::kMaxCoordinate)
      throw Error(ErrorKind::InvalidArgument, "coordinate exceeds prompt vocabulary");
    p.ids.push_back(vocab::kSep);
    p.ids.push_back(vocab::kShapeBase + o.shape);
    p.ids.push_back(vocab::kColorBase + o.color);
    p.ids.push_back(vocab::kSizeBase + o.size - 1);
    p.ids.push_back(vocab::kNumberBase + o.row);
    p.ids.push_back(vocab::kNumberBase + o.col);
  }
  p.ids.push_back(vocab::kEos);
  return p;
}

bool covers(ShapeKind shape, int size, int di, int dj) {
  switch (shape) {
    case ShapeKind::Square:
      return true;
    case ShapeKind::Circle: {
      // Cell centers within (size/2 - 1/4) of the box center.
      const double c = (size - 1) / 2.0;
      const double r = size / 2.0 - 0.25;
      const double dy = di - c;
      const double dx = dj - c;
      return dy * dy + dx * dx <= r * r;
    }
    case ShapeKind::Triangle:
      return dj <= di;  // lower-left half, diagonal included
  }
  return false;
}

RgbGrid rasterize(const Scene& sc, const SpaceConfig& cfg) {
  RgbGrid g{cfg.h, cfg.w, Mat<float>::Zero(cfg.num_patches(), 3)};
  for (const auto& o : sc.objects) {
    const auto& color = palette()[o.color];
    for (int di = 0; di < o.size; ++di)
      for (int dj = 0; dj < o.size; ++dj) {
        const int i = o.row + di;
        const int j = o.col + dj;
        if (i >= cfg.h || j >= cfg.w) continue;
        if (!covers(static_cast<ShapeKind>(o.shape), o.size, di, dj)) continue;
        g.rgb.row(i * cfg.w + j) << color[0], color[1], color[2];
      }
  }
  return g;
}

Eigen::Matrix<double, 8, 1> pooled_stats(const Scene& sc, const RgbGrid& g) {
  Eigen::Matrix<double, 8, 1> s;
  const Eigen::MatrixXd rgb = g.rgb.cast<double>();
  s.segment<3>(0) = rgb.colwise().mean().transpose();
  s.segment<3>(3) = rgb.colwise().maxCoeff().transpose();
  s(6) = static_cast<double>((rgb.rowwise().sum().array() > 0.0).count()) / static_cast<double>(rgb.rows());
  s(7) = static_cast<double>(sc.objects.size()) / 4.0;
  return s;
}

FrozenTargetEncoder::FrozenTargetEncoder(const SpaceConfig& cfg, uint64_t seed) : cfg_(cfg), seed_(seed) {
  check_grid_for_prompts(cfg);
  const int d = cfg.d_img;
  Rng rng(derive_seed(seed, 0x54415247ULL));
  patch_w_ = random_normal<float>(3, d, 2.0 / std::sqrt(3.0), rng);
  patch_b_ = random_normal<float>(1, d, 0.1, rng);
  poscode_ = random_normal<float>(cfg.num_patches(), d, 0.1, rng);
  cls_w_ = random_normal<float>(3, d, 1.0 / std::sqrt(3.0), rng);
  cls_b_ = random_normal<float>(1, d, 0.1, rng);
  for (int k = 0; k < cfg.n_reg; ++k) {
    reg_w_.push_back(random_normal<float>(8, d, 1.0 / std::sqrt(8.0), rng));
    reg_b_.push_back(random_normal<float>(1, d, 0.1, rng));
  }

  // Reference statistics of the multi-object scene distribution; the global
  // affines act on standardized statistics so that CLS and registers vary
  // across scenes rather than being dominated by a shared offset.
  constexpr int kReference = 512;
  Eigen::Matrix<double, 8, Eigen::Dynamic> stats(8, kReference);
  for (int k = 0; k < kReference; ++k) {
    const Scene sc = gen_scene(derive_seed(seed, 0x5245460000ULL + k), cfg, Flavor::Pretrain);
    stats.col(k) = pooled_stats(sc, rasterize(sc, cfg));
  }
  stat_mean_ = stats.rowwise().mean();
  stat_std_ = ((stats.colwise() - stat_mean_).array().square().rowwise().mean()).sqrt().max(1e-3);
}

TargetEmbedding FrozenTargetEncoder::encode(const Scene& sc) const {
  check_scene(sc, cfg_);
  const RgbGrid g = rasterize(sc, cfg_);
  TargetEmbedding e;
  e.h = cfg_.h;
  e.w = cfg_.w;
  e.patches = g.rgb * patch_w_ + poscode_;
  e.patches.rowwise() += patch_b_.row(0);

  const Eigen::Matrix<double, 8, 1> z = (pooled_stats(sc, g) - stat_mean_).cwiseQuotient(stat_std_);
  const Mat<float> zf = z.transpose().cast<float>();
  e.cls = zf.leftCols(3) * cls_w_ + cls_b_;
  e.registers.resize(cfg_.n_reg, cfg_.d_img);
  for (int k = 0; k < cfg_.n_reg; ++k) e.registers.row(k) = zf * reg_w_[k] + reg_b_[k];
  return e;
}

ConditioningSequence encode_prompt(const PromptTokens& p, const FrozenPromptEncoder<float>& enc) {
  return {enc.forward(p)};
}

Dataset make_dataset(int n, uint64_t seed, const SpaceConfig& cfg, Flavor flavor, uint64_t teacher_seed) {
  if (n < 1) throw Error(ErrorKind::InvalidArgument, "dataset size must be >= 1");
  const FrozenTargetEncoder teacher(cfg, teacher_seed);
  Dataset ds{cfg, flavor, teacher_seed, {}};
  ds.records.reserve(n);
  for (int i = 0; i < n; ++i) {
    const uint64_t scene_seed = record_scene_seed(seed, i);
    const Scene sc = gen_scene(scene_seed, cfg, flavor);
    ds.records.push_back({scene_to_prompt(sc), teacher.encode(sc), scene_seed});
  }
  return ds;
}

void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
  if (ds.records.empty()) throw Error(ErrorKind::InvalidArgument, "empty dataset");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  binio::Writer w(os);
  w.magic(kDatasetMagic);
  w.u32(datasetfile::kVersion);
  w.json({{"n", ds.records.size()},
          {"cfg", ds.cfg.to_json()},
          {"flavor", to_string(ds.flavor)},
          {"teacher_seed", ds.teacher_seed}});
  for (const auto& r : ds.records) {
    require_valid(r.target, ds.cfg);
    w.u32(static_cast<uint32_t>(r.prompt.ids.size()));
    for (int id : r.prompt.ids) w.u32(static_cast<uint32_t>(id));
    write_embedding_record(w, r.target);
    w.u64(r.scene_seed);
  }
  os.flush();
  w.check();
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  binio::Reader r(is);
  r.expect_magic(kDatasetMagic);
  if (r.u32() != datasetfile::kVersion) throw Error(ErrorKind::FormatError, "unsupported dataset version");
  const auto manifest = r.json();
  Dataset ds;
  ds.cfg = SpaceConfig::from_json(binio::field<nlohmann::json>(manifest, "cfg"));
  try {
    ds.cfg.check();
    ds.flavor = parse_flavor(binio::field<std::string>(manifest, "flavor"));
  } catch (const Error& e) {
    throw Error(ErrorKind::FormatError, e.what());
  }
  ds.teacher_seed = binio::field<uint64_t>(manifest, "teacher_seed");
  const auto n = binio::field<int64_t>(manifest, "n");
  if (n < 1) throw Error(ErrorKind::FormatError, "dataset record count out of range");
  ds.records.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    DatasetRecord rec;
    const uint32_t len = r.u32();
    if (len > static_cast<uint32_t>(kMaxPromptLength)) throw Error(ErrorKind::FormatError, "prompt too long");
    rec.prompt.ids.resize(len);
    for (auto& id : rec.prompt.ids) {
      id = static_cast<int>(r.u32());
      if (id >= kVocabSize) throw Error(ErrorKind::FormatError, "token id outside vocabulary");
    }
    rec.target = read_embedding_record(r, ds.cfg);
    rec.scene_seed = r.u64();
    ds.records.push_back(std::move(rec));
  }
  if (!r.at_eof()) throw Error(ErrorKind::FormatError, "trailing bytes after last record");
  return ds;
}

void gen_dataset(int n, uint64_t seed, const std::filesystem::path& path, const SpaceConfig& cfg, Flavor flavor,
                 uint64_t teacher_seed) {
  write_dataset(path, make_dataset(n, seed, cfg, flavor, teacher_seed));
}

}  // namespace gap
