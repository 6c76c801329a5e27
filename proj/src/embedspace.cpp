#include "gap/embedspace.hpp"

#include <fstream>

#include "gap/binio.hpp"

namespace gap {

namespace {
constexpr binio::Magic kMagic{'G', 'A', 'P', 'E'};
}

void SpaceConfig::check() const {
  if (h < 1 || w < 1 || d_img < 1 || n_reg < 0 || s < 1 || d_cond < 1)
    throw Error(ErrorKind::InvalidArgument, "space config dimension out of range");
}

nlohmann::json SpaceConfig::to_json() const {
  return {{"h", h}, {"w", w}, {"d_img", d_img}, {"n_reg", n_reg}, {"s", s}, {"d_cond", d_cond}};
}

SpaceConfig SpaceConfig::from_json(const nlohmann::json& j) {
  SpaceConfig c;
  c.h = binio::field<int>(j, "h");
  c.w = binio::field<int>(j, "w");
  c.d_img = binio::field<int>(j, "d_img");
  c.n_reg = binio::field<int>(j, "n_reg");
  c.s = binio::field<int>(j, "s");
  c.d_cond = binio::field<int>(j, "d_cond");
  return c;
}

std::optional<ValidationError> validate(const ConditioningSequence& c, const SpaceConfig& cfg) {
  if (c.latents.rows() != cfg.s || c.latents.cols() != cfg.d_cond)
    return ValidationError{ErrorKind::ShapeMismatch, "conditioning shape"};
  if (!all_finite(c.latents)) return ValidationError{ErrorKind::NonFinite, "non-finite conditioning"};
  return std::nullopt;
}

SpaceConfig space_of(const TargetEmbedding& e) {
  SpaceConfig c;
  c.h = e.h;
  c.w = e.w;
  c.d_img = static_cast<int>(e.patches.cols());
  c.n_reg = static_cast<int>(e.registers.rows());
  return c;
}

void write_embedding_record(binio::Writer& w, const TargetEmbedding& e) {
  w.f32_block(e.patches);
  w.f32_block(e.cls);
  w.f32_block(e.registers);
}

TargetEmbedding read_embedding_record(binio::Reader& r, const SpaceConfig& shape) {
  TargetEmbedding e = TargetEmbedding::zeros(shape);
  r.f32_block(e.patches);
  r.f32_block(e.cls);
  r.f32_block(e.registers);
  return e;
}

void write_embedding_file(const std::filesystem::path& path, const std::vector<TargetEmbedding>& batch) {
  if (batch.empty()) throw Error(ErrorKind::InvalidArgument, "empty embedding batch");
  const SpaceConfig shape = space_of(batch.front());
  for (const auto& e : batch) {
    if (auto err = validate(e, shape)) {
      if (err->kind == ErrorKind::ShapeMismatch)
        throw Error(ErrorKind::ShapeMismatch, "heterogeneous batch: " + err->message);
      throw Error(err->kind, err->message);
    }
  }

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  binio::Writer w(os);
  w.magic(kMagic);
  w.u32(embedfile::kVersion);
  w.json({{"count", batch.size()},
          {"h", shape.h},
          {"w", shape.w},
          {"d_img", shape.d_img},
          {"n_reg", shape.n_reg}});
  for (const auto& e : batch) write_embedding_record(w, e);
  os.flush();
  w.check();
}

std::vector<TargetEmbedding> read_embedding_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  binio::Reader r(is);
  r.expect_magic(kMagic);
  const uint32_t version = r.u32();
  if (version != embedfile::kVersion)
    throw Error(ErrorKind::FormatError, "unsupported version " + std::to_string(version));
  const auto manifest = r.json();
  SpaceConfig shape;
  shape.h = binio::field<int>(manifest, "h");
  shape.w = binio::field<int>(manifest, "w");
  shape.d_img = binio::field<int>(manifest, "d_img");
  shape.n_reg = binio::field<int>(manifest, "n_reg");
  const auto count = binio::field<int64_t>(manifest, "count");
  if (count < 1 || shape.h < 1 || shape.w < 1 || shape.d_img < 1 || shape.n_reg < 0)
    throw Error(ErrorKind::FormatError, "manifest values out of range");

  std::vector<TargetEmbedding> out;
  out.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) out.push_back(read_embedding_record(r, shape));
  if (!r.at_eof()) throw Error(ErrorKind::FormatError, "trailing bytes after last record");
  return out;
}

}  // namespace gap
