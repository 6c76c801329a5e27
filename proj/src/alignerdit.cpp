#include "gap/alignerdit.hpp"

#include "gap/binio.hpp"

namespace gap {

void DitConfig::check() const {
  space.check();
  if (d_model < 1 || n_blocks < 1 || n_heads < 1 || d_freq < 2 || d_freq % 2 != 0 || ffn_mult < 1)
    throw Error(ErrorKind::InvalidArgument, "dit config dimension out of range");
  if (d_model % n_heads != 0) throw Error(ErrorKind::InvalidArgument, "d_model must be divisible by n_heads");
  if (head_dim() % 4 != 0) throw Error(ErrorKind::OddHeadDim, "head dim must be divisible by 4");
}

nlohmann::json DitConfig::to_json() const {
  return {{"d_model", d_model}, {"n_blocks", n_blocks}, {"n_heads", n_heads}, {"d_freq", d_freq},
          {"ffn_mult", ffn_mult}, {"rope_base", rope_base}, {"space", space.to_json()}};
}

DitConfig DitConfig::from_json(const nlohmann::json& j) {
  DitConfig c;
  c.d_model = binio::field<int>(j, "d_model");
  c.n_blocks = binio::field<int>(j, "n_blocks");
  c.n_heads = binio::field<int>(j, "n_heads");
  c.d_freq = binio::field<int>(j, "d_freq");
  c.ffn_mult = binio::field<int>(j, "ffn_mult");
  c.rope_base = binio::field<double>(j, "rope_base");
  c.space = SpaceConfig::from_json(binio::field<nlohmann::json>(j, "space"));
  return c;
}

}  // namespace gap
