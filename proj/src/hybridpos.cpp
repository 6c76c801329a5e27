#include "gap/hybridpos.hpp"

namespace gap {

RopeTable::RopeTable(int head_dim, int max_pos, double base)
    : head_dim_(head_dim), max_pos_(max_pos), base_(base) {
  if (head_dim <= 0 || head_dim % 4 != 0)
    throw Error(ErrorKind::OddHeadDim, "rope head_dim must be a positive multiple of 4");
  if (max_pos < 1) throw Error(ErrorKind::InvalidArgument, "rope max_pos must be >= 1");
  const int pairs = head_dim / 4;
  const double half = head_dim / 2.0;
  freq_.resize(pairs);
  for (int m = 0; m < pairs; ++m) freq_(m) = std::pow(base, -2.0 * m / half);
  cos_.resize(max_pos, pairs);
  sin_.resize(max_pos, pairs);
  for (int p = 0; p < max_pos; ++p)
    for (int m = 0; m < pairs; ++m) {
      cos_(p, m) = std::cos(p * freq_(m));
      sin_(p, m) = std::sin(p * freq_(m));
    }
}

}  // namespace gap
