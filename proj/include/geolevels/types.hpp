#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace geolevels {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixXd = MatrixX<double>;
using VectorXd = VectorX<double>;
using Index = Eigen::Index;

using TileId = std::int64_t;
using DistrictId = std::int64_t;

/// splitmix64 finalizer; used to derive independent child seeds from a master seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index = 0) {
  return mix_seed(mix_seed(master ^ mix_seed(stream)) + index);
}

}  // namespace geolevels
