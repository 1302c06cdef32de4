#pragma once

#include <vector>

#include "calibflow/geometry.hpp"

namespace calibflow {

// Matched 2D pixel / 3D point pairs feeding the PnP solvers.
template <typename Scalar>
struct CorrespondenceSet {
  Mat2X<Scalar> pixels;                    // continuous pixel coordinates
  Mat3X<Scalar> points;                    // LiDAR-frame 3D points
  std::vector<Eigen::Index> source_index;  // index into the originating cloud
  CameraIntrinsics<Scalar> intrinsics;

  Eigen::Index size() const { return pixels.cols(); }
};

}  // namespace calibflow
