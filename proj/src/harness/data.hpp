#pragma once

#include <string>
#include <vector>

#include "ad/tensor.hpp"
#include "sim/dataset.hpp"

namespace se3ctrl::harness {

// One training minibatch, laid out for the nets. `assoc` doubles as the
// next-frame encoder input and as the reconstruction target.
struct Batch {
  ad::Tensor<float> x_t;     // [B,3,H,W]
  ad::Tensor<float> assoc;   // [B,3,H,W]
  ad::Tensor<float> u;       // [B,n_ctrl]
  ad::Tensor<float> q;       // [B,n_joints]
  ad::Tensor<float> q_next;  // [B,n_joints]
  int b = 0;
};

inline std::vector<sim::PairRecord> load_records(const std::string& dir,
                                                 const sim::DatasetManifest& m,
                                                 const std::vector<int>& indices,
                                                 bool keep_masks) {
  std::vector<sim::PairRecord> out;
  out.reserve(indices.size());
  for (int idx : indices) {
    sim::PairRecord r = sim::load_pair(dir, m, idx);
    if (!keep_masks) {
      r.gt_masks.clear();
      r.gt_masks.shrink_to_fit();
      r.flow.clear();
      r.flow.shrink_to_fit();
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline Batch make_batch(const sim::DatasetManifest& m, const std::vector<sim::PairRecord>& pairs,
                        const std::vector<int>& pick) {
  const int b = static_cast<int>(pick.size());
  const int64_t chw = static_cast<int64_t>(3) * m.h * m.w;
  Batch out;
  out.b = b;
  out.x_t = ad::Tensor<float>({b, 3, m.h, m.w});
  out.assoc = ad::Tensor<float>({b, 3, m.h, m.w});
  out.u = ad::Tensor<float>({b, m.n_ctrl});
  out.q = ad::Tensor<float>({b, m.n_joints});
  out.q_next = ad::Tensor<float>({b, m.n_joints});
  for (int i = 0; i < b; ++i) {
    const sim::PairRecord& r = pairs.at(static_cast<size_t>(pick[static_cast<size_t>(i)]));
    std::copy(r.cloud.begin(), r.cloud.end(), out.x_t.data.begin() + i * chw);
    std::copy(r.assoc.begin(), r.assoc.end(), out.assoc.data.begin() + i * chw);
    std::copy(r.u.begin(), r.u.end(), out.u.data.begin() + static_cast<int64_t>(i) * m.n_ctrl);
    std::copy(r.q.begin(), r.q.end(), out.q.data.begin() + static_cast<int64_t>(i) * m.n_joints);
    std::copy(r.q_next.begin(), r.q_next.end(),
              out.q_next.data.begin() + static_cast<int64_t>(i) * m.n_joints);
  }
  return out;
}

}  // namespace se3ctrl::harness
