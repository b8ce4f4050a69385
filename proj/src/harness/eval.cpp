#include "harness/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "harness/data.hpp"
#include "losses/losses.hpp"
#include "util/io.hpp"

namespace se3ctrl::harness {

namespace fs = std::filesystem;

LoadedModel load_model(const std::string& checkpoint_dir) {
  const nlohmann::json meta = ad::ParamStore<float>::read_meta(checkpoint_dir);
  if (!meta.contains("model") || !meta.contains("net"))
    throw std::runtime_error("checkpoint: missing model metadata in " + checkpoint_dir);
  LoadedModel m;
  m.kind = model_kind_from(meta.at("model").get<std::string>());
  m.net_cfg = net_config_from_json(meta.at("net"));
  m.step = meta.value("step", int64_t{0});
  if (m.kind == ModelKind::se3posenet) {
    m.pose = std::make_unique<nets::Se3PoseNet<float>>(m.net_cfg);
    m.pose->params().load(checkpoint_dir);
  } else {
    m.flow = std::make_unique<nets::FlowNet<float>>(m.net_cfg);
    m.flow->params().load(checkpoint_dir);
  }
  return m;
}

namespace {

// Greedy one-to-one matching of predicted channels to ground-truth parts by
// IoU; returns per-part IoU (unmatched parts score 0).
std::vector<double> greedy_iou(const std::vector<int>& pred, const std::vector<int>& gt, int k,
                               int k_gt) {
  std::vector<int64_t> inter(static_cast<size_t>(k) * k_gt, 0);
  std::vector<int64_t> cnt_pred(static_cast<size_t>(k), 0), cnt_gt(static_cast<size_t>(k_gt), 0);
  for (size_t i = 0; i < pred.size(); ++i) {
    ++inter[static_cast<size_t>(pred[i]) * k_gt + gt[i]];
    ++cnt_pred[static_cast<size_t>(pred[i])];
    ++cnt_gt[static_cast<size_t>(gt[i])];
  }
  std::vector<bool> used_pred(static_cast<size_t>(k), false), used_gt(static_cast<size_t>(k_gt), false);
  std::vector<double> iou(static_cast<size_t>(k_gt), 0.0);
  const int n_match = std::min(k, k_gt);
  for (int round = 0; round < n_match; ++round) {
    double best = -1.0;
    int bi = -1, bj = -1;
    for (int i = 0; i < k; ++i) {
      if (used_pred[static_cast<size_t>(i)]) continue;
      for (int j = 0; j < k_gt; ++j) {
        if (used_gt[static_cast<size_t>(j)]) continue;
        const int64_t in = inter[static_cast<size_t>(i) * k_gt + j];
        const int64_t un = cnt_pred[static_cast<size_t>(i)] + cnt_gt[static_cast<size_t>(j)] - in;
        const double v = un > 0 ? static_cast<double>(in) / static_cast<double>(un) : 0.0;
        if (v > best) {
          best = v;
          bi = i;
          bj = j;
        }
      }
    }
    if (bi < 0) break;
    used_pred[static_cast<size_t>(bi)] = true;
    used_gt[static_cast<size_t>(bj)] = true;
    iou[static_cast<size_t>(bj)] = best;
  }
  return iou;
}

}  // namespace

EvalReport evaluate(LoadedModel& model, const std::string& dataset_dir, const std::string& split,
                    int max_pairs, const losses::LossConfig& loss) {
  loss.validate();
  const sim::DatasetManifest manifest = sim::load_manifest(dataset_dir);
  if (manifest.h != model.net_cfg.h || manifest.w != model.net_cfg.w)
    throw std::invalid_argument("eval: dataset resolution does not match the checkpoint");
  if (manifest.n_ctrl != model.net_cfg.n_ctrl)
    throw std::invalid_argument("eval: dataset control width does not match the checkpoint");
  if (model.net_cfg.use_joint_angles && manifest.n_joints != model.net_cfg.n_joints)
    throw std::invalid_argument("eval: dataset joint count does not match the checkpoint");

  std::vector<int> indices = manifest.pair_indices(split);
  if (indices.empty()) throw std::invalid_argument("eval: split '" + split + "' is empty");
  if (max_pairs > 0 && static_cast<int>(indices.size()) > max_pairs)
    indices.resize(static_cast<size_t>(max_pairs));
  const bool is_pose = model.kind == ModelKind::se3posenet;
  const std::vector<sim::PairRecord> pairs =
      load_records(dataset_dir, manifest, indices, /*keep_masks=*/is_pose);

  EvalReport rep;
  rep.model = model_kind_name(model.kind);
  rep.split = split;
  rep.step = model.step;

  const int64_t hw = static_cast<int64_t>(manifest.h) * manifest.w;
  const double thr2 = loss.motion_threshold * loss.motion_threshold;
  const int k = model.net_cfg.k;
  const int k_gt = manifest.k_gt;

  double mse_acc = 0.0;
  double cons_acc = 0.0;
  int64_t cons_n = 0;
  std::vector<double> iou_acc(static_cast<size_t>(k_gt), 0.0);
  int64_t iou_n = 0;

  const int batch_size = 16;
  const int total = static_cast<int>(pairs.size());
  for (int start = 0; start < total; start += batch_size) {
    const int b = std::min(batch_size, total - start);
    std::vector<int> pick(static_cast<size_t>(b));
    for (int i = 0; i < b; ++i) pick[static_cast<size_t>(i)] = start + i;
    const Batch batch = make_batch(manifest, pairs, pick);

    ad::Graph<float> g;
    ad::ParamStore<float>& ps = is_pose ? model.pose->params() : model.flow->params();
    ad::Binder<float> bind(g, ps, /*train=*/false);
    nets::Ctx<float> ctx{g, bind, nullptr};
    const int x_t = g.constant(batch.x_t, "x_t");
    const int u = g.constant(batch.u, "u");
    const int q_t = model.net_cfg.use_joint_angles ? g.constant(batch.q, "q_t") : -1;

    int xhat = -1, masks = -1;
    if (is_pose) {
      const int x_t1 = g.constant(batch.assoc, "x_t1");
      const int q_t1 = model.net_cfg.use_joint_angles ? g.constant(batch.q_next, "q_t1") : -1;
      auto out = model.pose->training_graph(ctx, x_t, x_t1, u, q_t, q_t1, /*progress=*/1.0, nullptr);
      xhat = out.xhat;
      masks = out.masks;
      const int lp = losses::loss_consistency(g, out.pose_t, out.delta, out.pose_t1);
      cons_acc += static_cast<double>(g.val(lp).data[0]) * b;
      cons_n += b;
    } else {
      const int flow = model.flow->forward(ctx, x_t, u, q_t);
      xhat = ad::add(g, x_t, flow);
    }

    const ad::Tensor<float>& vh = g.val(xhat);
    for (int i = 0; i < b; ++i) {
      const sim::PairRecord& r = pairs[static_cast<size_t>(start + i)];
      int64_t moving = 0;
      double sum = 0.0;
      const float* xh = vh.ptr() + static_cast<int64_t>(i) * 3 * hw;
      for (int64_t p = 0; p < hw; ++p) {
        double d2 = 0.0, f2 = 0.0;
        for (int c = 0; c < 3; ++c) {
          const double dv = static_cast<double>(xh[c * hw + p]) - r.assoc[static_cast<size_t>(c * hw + p)];
          const double fv = static_cast<double>(r.assoc[static_cast<size_t>(c * hw + p)]) -
                            r.cloud[static_cast<size_t>(c * hw + p)];
          d2 += dv * dv;
          f2 += fv * fv;
        }
        sum += d2;
        if (f2 > thr2) ++moving;
      }
      if (moving == 0) {
        ++rep.n_skipped;
      } else {
        mse_acc += 1e4 * sum / static_cast<double>(moving);
        ++rep.n_pairs;
      }

      if (is_pose) {
        const ad::Tensor<float>& vm = g.val(masks);
        std::vector<int> pred(static_cast<size_t>(hw)), gt(static_cast<size_t>(hw));
        const float* mp = vm.ptr() + static_cast<int64_t>(i) * k * hw;
        for (int64_t p = 0; p < hw; ++p) {
          int bk = 0;
          float bv = mp[p];
          for (int c = 1; c < k; ++c)
            if (mp[c * hw + p] > bv) {
              bv = mp[c * hw + p];
              bk = c;
            }
          pred[static_cast<size_t>(p)] = bk;
          int bg = 0;
          float gv = r.gt_masks[static_cast<size_t>(p)];
          for (int c = 1; c < k_gt; ++c)
            if (r.gt_masks[static_cast<size_t>(c * hw + p)] > gv) {
              gv = r.gt_masks[static_cast<size_t>(c * hw + p)];
              bg = c;
            }
          gt[static_cast<size_t>(p)] = bg;
        }
        const std::vector<double> iou = greedy_iou(pred, gt, k, k_gt);
        for (int j = 0; j < k_gt; ++j) iou_acc[static_cast<size_t>(j)] += iou[static_cast<size_t>(j)];
        ++iou_n;
      }
    }
  }

  if (rep.n_pairs == 0) throw std::runtime_error("eval: every pair was static; nothing to score");
  rep.flow_mse_cm = mse_acc / rep.n_pairs;
  if (is_pose) {
    rep.consistency = cons_acc / static_cast<double>(cons_n);
    rep.mask_iou.resize(static_cast<size_t>(k_gt));
    double m = 0.0;
    for (int j = 0; j < k_gt; ++j) {
      rep.mask_iou[static_cast<size_t>(j)] = iou_acc[static_cast<size_t>(j)] / static_cast<double>(iou_n);
      m += rep.mask_iou[static_cast<size_t>(j)];
    }
    rep.mean_iou = m / k_gt;
  }
  for (double v : {rep.flow_mse_cm, rep.consistency, rep.mean_iou})
    if (!std::isfinite(v) || v < 0.0) throw std::runtime_error("eval: non-finite or negative metric");
  return rep;
}

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["model"] = r.model;
  j["split"] = r.split;
  j["step"] = r.step;
  j["n_pairs"] = r.n_pairs;
  j["n_skipped"] = r.n_skipped;
  j["flow_mse_cm"] = r.flow_mse_cm;
  if (r.model == "se3posenet") {
    j["consistency"] = r.consistency;
    j["mask_iou"] = r.mask_iou;
    j["mean_iou"] = r.mean_iou;
  }
  return j;
}

void write_report(const std::string& path, const EvalReport& r) {
  util::write_text_file(path, report_to_json(r).dump(2) + "\n");
}

}  // namespace se3ctrl::harness
