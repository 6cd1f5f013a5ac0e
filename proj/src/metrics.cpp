#include "sbanet/metrics.hpp"

#include <cmath>
#include <cstdio>

#include "sbanet/errors.hpp"
#include "sbanet/model.hpp"
#include "sbanet/synth.hpp"

namespace sbanet {

double MetricsReport::pr_at(double threshold) const {
  for (const auto& [t, v] : pr) {
    if (t == threshold) return v;
  }
  throw ContractError("metrics: no precision computed at threshold " + std::to_string(threshold));
}

PixelCounts pixel_counts(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width || pred.bits.size() != gt.bits.size()) {
    throw ShapeError("iou: prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                     " does not match ground truth " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
  PixelCounts c;
  for (std::size_t i = 0; i < gt.bits.size(); ++i) {
    if (pred.bits[i] > 1 || gt.bits[i] > 1) throw DataError("iou: mask values must be 0 or 1");
    c.intersection += pred.bits[i] & gt.bits[i];
    c.union_ += pred.bits[i] | gt.bits[i];
  }
  return c;
}

double iou(const BinaryMask& pred, const BinaryMask& gt) {
  const PixelCounts c = pixel_counts(pred, gt);
  if (c.union_ == 0) return 1.0;
  return static_cast<double>(c.intersection) / static_cast<double>(c.union_);
}

MetricsReport aggregate(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts,
                        const std::vector<double>& thresholds) {
  if (preds.empty()) throw ContractError("aggregate: no samples");
  if (preds.size() != gts.size()) {
    throw ContractError("aggregate: " + std::to_string(preds.size()) + " predictions for " +
                        std::to_string(gts.size()) + " ground truths");
  }
  for (double t : thresholds) {
    if (!(t > 0.0 && t < 1.0)) throw ContractError("aggregate: threshold " + std::to_string(t) + " outside (0, 1)");
  }
  MetricsReport r;
  r.count = preds.size();
  std::uint64_t inter = 0, uni = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const PixelCounts c = pixel_counts(preds[i], gts[i]);
    inter += c.intersection;
    uni += c.union_;
    const double v = c.union_ == 0 ? 1.0 : static_cast<double>(c.intersection) / static_cast<double>(c.union_);
    r.per_sample_iou.push_back(v);
    total += v;
  }
  r.miou = total / static_cast<double>(r.count);
  r.oiou = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  for (double t : thresholds) {
    std::size_t hits = 0;
    for (double v : r.per_sample_iou) hits += v > t;
    r.pr.emplace_back(t, static_cast<double>(hits) / static_cast<double>(r.count));
  }
  return r;
}

MetricsReport evaluate(const Dataset& data, const Predictor& predict, const std::vector<double>& thresholds) {
  if (data.samples.empty()) throw ContractError("evaluate: dataset is empty");
  std::vector<BinaryMask> preds, gts;
  preds.reserve(data.samples.size());
  gts.reserve(data.samples.size());
  for (const auto& s : data.samples) {
    preds.push_back(predict(s));
    gts.push_back(s.mask);
  }
  return aggregate(preds, gts, thresholds);
}

MetricsReport evaluate(const ModelParams& params, const Dataset& data, const std::vector<double>& thresholds) {
  NoGradScope no_grad;
  return evaluate(
      data,
      [&](const Sample& s) { return predict_mask(forward(s.image(), s.tokens, s.valid, params)); },
      thresholds);
}

std::string metrics_csv_header() { return "oIoU,mIoU,Pr@0.5,Pr@0.7,Pr@0.9,n"; }

std::string metrics_csv_row(const MetricsReport& report) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.6f,%.6f,%zu", report.oiou, report.miou, report.pr_at(0.5),
                report.pr_at(0.7), report.pr_at(0.9), report.count);
  return buf;
}

}  // namespace sbanet
