#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sbanet/mask.hpp"

namespace sbanet {

struct Sample;
struct Dataset;
struct ModelParams;

inline const std::vector<double> kDefaultThresholds = {0.5, 0.7, 0.9};

struct MetricsReport {
  double oiou = 0.0;
  double miou = 0.0;
  std::vector<std::pair<double, double>> pr;  // (threshold, fraction of samples with IoU > threshold)
  std::vector<double> per_sample_iou;
  std::size_t count = 0;

  // Throws ContractError when the threshold was not requested.
  double pr_at(double threshold) const;
};

struct PixelCounts {
  std::uint64_t intersection = 0;
  std::uint64_t union_ = 0;
};

PixelCounts pixel_counts(const BinaryMask& pred, const BinaryMask& gt);
// |pred ∧ gt| / |pred ∨ gt|; an empty union counts as 1.
double iou(const BinaryMask& pred, const BinaryMask& gt);

MetricsReport aggregate(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts,
                        const std::vector<double>& thresholds = kDefaultThresholds);

using Predictor = std::function<BinaryMask(const Sample&)>;

MetricsReport evaluate(const Dataset& data, const Predictor& predict,
                       const std::vector<double>& thresholds = kDefaultThresholds);
// Forward pass without recording, then predict_mask.
MetricsReport evaluate(const ModelParams& params, const Dataset& data,
                       const std::vector<double>& thresholds = kDefaultThresholds);

std::string metrics_csv_header();
// oIoU,mIoU,Pr@0.5,Pr@0.7,Pr@0.9,n for the default thresholds.
std::string metrics_csv_row(const MetricsReport& report);

}  // namespace sbanet
