#include "cmformer/metrics.hpp"

#include <string>

#include "cmformer/errors.hpp"

namespace cmf {

void Confusion::add(const std::uint8_t* pred, const std::uint8_t* gt,
                    std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    if (gt[i] == 255) continue;  // ignore label
    if (gt[i] >= k) {
      throw tensor_error("confusion: gt label " + std::to_string(gt[i]) +
                         " >= " + std::to_string(k));
    }
    if (pred[i] >= k) {
      throw tensor_error("confusion: pred label " + std::to_string(pred[i]) +
                         " >= " + std::to_string(k));
    }
    ++m[gt[i] * k + pred[i]];
  }
}

void Confusion::merge(const Confusion& other) {
  for (std::size_t i = 0; i < m.size(); ++i) m[i] += other.m[i];
}

MetricsReport miou_from_confusion(const Confusion& c) {
  MetricsReport report;
  report.per_class_iou.assign(c.k, std::nullopt);
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t cls = 0; cls < c.k; ++cls) {
    std::uint64_t tp = c.m[cls * c.k + cls];
    std::uint64_t fp = 0, fn = 0;
    for (std::size_t o = 0; o < c.k; ++o) {
      if (o == cls) continue;
      fp += c.m[o * c.k + cls];
      fn += c.m[cls * c.k + o];
    }
    const std::uint64_t uni = tp + fp + fn;
    if (uni == 0) continue;  // absent from both gt and prediction
    const double iou =
        static_cast<double>(tp) / static_cast<double>(uni);
    report.per_class_iou[cls] = iou;
    sum += iou;
    ++present;
  }
  if (present > 0) report.miou = sum / static_cast<double>(present);
  return report;
}

MetricsReport confusion_and_miou(const std::vector<std::uint8_t>& pred,
                                 const std::vector<std::uint8_t>& gt,
                                 std::size_t n_classes) {
  if (pred.size() != gt.size()) {
    throw tensor_error("confusion: pred/gt size mismatch");
  }
  Confusion c(n_classes);
  c.add(pred.data(), gt.data(), pred.size());
  return miou_from_confusion(c);
}

}  // namespace cmf
